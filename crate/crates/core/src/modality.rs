use std::fmt;

use serde::{Deserialize, Serialize};

/// Maximum number of modalities a [`ModalitySet`] can address.
pub const MAX_MODALITIES: usize = 32;

/// A set of modality indices stored as a bitmask (bit `m` ⇔ modality `m`).
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModalitySet(u32);

impl ModalitySet {
    pub const EMPTY: ModalitySet = ModalitySet(0);

    pub fn from_bits(bits: u32) -> Self {
        Self(bits)
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    /// `{0, 1, …, m−1}`.
    pub fn full(m: usize) -> Self {
        debug_assert!(m <= MAX_MODALITIES);
        if m >= 32 {
            Self(u32::MAX)
        } else {
            Self((1u32 << m) - 1)
        }
    }

    pub fn single(m: usize) -> Self {
        Self(1 << m)
    }

    pub fn from_indices(indices: impl IntoIterator<Item = usize>) -> Self {
        indices.into_iter().fold(Self::EMPTY, |s, m| s.with(m))
    }

    pub fn contains(self, m: usize) -> bool {
        m < MAX_MODALITIES && self.0 & (1 << m) != 0
    }

    pub fn with(self, m: usize) -> Self {
        Self(self.0 | (1 << m))
    }

    pub fn without(self, m: usize) -> Self {
        Self(self.0 & !(1 << m))
    }

    pub fn union(self, other: Self) -> Self {
        Self(self.0 | other.0)
    }

    pub fn intersection(self, other: Self) -> Self {
        Self(self.0 & other.0)
    }

    /// Elements of `self` not in `other`.
    pub fn difference(self, other: Self) -> Self {
        Self(self.0 & !other.0)
    }

    pub fn is_subset_of(self, other: Self) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    /// Indices in increasing order.
    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..MAX_MODALITIES).filter(move |&m| self.contains(m))
    }

    /// All `2^m − 1` nonempty subsets of `{0..m}`, ordered by bitmask.
    pub fn nonempty_subsets(m: usize) -> impl Iterator<Item = ModalitySet> {
        (1..=Self::full(m).0).map(ModalitySet)
    }

    /// All nonempty subsets of `self`, ordered by bitmask.
    pub fn nonempty_subsets_of(self) -> impl Iterator<Item = ModalitySet> {
        (1..=self.0).filter(move |b| b & !self.0 == 0).map(ModalitySet)
    }
}

impl fmt::Debug for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, m) in self.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{m}")?;
        }
        f.write_str("}")
    }
}
