//! Reverse-mode differentiation over a linear tape of rank-2 primitives.
//!
//! Shape rules (no broadcasting anywhere):
//!
//! | op | inputs | output |
//! |----|--------|--------|
//! | `matmul` | `[r×k]`, `[k×c]` | `[r×c]` |
//! | `add`, `mul` | `[r×c]`, `[r×c]` | `[r×c]` |
//! | `add_bias` | `[r×c]`, `[1×c]` | `[r×c]` |
//! | `scale`, `relu`, `softmax_rows` | `[r×c]` | `[r×c]` |
//! | `masked_softmax_rows` | `[r×c]` + mask of `r·c` | `[r×c]` |
//! | `layernorm_rows` | `[r×c]`, `[1×c]`, `[1×c]` | `[r×c]` |
//! | `concat_rows` / `concat_cols` | parts sharing cols / rows | stacked |
//! | `slice_rows` / `slice_cols` | `[r×c]` | sub-block |
//! | `mean_rows` | `[r×c]` | `[1×c]` |
//! | `nll` | `[r×K]` + `r` labels | `[1×1]` |
//! | `reshape` | any | same element count |
//! | `gather_rows` | `[r×c]` + index list | `[len×c]` |
//! | `block_attention` | `q,k,v: [n·L×C]` | `[n·L×C]` |
//! | `pairwise_distance` | `[r×d]` + constant `[K×d]` | `[r×K]` |

use std::collections::HashMap;
use std::sync::Arc;

use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into};
use super::{NumericsError, ParameterStore, Tensor};
use crate::metric_space::DistanceMetric;

/// Variance floor inside `layernorm_rows`.
pub const LAYERNORM_EPS: f64 = 1e-10;

/// Additive surrogate for −∞ on masked logits.
const MASKED_LOGIT: f64 = -1e30;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    MeanRows(usize),
    Nll { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
    Reshape(usize),
    Transpose(usize),
    GatherRows(usize, Vec<usize>),
    Attention { q: usize, k: usize, v: usize, seq_len: usize, heads: usize, probs: Vec<f64> },
    Distance { z: usize, protos: Arc<Tensor>, metric: DistanceMetric },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
}

/// Records primitive operations so gradients can be replayed in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
    param_lookup: HashMap<String, usize>,
}

/// Gradient of a scalar with respect to every node of a tape.
pub struct Gradients {
    per_node: Vec<Option<Tensor>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    /// Gradient of `var`, or `None` when the output does not depend on it.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.per_node.get(var.0).and_then(Option::as_ref)
    }

    /// Writes parameter gradients into `store`; parameters that were never
    /// reached (or never placed on the tape) get zeros.
    pub fn write_into(&self, store: &mut ParameterStore) {
        store.zero_grads();
        for (name, idx) in &self.params {
            if let Some(g) = &self.per_node[*idx] {
                store.accumulate_grad(name, g);
            }
        }
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), NumericsError> {
    if a.shape() != b.shape() {
        return Err(NumericsError::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    Ok(())
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(), NumericsError> {
    if !t.is_matrix() {
        return Err(NumericsError::ShapeMismatch { op, left: t.shape().to_vec(), right: vec![] });
    }
    Ok(())
}

fn softmax_row(row: &[f64], mask: Option<&[bool]>, out: &mut [f64]) -> bool {
    let masked = |j: usize| mask.map(|m| !m[j]).unwrap_or(false);
    let mut max = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        let x = if masked(j) { x + MASKED_LOGIT } else { x };
        if x > max {
            max = x;
        }
    }
    let mut sum = 0.0;
    for (j, &x) in row.iter().enumerate() {
        if masked(j) {
            out[j] = 0.0;
        } else {
            let e = (x - max).exp();
            out[j] = e;
            sum += e;
        }
    }
    if sum == 0.0 {
        return false;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    true
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value: Arc::new(value), op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant or input leaf.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var, NumericsError> {
        self.push("leaf", value, Op::Leaf)
    }

    /// Places a named parameter on the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var, NumericsError> {
        if let Some(&idx) = self.param_lookup.get(name) {
            return Ok(Var(idx));
        }
        let value = store.shared(name).ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))?;
        self.nodes.push(Node { value, op: Op::Leaf });
        let idx = self.nodes.len() - 1;
        self.params.push((name.to_string(), idx));
        self.param_lookup.insert(name.to_string(), idx);
        Ok(Var(idx))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_matrix("matmul", ta)?;
        require_matrix("matmul", tb)?;
        if ta.cols() != tb.rows() {
            return Err(mismatch("matmul", ta, tb));
        }
        let (r, k, c) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; r * c];
        matmul_into(ta.data(), tb.data(), &mut out, r, k, c);
        let t = Tensor::matrix(r, c, out)?;
        self.push("matmul", t, Op::MatMul(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add", t, Op::Add(a.0, b.0))
    }

    /// Adds the `[1×c]` row `bias` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rows() != 1 || tb.cols() != tx.cols() {
            return Err(mismatch("add_bias", tx, tb));
        }
        let c = tx.cols();
        let b = tb.data();
        let data = tx.data().iter().enumerate().map(|(i, v)| v + b[i % c]).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("add_bias", t, Op::AddBias(x.0, bias.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul", t, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("scale", t, Op::Scale(a.0, factor))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("relu", t, Op::Relu(a.0))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = vec![0.0; ta.len()];
        for r in 0..ta.rows() {
            softmax_row(ta.row_slice(r), None, &mut out[r * c..(r + 1) * c]);
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        self.push("softmax_rows", t, Op::Softmax(a.0))
    }

    /// Row softmax where entries with `mask == false` get probability exactly 0.
    /// A row with every entry masked is an error.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        if mask.len() != ta.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "masked_softmax_rows",
                left: ta.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let c = ta.cols();
        let mut out = vec![0.0; ta.len()];
        for r in 0..ta.rows() {
            let row_mask = &mask[r * c..(r + 1) * c];
            if !softmax_row(ta.row_slice(r), Some(row_mask), &mut out[r * c..(r + 1) * c]) {
                return Err(NumericsError::AllMasked { row: r });
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        self.push("masked_softmax_rows", t, Op::Softmax(a.0))
    }

    /// Per-row standardization followed by the affine map `γ ⊙ x̂ + β`.
    pub fn layernorm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericsError> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = tx.cols();
        if tg.rows() != 1 || tg.cols() != c {
            return Err(mismatch("layernorm_rows", tx, tg));
        }
        if tb.rows() != 1 || tb.cols() != c {
            return Err(mismatch("layernorm_rows", tx, tb));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = tx.row_slice(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.push("layernorm_rows", t, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = self.value(*parts.first().ok_or(NumericsError::EmptyConcat)?);
        let c = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != c {
                return Err(mismatch("concat_rows", first, t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let t = Tensor::matrix(rows, c, data)?;
        self.push("concat_rows", t, Op::ConcatRows(parts.iter().map(|v| v.0).collect()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = self.value(*parts.first().ok_or(NumericsError::EmptyConcat)?);
        let r = first.rows();
        let mut total = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rows() != r {
                return Err(mismatch("concat_cols", first, t));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(i));
            }
        }
        let t = Tensor::matrix(r, total, data)?;
        self.push("concat_cols", t, Op::ConcatCols(parts.iter().map(|v| v.0).collect()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        if len == 0 || start + len > ta.rows() {
            return Err(NumericsError::SliceOutOfRange { shape: ta.shape().to_vec(), start, len });
        }
        let c = ta.cols();
        let data = ta.data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::matrix(len, c, data)?;
        self.push("slice_rows", t, Op::SliceRows(a.0, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        if len == 0 || start + len > ta.cols() {
            return Err(NumericsError::SliceOutOfRange { shape: ta.shape().to_vec(), start, len });
        }
        let mut data = Vec::with_capacity(ta.rows() * len);
        for r in 0..ta.rows() {
            data.extend_from_slice(&ta.row_slice(r)[start..start + len]);
        }
        let t = Tensor::matrix(ta.rows(), len, data)?;
        self.push("slice_cols", t, Op::SliceCols(a.0, start))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(ta.row_slice(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let t = Tensor::matrix(1, c, out)?;
        self.push("mean_rows", t, Op::MeanRows(a.0))
    }

    /// Mean negative log-softmax probability of `labels` (0-based) under row logits.
    pub fn nll(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NumericsError> {
        let tl = self.value(logits);
        let (r, k) = (tl.rows(), tl.cols());
        if labels.len() != r {
            return Err(NumericsError::ShapeMismatch {
                op: "nll",
                left: tl.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let mut probs = vec![0.0; r * k];
        let mut total = 0.0;
        for i in 0..r {
            let row = tl.row_slice(i);
            let y = labels[i];
            if y >= k {
                return Err(NumericsError::LabelOutOfRange { label: y, classes: k });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
        }
        let t = Tensor::scalar(total / r as f64);
        self.push("nll", t, Op::Nll { logits: logits.0, labels: labels.to_vec(), probs })
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        if rows * cols != ta.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                left: ta.shape().to_vec(),
                right: vec![rows, cols],
            });
        }
        let t = Tensor::matrix(rows, cols, ta.data().to_vec())?;
        self.push("reshape", t, Op::Reshape(a.0))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.value(a).transpose();
        self.push("transpose", t, Op::Transpose(a.0))
    }

    /// Output row `i` is row `index[i]` of `a`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= ta.rows() {
                return Err(NumericsError::SliceOutOfRange { shape: ta.shape().to_vec(), start: i, len: 1 });
            }
            data.extend_from_slice(ta.row_slice(i));
        }
        let t = Tensor::matrix(index.len(), c, data)?;
        self.push("gather_rows", t, Op::GatherRows(a.0, index.to_vec()))
    }

    /// Multi-head scaled dot-product attention applied independently to
    /// consecutive blocks of `seq_len` rows.
    ///
    /// Composition of `matmul`, `scale`, `masked_softmax_rows` and `matmul`
    /// per (block, head), fused so a minibatch is one tape node. `key_mask`
    /// has one entry per row; masked rows are never attended to.
    pub fn block_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        key_mask: &[bool],
    ) -> Result<Var, NumericsError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        check_same("block_attention", tq, tk)?;
        check_same("block_attention", tq, tv)?;
        let (rows, width) = (tq.rows(), tq.cols());
        if seq_len == 0 || rows % seq_len != 0 || heads == 0 || width % heads != 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "block_attention",
                left: tq.shape().to_vec(),
                right: vec![seq_len, heads],
            });
        }
        if key_mask.len() != rows {
            return Err(NumericsError::ShapeMismatch {
                op: "block_attention",
                left: tq.shape().to_vec(),
                right: vec![key_mask.len()],
            });
        }
        let blocks = rows / seq_len;
        let dh = width / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut probs = vec![0.0; blocks * heads * seq_len * seq_len];
        let mut out = vec![0.0; rows * width];
        let mut scores = vec![0.0; seq_len];
        for b in 0..blocks {
            let base = b * seq_len;
            let bmask = &key_mask[base..base + seq_len];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq_len {
                    let qi = &qd[(base + i) * width + off..(base + i) * width + off + dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kd[(base + j) * width + off..(base + j) * width + off + dh];
                        *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt;
                    }
                    let p_off = ((b * heads + h) * seq_len + i) * seq_len;
                    let prow = &mut probs[p_off..p_off + seq_len];
                    if !softmax_row(&scores, Some(bmask), prow) {
                        return Err(NumericsError::AllMasked { row: base + i });
                    }
                    let orow = &mut out[(base + i) * width + off..(base + i) * width + off + dh];
                    for (j, &p) in prow.iter().enumerate() {
                        if p == 0.0 {
                            continue;
                        }
                        let vj = &vd[(base + j) * width + off..(base + j) * width + off + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let t = Tensor::matrix(rows, width, out)?;
        self.push("block_attention", t, Op::Attention { q: q.0, k: k.0, v: v.0, seq_len, heads, probs })
    }

    /// Distances from every row of `z` to every row of the constant `protos`.
    pub fn pairwise_distance(
        &mut self,
        z: Var,
        protos: Arc<Tensor>,
        metric: DistanceMetric,
    ) -> Result<Var, NumericsError> {
        let tz = self.value(z);
        if protos.cols() != tz.cols() {
            return Err(mismatch("pairwise_distance", tz, &protos));
        }
        let (r, k) = (tz.rows(), protos.rows());
        let mut out = vec![0.0; r * k];
        for i in 0..r {
            for j in 0..k {
                out[i * k + j] = metric
                    .distance(tz.row_slice(i), protos.row_slice(j))
                    .map_err(|_| NumericsError::ZeroNorm { op: "pairwise_distance" })?;
            }
        }
        let t = Tensor::matrix(r, k, out)?;
        self.push("pairwise_distance", t, Op::Distance { z: z.0, protos, metric })
    }

    /// Reverse pass from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients, NumericsError> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(NumericsError::NotScalar { shape: out.shape().to_vec() });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(Tensor::new(out.shape().to_vec(), vec![1.0])?);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { per_node: grads, params: self.params.clone() })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), NumericsError> {
        fn acc(grads: &mut [Option<Tensor>], i: usize, delta: Tensor) {
            match &mut grads[i] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        }
        let val = |i: usize| -> &Tensor { &self.nodes[i].value };
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (r, k, c) = (ta.rows(), ta.cols(), tb.cols());
                let mut ga = vec![0.0; r * k];
                matmul_bt_into(gd, tb.data(), &mut ga, r, c, k);
                let mut gb = vec![0.0; k * c];
                matmul_at_into(ta.data(), gd, &mut gb, r, k, c);
                acc(grads, *a, Tensor::matrix(r, k, ga)?);
                acc(grads, *b, Tensor::matrix(k, c, gb)?);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddBias(x, b) => {
                let c = g.cols();
                let mut gb = vec![0.0; c];
                for (i, v) in gd.iter().enumerate() {
                    gb[i % c] += v;
                }
                acc(grads, *x, g.clone());
                acc(grads, *b, Tensor::matrix(1, c, gb)?);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = gd.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                let gb = gd.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                acc(grads, *a, Tensor::new(ta.shape().to_vec(), ga)?);
                acc(grads, *b, Tensor::new(tb.shape().to_vec(), gb)?);
            }
            Op::Scale(a, f) => {
                let ga = gd.iter().map(|x| x * f).collect();
                acc(grads, *a, Tensor::new(g.shape().to_vec(), ga)?);
            }
            Op::Relu(a) => {
                let ta = val(*a);
                let ga = gd.iter().zip(ta.data()).map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 }).collect();
                acc(grads, *a, Tensor::new(ta.shape().to_vec(), ga)?);
            }
            Op::Softmax(a) => {
                let p = &node.value;
                let c = p.cols();
                let mut ga = vec![0.0; p.len()];
                for r in 0..p.rows() {
                    let pr = p.row_slice(r);
                    let gr = &gd[r * c..(r + 1) * c];
                    let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        ga[r * c + j] = pr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *a, Tensor::new(p.shape().to_vec(), ga)?);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let tg = val(*gamma);
                let c = g.cols();
                let rows = g.rows();
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut gx = vec![0.0; rows * c];
                let mut dxhat = vec![0.0; c];
                for r in 0..rows {
                    let gr = &gd[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for j in 0..c {
                        ggamma[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                        dxhat[j] = gr[j] * tg.data()[j];
                        sum_d += dxhat[j];
                        sum_dh += dxhat[j] * hr[j];
                    }
                    let scale = inv_std[r] / c as f64;
                    for j in 0..c {
                        gx[r * c + j] = scale * (c as f64 * dxhat[j] - sum_d - hr[j] * sum_dh);
                    }
                }
                acc(grads, *x, Tensor::matrix(rows, c, gx)?);
                acc(grads, *gamma, Tensor::matrix(1, c, ggamma)?);
                acc(grads, *beta, Tensor::matrix(1, c, gbeta)?);
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut start = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    let piece = gd[start * c..(start + rows) * c].to_vec();
                    acc(grads, p, Tensor::matrix(rows, c, piece)?);
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut start = 0;
                for &p in parts {
                    let tp = val(p);
                    let (rows, c) = (tp.rows(), tp.cols());
                    let mut piece = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        piece.extend_from_slice(&gd[r * total + start..r * total + start + c]);
                    }
                    acc(grads, p, Tensor::matrix(rows, c, piece)?);
                    start += c;
                }
            }
            Op::SliceRows(a, start) => {
                let ta = val(*a);
                let c = ta.cols();
                let mut ga = vec![0.0; ta.len()];
                ga[start * c..start * c + gd.len()].copy_from_slice(gd);
                acc(grads, *a, Tensor::new(ta.shape().to_vec(), ga)?);
            }
            Op::SliceCols(a, start) => {
                let ta = val(*a);
                let c = ta.cols();
                let len = g.cols();
                let mut ga = vec![0.0; ta.len()];
                for r in 0..ta.rows() {
                    ga[r * c + start..r * c + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                acc(grads, *a, Tensor::new(ta.shape().to_vec(), ga)?);
            }
            Op::MeanRows(a) => {
                let ta = val(*a);
                let (r, c) = (ta.rows(), ta.cols());
                let mut ga = Vec::with_capacity(r * c);
                for _ in 0..r {
                    ga.extend(gd.iter().map(|v| v / r as f64));
                }
                acc(grads, *a, Tensor::matrix(r, c, ga)?);
            }
            Op::Nll { logits, labels, probs } => {
                let tl = val(*logits);
                let (r, k) = (tl.rows(), tl.cols());
                let scale = gd[0] / r as f64;
                let mut gl = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    gl[i * k + y] -= 1.0;
                }
                for v in &mut gl {
                    *v *= scale;
                }
                acc(grads, *logits, Tensor::matrix(r, k, gl)?);
            }
            Op::Reshape(a) => {
                let ta = val(*a);
                acc(grads, *a, Tensor::new(ta.shape().to_vec(), gd.to_vec())?);
            }
            Op::Transpose(a) => {
                let ta = val(*a);
                acc(grads, *a, Tensor::matrix(ta.cols(), ta.rows(), gd.to_vec())?.transpose());
            }
            Op::GatherRows(a, index) => {
                let ta = val(*a);
                let c = ta.cols();
                let mut ga = vec![0.0; ta.len()];
                for (i, &src) in index.iter().enumerate() {
                    for j in 0..c {
                        ga[src * c + j] += gd[i * c + j];
                    }
                }
                acc(grads, *a, Tensor::new(ta.shape().to_vec(), ga)?);
            }
            Op::Attention { q, k, v, seq_len, heads, probs } => {
                let (tq, tk, tv) = (val(*q), val(*k), val(*v));
                let (rows, width) = (tq.rows(), tq.cols());
                let (l, h_count) = (*seq_len, *heads);
                let dh = width / h_count;
                let inv_sqrt = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
                let mut gq = vec![0.0; rows * width];
                let mut gk = vec![0.0; rows * width];
                let mut gv = vec![0.0; rows * width];
                let mut dp = vec![0.0; l];
                for b in 0..rows / l {
                    let base = b * l;
                    for h in 0..h_count {
                        let off = h * dh;
                        for i in 0..l {
                            let p_off = ((b * h_count + h) * l + i) * l;
                            let prow = &probs[p_off..p_off + l];
                            let go = &gd[(base + i) * width + off..(base + i) * width + off + dh];
                            let mut dot = 0.0;
                            for j in 0..l {
                                let vj = &vd[(base + j) * width + off..(base + j) * width + off + dh];
                                dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                dot += prow[j] * dp[j];
                                if prow[j] != 0.0 {
                                    let gvj = &mut gv[(base + j) * width + off..(base + j) * width + off + dh];
                                    for (t, x) in gvj.iter_mut().zip(go) {
                                        *t += prow[j] * x;
                                    }
                                }
                            }
                            for j in 0..l {
                                let ds = prow[j] * (dp[j] - dot) * inv_sqrt;
                                if ds == 0.0 {
                                    continue;
                                }
                                for d in 0..dh {
                                    gq[(base + i) * width + off + d] += ds * kd[(base + j) * width + off + d];
                                    gk[(base + j) * width + off + d] += ds * qd[(base + i) * width + off + d];
                                }
                            }
                        }
                    }
                }
                acc(grads, *q, Tensor::matrix(rows, width, gq)?);
                acc(grads, *k, Tensor::matrix(rows, width, gk)?);
                acc(grads, *v, Tensor::matrix(rows, width, gv)?);
            }
            Op::Distance { z, protos, metric } => {
                let tz = val(*z);
                let (r, d) = (tz.rows(), tz.cols());
                let k = protos.rows();
                let mut gz = vec![0.0; r * d];
                for i in 0..r {
                    let zi = tz.row_slice(i);
                    let gzi = &mut gz[i * d..(i + 1) * d];
                    for j in 0..k {
                        let w = gd[i * k + j];
                        if w == 0.0 {
                            continue;
                        }
                        metric.accumulate_gradient(zi, protos.row_slice(j), w, gzi);
                    }
                }
                acc(grads, *z, Tensor::matrix(r, d, gz)?);
            }
        }
        Ok(())
    }
}
