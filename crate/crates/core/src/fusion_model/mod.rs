//! Masked multimodal fusion network.
//!
//! Each modality is encoded by a two-layer perceptron into `L_m` tokens of
//! width `C`. The tokens of all `M` slots follow a learnable CLS token in a
//! fixed order; slots outside the active subset hold all-zero dummy tokens
//! and are masked out of attention both as keys and as queries. After `T`
//! pre-layernorm transformer blocks the CLS output (final layernorm) is the
//! representation `z`, read by a linear classifier and by a two-layer
//! projection head into the metric latent space.

mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointHeader};
pub(crate) use checkpoint::{decode_store, encode_store};

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::modality::ModalitySet;
use crate::numerics::{NumericsError, ParameterStore, Tape, Tensor, Var};
use crate::rng;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("empty modality subset")]
    EmptySubset,
    #[error("subset {subset} references modalities beyond the model's {modalities}")]
    SubsetOutOfRange { subset: ModalitySet, modalities: usize },
    #[error("modality {modality}: payload has {found} features, model expects {expected}")]
    PayloadLength { modality: usize, expected: usize, found: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature count of each modality.
    pub input_dims: Vec<usize>,
    /// Tokens produced per modality (`L_m`).
    pub token_lens: Vec<usize>,
    pub encoder_hidden: usize,
    /// Fusion width `C`.
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub projection_hidden: usize,
    pub latent_dim: usize,
    pub classes: usize,
    /// Temperature of the auxiliary prototype loss.
    pub temperature: f64,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults for `dims.len()` modalities and `classes` classes.
    pub fn small(dims: &[usize], classes: usize) -> Self {
        Self {
            input_dims: dims.to_vec(),
            token_lens: vec![2; dims.len()],
            encoder_hidden: 32,
            width: 16,
            layers: 1,
            heads: 2,
            mlp_hidden: 32,
            projection_hidden: 16,
            latent_dim: 8,
            classes,
            temperature: 0.1,
            init_seed: 0,
        }
    }

    pub fn num_modalities(&self) -> usize {
        self.input_dims.len()
    }

    /// CLS plus every modality slot.
    pub fn seq_len(&self) -> usize {
        1 + self.token_lens.iter().sum::<usize>()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        let m = self.input_dims.len();
        if m == 0 || m > crate::modality::MAX_MODALITIES {
            return bad(format!("{m} modalities"));
        }
        if self.token_lens.len() != m {
            return bad(format!("{} token lengths for {m} modalities", self.token_lens.len()));
        }
        if self.input_dims.contains(&0) || self.token_lens.contains(&0) {
            return bad("zero-sized modality".into());
        }
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.layers == 0 {
            return bad("need at least one transformer layer".into());
        }
        if self.latent_dim < 2 {
            return bad(format!("latent dim {} < 2", self.latent_dim));
        }
        if self.classes < 2 {
            return bad(format!("{} classes", self.classes));
        }
        if self.encoder_hidden == 0 || self.mlp_hidden == 0 || self.projection_hidden == 0 {
            return bad("zero hidden width".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {}", self.temperature));
        }
        Ok(())
    }
}

/// Outputs of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput {
    /// CLS representation (width `C`).
    pub z: Vec<f64>,
    pub logits: Vec<f64>,
    /// `projection(z)`.
    pub latent: Vec<f64>,
}

impl FusionOutput {
    pub fn prediction(&self) -> usize {
        predict(&self.logits)
    }
}

/// Argmax of `logits` as a 1-based class; ties go to the lowest class.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = k;
        }
    }
    best + 1
}

/// Token sequence of one sample and its attention mask.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence {
    /// `[seq_len × C]`, CLS first.
    pub tokens: Tensor,
    /// `true` where the position may attend and be attended to.
    pub mask: Vec<bool>,
}

/// One row of a batched forward: all `M` payload slots and the active subset.
/// Payloads outside `subset` are never read.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub payloads: &'a [Vec<f64>],
    pub subset: ModalitySet,
}

/// Tape handles of a batched forward.
#[derive(Clone, Copy, Debug)]
pub struct BatchGraph {
    pub z: Var,
    pub logits: Var,
    pub latent: Var,
}

const INFERENCE_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    config: ModelConfig,
    params: ParameterStore,
}

fn xavier(rng: &mut rng::Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::matrix(rows, cols, data).expect("positive shape")
}

impl FusionModel {
    /// Fresh model with seeded Xavier-uniform weights, zero biases and unit
    /// layernorm gains.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = rng::stream(config.init_seed, "model/init");
        let mut p = ParameterStore::new();
        let c = config.width;
        for (m, (&d, &l)) in config.input_dims.iter().zip(&config.token_lens).enumerate() {
            p.insert(format!("enc.{m}.w1"), xavier(&mut rng, d, config.encoder_hidden))?;
            p.insert(format!("enc.{m}.b1"), Tensor::zeros(1, config.encoder_hidden))?;
            p.insert(format!("enc.{m}.w2"), xavier(&mut rng, config.encoder_hidden, l * c))?;
            p.insert(format!("enc.{m}.b2"), Tensor::zeros(1, l * c))?;
        }
        let cls = (0..c).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        p.insert("cls", Tensor::row(cls))?;
        for l in 0..config.layers {
            for ln in ["ln1", "ln2"] {
                p.insert(format!("layer.{l}.{ln}.g"), Tensor::filled(1, c, 1.0))?;
                p.insert(format!("layer.{l}.{ln}.b"), Tensor::zeros(1, c))?;
            }
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(format!("layer.{l}.attn.{w}"), xavier(&mut rng, c, c))?;
                p.insert(format!("layer.{l}.attn.b{}", &w[1..]), Tensor::zeros(1, c))?;
            }
            p.insert(format!("layer.{l}.mlp.w1"), xavier(&mut rng, c, config.mlp_hidden))?;
            p.insert(format!("layer.{l}.mlp.b1"), Tensor::zeros(1, config.mlp_hidden))?;
            p.insert(format!("layer.{l}.mlp.w2"), xavier(&mut rng, config.mlp_hidden, c))?;
            p.insert(format!("layer.{l}.mlp.b2"), Tensor::zeros(1, c))?;
        }
        p.insert("final_ln.g", Tensor::filled(1, c, 1.0))?;
        p.insert("final_ln.b", Tensor::zeros(1, c))?;
        p.insert("head.w", xavier(&mut rng, c, config.classes))?;
        p.insert("head.b", Tensor::zeros(1, config.classes))?;
        p.insert("proj.w1", xavier(&mut rng, c, config.projection_hidden))?;
        p.insert("proj.b1", Tensor::zeros(1, config.projection_hidden))?;
        p.insert("proj.w2", xavier(&mut rng, config.projection_hidden, config.latent_dim))?;
        p.insert("proj.b2", Tensor::zeros(1, config.latent_dim))?;
        Ok(Self { config, params: p })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParameterStore) -> Result<Self, ModelError> {
        let template = Self::new(config.clone())?;
        let expected: Vec<(&str, &[usize])> = template.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let found: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != found {
            return Err(ModelError::Checkpoint("parameters do not match the model config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn num_modalities(&self) -> usize {
        self.config.num_modalities()
    }

    pub fn num_classes(&self) -> usize {
        self.config.classes
    }

    /// SHA-256 prefix over the checkpoint encoding; identifies a trained model.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(encode_checkpoint(self));
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn check_item(&self, item: &BatchItem<'_>) -> Result<(), ModelError> {
        let m = self.num_modalities();
        if item.subset.is_empty() {
            return Err(ModelError::EmptySubset);
        }
        if !item.subset.is_subset_of(ModalitySet::full(m)) {
            return Err(ModelError::SubsetOutOfRange { subset: item.subset, modalities: m });
        }
        for mi in item.subset.iter() {
            let found = item.payloads.get(mi).map(Vec::len).unwrap_or(0);
            if found != self.config.input_dims[mi] {
                return Err(ModelError::PayloadLength { modality: mi, expected: self.config.input_dims[mi], found });
            }
        }
        Ok(())
    }

    /// Builds the `[n·seq_len × C]` token sequence on `tape`; returns it with
    /// the per-row attention mask.
    fn sequence(&self, tape: &mut Tape, items: &[BatchItem<'_>]) -> Result<(Var, Vec<bool>), ModelError> {
        for it in items {
            self.check_item(it)?;
        }
        let cfg = &self.config;
        let n = items.len();
        let c = cfg.width;
        let p = &self.params;
        let mut parts = vec![tape.param(p, "cls")?];
        let mut offsets = Vec::with_capacity(cfg.num_modalities());
        let mut next = 1;
        for (m, (&d, &l)) in cfg.input_dims.iter().zip(&cfg.token_lens).enumerate() {
            let mut x = Vec::with_capacity(n * d);
            let mut keep = Vec::with_capacity(n * l * c);
            for it in items {
                let on = it.subset.contains(m);
                if on {
                    x.extend_from_slice(&it.payloads[m]);
                } else {
                    x.extend(std::iter::repeat_n(0.0, d));
                }
                keep.extend(std::iter::repeat_n(if on { 1.0 } else { 0.0 }, l * c));
            }
            let x = tape.leaf(Tensor::matrix(n, d, x)?)?;
            let w1 = tape.param(p, &format!("enc.{m}.w1"))?;
            let b1 = tape.param(p, &format!("enc.{m}.b1"))?;
            let w2 = tape.param(p, &format!("enc.{m}.w2"))?;
            let b2 = tape.param(p, &format!("enc.{m}.b2"))?;
            let h = tape.matmul(x, w1)?;
            let h = tape.add_bias(h, b1)?;
            let h = tape.relu(h)?;
            let e = tape.matmul(h, w2)?;
            let e = tape.add_bias(e, b2)?;
            let keep = tape.leaf(Tensor::matrix(n, l * c, keep)?)?;
            let e = tape.mul(e, keep)?;
            parts.push(tape.reshape(e, n * l, c)?);
            offsets.push(next);
            next += n * l;
        }
        let all = tape.concat_rows(&parts)?;
        let seq = cfg.seq_len();
        let mut index = Vec::with_capacity(n * seq);
        let mut mask = Vec::with_capacity(n * seq);
        for (i, it) in items.iter().enumerate() {
            index.push(0);
            mask.push(true);
            for (m, &l) in cfg.token_lens.iter().enumerate() {
                let on = it.subset.contains(m);
                for t in 0..l {
                    index.push(offsets[m] + i * l + t);
                    mask.push(on);
                }
            }
        }
        Ok((tape.gather_rows(all, &index)?, mask))
    }

    fn affine(&self, tape: &mut Tape, x: Var, w: &str, b: &str) -> Result<Var, ModelError> {
        let w = tape.param(&self.params, w)?;
        let b = tape.param(&self.params, b)?;
        let y = tape.matmul(x, w)?;
        Ok(tape.add_bias(y, b)?)
    }

    fn layernorm(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let g = tape.param(&self.params, &format!("{prefix}.g"))?;
        let b = tape.param(&self.params, &format!("{prefix}.b"))?;
        Ok(tape.layernorm_rows(x, g, b)?)
    }

    /// Records a batched forward pass on `tape`.
    pub fn build_graph(&self, tape: &mut Tape, items: &[BatchItem<'_>]) -> Result<BatchGraph, ModelError> {
        if items.is_empty() {
            return Err(ModelError::EmptySubset);
        }
        let cfg = &self.config;
        let n = items.len();
        let seq = cfg.seq_len();
        let (mut x, mask) = self.sequence(tape, items)?;
        let keep: Vec<f64> =
            mask.iter().flat_map(|&on| std::iter::repeat_n(if on { 1.0 } else { 0.0 }, cfg.width)).collect();
        let keep = tape.leaf(Tensor::matrix(n * seq, cfg.width, keep)?)?;
        for l in 0..cfg.layers {
            let h = self.layernorm(tape, x, &format!("layer.{l}.ln1"))?;
            let q = self.affine(tape, h, &format!("layer.{l}.attn.wq"), &format!("layer.{l}.attn.bq"))?;
            let k = self.affine(tape, h, &format!("layer.{l}.attn.wk"), &format!("layer.{l}.attn.bk"))?;
            let v = self.affine(tape, h, &format!("layer.{l}.attn.wv"), &format!("layer.{l}.attn.bv"))?;
            let a = tape.block_attention(q, k, v, seq, cfg.heads, &mask)?;
            let o = self.affine(tape, a, &format!("layer.{l}.attn.wo"), &format!("layer.{l}.attn.bo"))?;
            x = tape.add(x, o)?;
            x = tape.mul(x, keep)?;

            let h = self.layernorm(tape, x, &format!("layer.{l}.ln2"))?;
            let f = self.affine(tape, h, &format!("layer.{l}.mlp.w1"), &format!("layer.{l}.mlp.b1"))?;
            let f = tape.relu(f)?;
            let f = self.affine(tape, f, &format!("layer.{l}.mlp.w2"), &format!("layer.{l}.mlp.b2"))?;
            x = tape.add(x, f)?;
            x = tape.mul(x, keep)?;
        }
        let cls_rows: Vec<usize> = (0..n).map(|i| i * seq).collect();
        let cls = tape.gather_rows(x, &cls_rows)?;
        let z = self.layernorm(tape, cls, "final_ln")?;
        let logits = self.affine(tape, z, "head.w", "head.b")?;
        let hp = self.affine(tape, z, "proj.w1", "proj.b1")?;
        let hp = tape.relu(hp)?;
        let latent = self.affine(tape, hp, "proj.w2", "proj.b2")?;
        Ok(BatchGraph { z, logits, latent })
    }

    /// Token sequence and mask for one sample under `subset`.
    pub fn encode(&self, payloads: &[Vec<f64>], subset: ModalitySet) -> Result<EncodedSequence, ModelError> {
        let mut tape = Tape::new();
        let (seq, mask) = self.sequence(&mut tape, &[BatchItem { payloads, subset }])?;
        Ok(EncodedSequence { tokens: tape.value(seq).clone(), mask })
    }

    pub fn forward(&self, payloads: &[Vec<f64>], subset: ModalitySet) -> Result<FusionOutput, ModelError> {
        let mut out = self.forward_chunk(&[BatchItem { payloads, subset }])?;
        Ok(out.pop().expect("one item"))
    }

    fn forward_chunk(&self, items: &[BatchItem<'_>]) -> Result<Vec<FusionOutput>, ModelError> {
        let mut tape = Tape::new();
        let g = self.build_graph(&mut tape, items)?;
        let (z, logits, latent) = (tape.value(g.z), tape.value(g.logits), tape.value(g.latent));
        Ok((0..items.len())
            .map(|i| FusionOutput {
                z: z.row_slice(i).to_vec(),
                logits: logits.row_slice(i).to_vec(),
                latent: latent.row_slice(i).to_vec(),
            })
            .collect())
    }

    /// Forward over many items; chunks run in parallel, results keep input order.
    pub fn forward_many(&self, items: &[BatchItem<'_>]) -> Result<Vec<FusionOutput>, ModelError> {
        let chunks: Vec<Result<Vec<FusionOutput>, ModelError>> =
            items.par_chunks(INFERENCE_CHUNK).map(|chunk| self.forward_chunk(chunk)).collect();
        let mut out = Vec::with_capacity(items.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
