//! Inference-time dynamic modality selection for incomplete multimodal
//! classification.
//!
//! A masked-fusion transformer is trained on synthetic multimodal data with
//! random modality subsets and a prototype-anchored auxiliary loss. At
//! inference, recovered payloads for missing modalities are accepted or
//! rejected one at a time by a calibrated task-relevance reward computed from
//! class prototypes in the latent space.

pub mod codec;
pub mod dataset;
pub mod fusion_model;
pub mod harness;
pub mod metric_space;
pub mod modality;
pub mod numerics;
pub mod recovery;
pub mod rng;
pub mod selection;
pub mod training;
