//! Layer-wise profiler for visual/text token interaction in decoder-only
//! multimodal language models, working from offline tensor dumps.
//!
//! * [`dump_io`] reads, validates and synthesizes dump archives.
//! * [`contextualization`] computes inter- and intra-modal cosine
//!   contextualization per layer and segments the curve into phases.
//! * [`norm_attention`] computes norm-based attention saliency.
//! * [`logit_lens`] decodes visual tokens through the unembedding head and
//!   scores caption recall.
//! * [`report`] orchestrates analyses over many dumps and emits CSV, JSON and
//!   SVG outputs.

pub mod contextualization;
pub mod dump_io;
pub mod error;
pub mod logit_lens;
pub mod norm_attention;
pub mod report;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
