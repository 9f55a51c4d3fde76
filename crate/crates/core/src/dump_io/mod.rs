//! The binary tensor-archive format: manifest schema, raw f32 reader,
//! validation, writer and synthetic generator.

mod manifest;
mod reader;
mod synth;
mod validate;
mod writer;

pub use manifest::{
    manifest_location, read_manifest, AttentionRefs, DumpManifest, LayerRecord, ModalitySpan,
    NormKind, TensorRef, TokenRange, UnembeddingHead, MANIFEST_FILE, SUPPORTED_DTYPE,
};
pub use reader::{load_tensor, load_tensor_unchecked};
pub use synth::{generate_synthetic_dump, synthesize, AttentionSink, SynthSpec};
pub use validate::{validate_dump, CheckEntry, ValidatedDump, ValidationReport, ROW_SUM_TOLERANCE};
pub use writer::{BlockData, DumpData, TENSOR_FILE, VOCAB_FILE};
