//! `manifest.json` schema and parsing.
//!
//! One archive describes one inference: the token table, the visual and
//! text spans, per-layer tensor references and the unembedding head. The
//! `layers` array has `num_layers + 1` entries. Entry 0 carries only the
//! embedding-output hidden state; entries `1..=num_layers` describe decoder
//! blocks and carry attention tensors as well.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUPPORTED_DTYPE: &str = "f32le";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Layernorm,
    Rmsnorm,
}

/// Half-open token index range, serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct TokenRange {
    pub start: usize,
    pub end: usize,
}

impl TokenRange {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn overlaps(&self, other: &TokenRange) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl From<[usize; 2]> for TokenRange {
    fn from([start, end]: [usize; 2]) -> Self {
        Self { start, end }
    }
}

impl From<TokenRange> for [usize; 2] {
    fn from(r: TokenRange) -> Self {
        [r.start, r.end]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpan {
    pub visual: TokenRange,
    pub text: TokenRange,
}

impl ModalitySpan {
    pub fn check(&self, num_tokens: usize) -> std::result::Result<(), String> {
        for (name, r) in [("visual", &self.visual), ("text", &self.text)] {
            if r.is_empty() {
                return Err(format!("{name} span [{}, {}) is empty", r.start, r.end));
            }
            if r.end > num_tokens {
                return Err(format!(
                    "{name} span [{}, {}) exceeds num_tokens {num_tokens}",
                    r.start, r.end
                ));
            }
        }
        if self.visual.overlaps(&self.text) {
            return Err("visual and text spans overlap".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRef {
    pub path: String,
    pub shape: Vec<usize>,
    #[serde(default)]
    pub offset_bytes: u64,
}

impl TensorRef {
    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        4 * self.num_elements() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub hidden: TensorRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attn_probs: Option<TensorRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attn_input: Option<TensorRef>,
    #[serde(rename = "W_V", default, skip_serializing_if = "Option::is_none")]
    pub w_v: Option<TensorRef>,
    #[serde(rename = "b_V", default, skip_serializing_if = "Option::is_none")]
    pub b_v: Option<TensorRef>,
    #[serde(rename = "W_O", default, skip_serializing_if = "Option::is_none")]
    pub w_o: Option<TensorRef>,
    #[serde(rename = "b_O", default, skip_serializing_if = "Option::is_none")]
    pub b_o: Option<TensorRef>,
}

impl LayerRecord {
    /// Attention-side references, present on decoder-block entries.
    pub fn attention(&self) -> Option<AttentionRefs<'_>> {
        Some(AttentionRefs {
            attn_probs: self.attn_probs.as_ref()?,
            attn_input: self.attn_input.as_ref()?,
            w_v: self.w_v.as_ref()?,
            b_v: self.b_v.as_ref()?,
            w_o: self.w_o.as_ref()?,
            b_o: self.b_o.as_ref()?,
        })
    }

    /// All references in this record with their manifest field names.
    pub fn refs(&self) -> Vec<(&'static str, &TensorRef)> {
        let mut out = vec![("hidden", &self.hidden)];
        for (name, r) in [
            ("attn_probs", &self.attn_probs),
            ("attn_input", &self.attn_input),
            ("W_V", &self.w_v),
            ("b_V", &self.b_v),
            ("W_O", &self.w_o),
            ("b_O", &self.b_o),
        ] {
            if let Some(r) = r {
                out.push((name, r));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionRefs<'a> {
    pub attn_probs: &'a TensorRef,
    pub attn_input: &'a TensorRef,
    pub w_v: &'a TensorRef,
    pub b_v: &'a TensorRef,
    pub w_o: &'a TensorRef,
    pub b_o: &'a TensorRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnembeddingHead {
    #[serde(rename = "U")]
    pub unembedding: TensorRef,
    pub norm_gamma: TensorRef,
    pub norm_beta: TensorRef,
    pub norm_eps: f64,
    pub vocab_path: String,
    /// Loaded from `vocab_path`; line i is vocab id i.
    #[serde(skip)]
    pub vocab: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpManifest {
    pub model_name: String,
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub num_tokens: usize,
    pub dtype: String,
    pub norm_kind: NormKind,
    pub tokens: Vec<String>,
    pub spans: ModalitySpan,
    pub layers: Vec<LayerRecord>,
    pub head: UnembeddingHead,
    #[serde(default)]
    pub caption: Option<String>,
    /// Directory the relative tensor paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DumpManifest {
    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn vocab_size(&self) -> usize {
        self.head.vocab.len()
    }

    /// Path of the manifest file itself.
    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    fn check_scalars(&self) -> Result<()> {
        let violation = |key: &str, detail: String| Error::SchemaViolation {
            key: key.to_string(),
            detail,
        };
        if self.num_layers < 1 {
            return Err(violation("num_layers", "must be >= 1".into()));
        }
        if self.num_tokens < 2 {
            return Err(violation("num_tokens", "must be >= 2".into()));
        }
        if self.num_heads == 0 || self.head_dim == 0 {
            return Err(violation(
                "num_heads",
                "heads and head_dim must be positive".into(),
            ));
        }
        if self.hidden_size != self.num_heads * self.head_dim {
            return Err(violation(
                "hidden_size",
                format!(
                    "{} != num_heads {} * head_dim {}",
                    self.hidden_size, self.num_heads, self.head_dim
                ),
            ));
        }
        if self.layers.len() != self.num_layers + 1 {
            return Err(violation(
                "layers",
                format!(
                    "expected {} entries (embedding + {} blocks), found {}",
                    self.num_layers + 1,
                    self.num_layers,
                    self.layers.len()
                ),
            ));
        }
        self.spans
            .check(self.num_tokens)
            .map_err(|detail| violation("spans", detail))?;
        Ok(())
    }
}

/// Accepts either the archive directory or the manifest file itself.
pub fn manifest_location(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DumpManifest> {
    let file = manifest_location(path.as_ref());
    let text = fs::read_to_string(&file).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(file.clone()),
        _ => Error::Io(e),
    })?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Error::SchemaViolation {
        key: "<root>".into(),
        detail: e.to_string(),
    })?;

    match value.get("dtype") {
        Some(Value::String(dtype)) if dtype == SUPPORTED_DTYPE => {}
        Some(Value::String(dtype)) => return Err(Error::UnsupportedDtype(dtype.clone())),
        Some(_) => {
            return Err(Error::SchemaViolation {
                key: "dtype".into(),
                detail: "must be a string".into(),
            })
        }
        None => {
            return Err(Error::SchemaViolation {
                key: "dtype".into(),
                detail: "missing field".into(),
            })
        }
    }

    let mut manifest: DumpManifest =
        serde_json::from_value(value).map_err(|e| schema_error(&e.to_string()))?;
    manifest.root = file
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    manifest.check_scalars()?;

    let vocab_file = manifest.resolve(&manifest.head.vocab_path);
    let vocab = fs::read_to_string(&vocab_file).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(vocab_file.clone()),
        _ => Error::Io(e),
    })?;
    manifest.head.vocab = vocab.lines().map(str::to_string).collect();
    Ok(manifest)
}

/// Maps a serde message onto the key it complains about.
fn schema_error(message: &str) -> Error {
    let key = ["missing field `", "unknown field `", "duplicate field `"]
        .iter()
        .find_map(|prefix| {
            let start = message.find(prefix)? + prefix.len();
            let len = message[start..].find('`')?;
            Some(message[start..start + len].to_string())
        })
        .unwrap_or_else(|| "<root>".to_string());
    Error::SchemaViolation {
        key,
        detail: message.to_string(),
    }
}
