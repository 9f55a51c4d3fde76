//! In-memory dump contents and serialization to an archive directory.
//!
//! The writer does not validate. Tests rely on this to produce archives
//! with deliberately broken invariants.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::dump_io::manifest::{
    DumpManifest, LayerRecord, ModalitySpan, NormKind, TensorRef, UnembeddingHead, MANIFEST_FILE,
    SUPPORTED_DTYPE,
};
use crate::error::Result;
use crate::tensor::Tensor;

pub const TENSOR_FILE: &str = "tensors.bin";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Tensors of one decoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockData {
    /// `[H, T, T]`, post-softmax.
    pub attn_probs: Tensor,
    /// `[T, d]`, normalized input to attention.
    pub attn_input: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DumpData {
    pub model_name: String,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub tokens: Vec<String>,
    pub spans: ModalitySpan,
    pub norm_kind: NormKind,
    pub caption: Option<String>,
    /// `L + 1` tensors of shape `[T, d]`; index 0 is the embedding output.
    pub hidden: Vec<Tensor>,
    /// `L` decoder blocks; `blocks[l - 1]` produced `hidden[l]`.
    pub blocks: Vec<BlockData>,
    /// `[V, d]`.
    pub unembedding: Tensor,
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    pub norm_eps: f64,
    pub vocab: Vec<String>,
}

impl DumpData {
    pub fn hidden_size(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// Writes `manifest.json`, `tensors.bin` and `vocab.txt` into `dir`
    /// (created if needed) and returns the manifest as it would be read back.
    pub fn write(&self, dir: &Path) -> Result<DumpManifest> {
        fs::create_dir_all(dir)?;
        let mut out = BufWriter::new(fs::File::create(dir.join(TENSOR_FILE))?);
        let mut offset = 0u64;
        let mut put = |t: &Tensor| -> Result<TensorRef> {
            for v in t.as_slice() {
                out.write_all(&v.to_le_bytes())?;
            }
            let r = TensorRef {
                path: TENSOR_FILE.to_string(),
                shape: t.shape().to_vec(),
                offset_bytes: offset,
            };
            offset += 4 * t.len() as u64;
            Ok(r)
        };

        let mut layers = Vec::with_capacity(self.hidden.len());
        for (l, hidden) in self.hidden.iter().enumerate() {
            let hidden = put(hidden)?;
            let record = match l.checked_sub(1).and_then(|b| self.blocks.get(b)) {
                Some(block) => LayerRecord {
                    hidden,
                    attn_probs: Some(put(&block.attn_probs)?),
                    attn_input: Some(put(&block.attn_input)?),
                    w_v: Some(put(&block.w_v)?),
                    b_v: Some(put(&block.b_v)?),
                    w_o: Some(put(&block.w_o)?),
                    b_o: Some(put(&block.b_o)?),
                },
                None => LayerRecord {
                    hidden,
                    attn_probs: None,
                    attn_input: None,
                    w_v: None,
                    b_v: None,
                    w_o: None,
                    b_o: None,
                },
            };
            layers.push(record);
        }
        let head = UnembeddingHead {
            unembedding: put(&self.unembedding)?,
            norm_gamma: put(&self.norm_gamma)?,
            norm_beta: put(&self.norm_beta)?,
            norm_eps: self.norm_eps,
            vocab_path: VOCAB_FILE.to_string(),
            vocab: self.vocab.clone(),
        };
        out.flush()?;
        drop(out);

        let mut vocab = String::new();
        for tok in &self.vocab {
            vocab.push_str(tok);
            vocab.push('\n');
        }
        fs::write(dir.join(VOCAB_FILE), vocab)?;

        let manifest = DumpManifest {
            model_name: self.model_name.clone(),
            num_layers: self.num_layers,
            hidden_size: self.hidden_size(),
            num_heads: self.num_heads,
            head_dim: self.head_dim,
            num_tokens: self.num_tokens(),
            dtype: SUPPORTED_DTYPE.to_string(),
            norm_kind: self.norm_kind,
            tokens: self.tokens.clone(),
            spans: self.spans,
            layers,
            head,
            caption: self.caption.clone(),
            root: dir.to_path_buf(),
        };
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        fs::write(dir.join(MANIFEST_FILE), json)?;
        Ok(manifest)
    }
}
