//! Archive validation.
//!
//! Every analysis takes a [`ValidatedDump`], which can only be obtained
//! from a manifest whose [`ValidationReport`] is clean.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::dump_io::manifest::{read_manifest, DumpManifest, TensorRef};
use crate::dump_io::reader::{check_extent, load_tensor, load_tensor_unchecked};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row sums of attention probabilities must be within this of 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// Failing rows reported per (layer, check) before summarizing the rest.
const MAX_ROW_FAILURES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckEntry {
    pub check: String,
    pub subject: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl fmt::Display for CheckEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.subject.is_empty() {
            write!(f, "{}", self.check)
        } else {
            write!(f, "{} {}", self.check, self.subject)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub dump: PathBuf,
    pub entries: Vec<CheckEntry>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.entries.iter().all(|e| e.ok)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckEntry> {
        self.entries.iter().filter(|e| !e.ok)
    }

    fn push(
        &mut self,
        check: &str,
        subject: impl Into<String>,
        ok: bool,
        detail: impl Into<String>,
    ) {
        self.entries.push(CheckEntry {
            check: check.to_string(),
            subject: subject.into(),
            ok,
            detail: detail.into(),
        });
    }

    fn summary(&self) -> String {
        let failures: Vec<String> = self
            .failures()
            .map(|e| {
                if e.detail.is_empty() {
                    e.to_string()
                } else {
                    format!("{e} ({})", e.detail)
                }
            })
            .collect();
        failures.join("; ")
    }
}

pub fn validate_dump(manifest: &DumpManifest) -> ValidationReport {
    let mut report = ValidationReport {
        dump: manifest.root.clone(),
        entries: Vec::new(),
    };
    let (l_count, t, d, h) = (
        manifest.num_layers,
        manifest.num_tokens,
        manifest.hidden_size,
        manifest.num_heads,
    );

    let geometry_ok = l_count >= 1
        && t >= 2
        && h > 0
        && d == h * manifest.head_dim
        && manifest.layers.len() == l_count + 1;
    report.push(
        "geometry",
        "",
        geometry_ok,
        if geometry_ok {
            String::new()
        } else {
            format!(
                "L={l_count} T={t} d={d} H={h} d_h={} layers={}",
                manifest.head_dim,
                manifest.layers.len()
            )
        },
    );
    match manifest.spans.check(t) {
        Ok(()) => report.push("spans", "", true, ""),
        Err(detail) => report.push("spans", "", false, detail),
    }
    let tokens_ok = manifest.tokens.len() == t;
    report.push(
        "tokens",
        "",
        tokens_ok,
        if tokens_ok {
            String::new()
        } else {
            format!("{} token strings for T={t}", manifest.tokens.len())
        },
    );

    for (l, layer) in manifest.layers.iter().enumerate() {
        check_tensor(
            &mut report,
            manifest,
            &format!("layers[{l}].hidden"),
            &layer.hidden,
            &[t, d],
        );
        if l == 0 {
            continue;
        }
        let Some(attn) = layer.attention() else {
            report.push(
                "attention-present",
                format!("layer {l}"),
                false,
                "decoder block entries need attn_probs, attn_input, W_V, b_V, W_O, b_O",
            );
            continue;
        };
        report.push("attention-present", format!("layer {l}"), true, "");
        let probs = check_tensor(
            &mut report,
            manifest,
            &format!("layers[{l}].attn_probs"),
            attn.attn_probs,
            &[h, t, t],
        );
        check_tensor(
            &mut report,
            manifest,
            &format!("layers[{l}].attn_input"),
            attn.attn_input,
            &[t, d],
        );
        check_tensor(
            &mut report,
            manifest,
            &format!("layers[{l}].W_V"),
            attn.w_v,
            &[d, d],
        );
        check_tensor(
            &mut report,
            manifest,
            &format!("layers[{l}].b_V"),
            attn.b_v,
            &[d],
        );
        check_tensor(
            &mut report,
            manifest,
            &format!("layers[{l}].W_O"),
            attn.w_o,
            &[d, d],
        );
        check_tensor(
            &mut report,
            manifest,
            &format!("layers[{l}].b_O"),
            attn.b_o,
            &[d],
        );
        if let Some(probs) = probs {
            check_attention(&mut report, l, &probs);
        }
    }

    let v = manifest.vocab_size();
    check_tensor(
        &mut report,
        manifest,
        "head.U",
        &manifest.head.unembedding,
        &[v, d],
    );
    check_tensor(
        &mut report,
        manifest,
        "head.norm_gamma",
        &manifest.head.norm_gamma,
        &[d],
    );
    check_tensor(
        &mut report,
        manifest,
        "head.norm_beta",
        &manifest.head.norm_beta,
        &[d],
    );
    let vocab_ok = v >= 2 && manifest.head.unembedding.shape.first() == Some(&v);
    report.push(
        "vocab",
        "",
        vocab_ok,
        if vocab_ok {
            String::new()
        } else {
            format!(
                "vocab has {v} entries, U shape {:?}",
                manifest.head.unembedding.shape
            )
        },
    );
    let eps_ok = manifest.head.norm_eps.is_finite() && manifest.head.norm_eps >= 0.0;
    report.push(
        "norm_eps",
        "",
        eps_ok,
        if eps_ok {
            ""
        } else {
            "must be finite and >= 0"
        },
    );
    report
}

/// Shape, extent and finiteness of one tensor. Returns it when all three pass
/// so callers can run content checks.
fn check_tensor(
    report: &mut ValidationReport,
    manifest: &DumpManifest,
    name: &str,
    tensor: &TensorRef,
    expected: &[usize],
) -> Option<Tensor> {
    let shape_ok = tensor.shape == expected;
    report.push(
        "shape",
        name,
        shape_ok,
        if shape_ok {
            String::new()
        } else {
            format!("expected {expected:?}, found {:?}", tensor.shape)
        },
    );
    if let Err(e) = check_extent(&manifest.root, tensor) {
        report.push("file-extent", name, false, e.to_string());
        return None;
    }
    report.push("file-extent", name, true, "");
    let loaded = match load_tensor_unchecked(&manifest.root, tensor) {
        Ok(t) => t,
        Err(e) => {
            report.push("readable", name, false, e.to_string());
            return None;
        }
    };
    match loaded.first_non_finite() {
        Some(i) => {
            report.push(
                "finiteness",
                name,
                false,
                format!("element {i} is {}", loaded.as_slice()[i]),
            );
            None
        }
        None => {
            report.push("finiteness", name, true, "");
            shape_ok.then_some(loaded)
        }
    }
}

fn check_attention(report: &mut ValidationReport, layer: usize, probs: &Tensor) {
    let (heads, t) = (probs.shape()[0], probs.shape()[1]);
    let mut causal_failures = 0usize;
    let mut sum_failures = 0usize;
    for h in 0..heads {
        for i in 0..t {
            let row = &probs.as_slice()[(h * t + i) * t..(h * t + i + 1) * t];
            if let Some(j) = row[i + 1..].iter().position(|&p| p != 0.0) {
                causal_failures += 1;
                if causal_failures <= MAX_ROW_FAILURES {
                    report.push(
                        "causal-mask",
                        format!("layer {layer} head {h} row {i}"),
                        false,
                        format!("entry {} = {}", i + 1 + j, row[i + 1 + j]),
                    );
                }
            }
            let sum: f64 = row.iter().map(|&p| p as f64).sum();
            let negative = row.iter().any(|&p| p < 0.0);
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE || negative {
                sum_failures += 1;
                if sum_failures <= MAX_ROW_FAILURES {
                    report.push(
                        "attn_probs row-sum",
                        format!("layer {layer} head {h} row {i}"),
                        false,
                        if negative {
                            format!("sum {sum:.6}, negative entries")
                        } else {
                            format!("sum {sum:.6}")
                        },
                    );
                }
            }
        }
    }
    for (check, failures) in [
        ("causal-mask", causal_failures),
        ("attn_probs row-sum", sum_failures),
    ] {
        if failures == 0 {
            report.push(check, format!("layer {layer}"), true, "");
        } else if failures > MAX_ROW_FAILURES {
            report.push(
                check,
                format!("layer {layer}"),
                false,
                format!("{} further rows fail", failures - MAX_ROW_FAILURES),
            );
        }
    }
}

/// A manifest whose validation passed. Loaders on this type still return
/// `Result` because the files may change underneath us.
#[derive(Debug, Clone)]
pub struct ValidatedDump {
    manifest: DumpManifest,
}

impl ValidatedDump {
    pub fn new(manifest: DumpManifest) -> Result<Self> {
        let report = validate_dump(&manifest);
        if report.ok() {
            Ok(Self { manifest })
        } else {
            Err(Error::ValidationFailed {
                path: manifest.root.clone(),
                failures: report.summary(),
            })
        }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(read_manifest(path)?)
    }

    pub fn manifest(&self) -> &DumpManifest {
        &self.manifest
    }

    pub fn num_layers(&self) -> usize {
        self.manifest.num_layers
    }

    pub fn num_tokens(&self) -> usize {
        self.manifest.num_tokens
    }

    pub fn load(&self, tensor: &TensorRef) -> Result<Tensor> {
        load_tensor(&self.manifest.root, tensor)
    }

    /// Hidden states `[T, d]` after block `layer` (0 = embeddings).
    pub fn hidden(&self, layer: usize) -> Result<Tensor> {
        self.load(&self.manifest.layers[layer].hidden)
    }

    /// Attention-side tensors of decoder block `layer` (1-based).
    pub fn block(&self, layer: usize) -> Result<crate::dump_io::BlockData> {
        let attn = self.manifest.layers[layer]
            .attention()
            .expect("validated decoder block has attention refs");
        Ok(crate::dump_io::BlockData {
            attn_probs: self.load(attn.attn_probs)?,
            attn_input: self.load(attn.attn_input)?,
            w_v: self.load(attn.w_v)?,
            b_v: self.load(attn.b_v)?,
            w_o: self.load(attn.w_o)?,
            b_o: self.load(attn.b_o)?,
        })
    }

    pub fn load_head(&self) -> Result<crate::logit_lens::LoadedHead> {
        let head = &self.manifest.head;
        Ok(crate::logit_lens::LoadedHead {
            unembedding: self.load(&head.unembedding)?,
            gamma: self.load(&head.norm_gamma)?,
            beta: self.load(&head.norm_beta)?,
            eps: head.norm_eps,
            norm_kind: self.manifest.norm_kind,
            vocab: head.vocab.clone(),
        })
    }
}
