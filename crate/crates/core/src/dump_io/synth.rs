//! Deterministic synthetic archives with planted ground truth.
//!
//! Hidden states live in a seeded orthonormal frame whose vectors all have
//! zero mean, so layernorm and rmsnorm only rescale them. Per layer, every
//! visual token is `u + a_i` and every text token is
//! `cos φ·u + sin φ·w + b_j`, where `u ⟂ w` and the perturbations `a_i`,
//! `b_j` (norm `r`) live in mutually orthogonal subspaces. Then
//! `cos(v_i, w_j) = cos φ / (1 + r²)` exactly, which is solved for the
//! planted similarity. Within-modality similarity is at least `1 / (1 + r²)`.
//!
//! Visual perturbations double as LogitLens plants: each `a_i` points along a
//! word direction that the matching unembedding row reads out, and caption
//! words carry a larger negative offset along `u` so they only win top-1 when
//! planted.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dump_io::manifest::{DumpManifest, ModalitySpan, NormKind, TokenRange};
use crate::dump_io::writer::{BlockData, DumpData};
use crate::error::{Error, Result};
use crate::logit_lens::{content_words, Stoplist};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionSink {
    /// The first `tokens` positions receive the planted mass.
    pub tokens: usize,
    /// Fraction of every attention row moved onto the sink, per decoder block
    /// (length L).
    pub mass: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default = "default_model_name")]
    pub model_name: String,
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub num_tokens: usize,
    /// Minimum vocabulary size; padded with filler words.
    #[serde(default)]
    pub vocab_size: usize,
    pub visual: TokenRange,
    pub text: TokenRange,
    #[serde(default = "default_norm_kind")]
    pub norm_kind: NormKind,
    /// Inter-modal similarity per layer, length L + 1.
    pub planted_curve: Vec<f64>,
    /// Squared norm of the within-cluster perturbations relative to the
    /// cluster centre. Lowered per layer where the planted value requires it.
    #[serde(default = "default_spread")]
    pub cluster_spread: f64,
    #[serde(default)]
    pub caption: Option<String>,
    /// Per layer (length L + 1, or empty): how many visual tokens decode
    /// top-1 to distinct caption words.
    #[serde(default)]
    pub caption_plan: Vec<usize>,
    #[serde(default)]
    pub attention_sink: Option<AttentionSink>,
}

fn default_model_name() -> String {
    "synthetic".to_string()
}

fn default_norm_kind() -> NormKind {
    NormKind::Layernorm
}

fn default_spread() -> f64 {
    0.25
}

impl SynthSpec {
    /// Minimal spec with visual tokens first and text tokens after.
    pub fn new(
        num_layers: usize,
        num_tokens: usize,
        hidden_size: usize,
        num_heads: usize,
        visual_len: usize,
    ) -> Self {
        Self {
            model_name: default_model_name(),
            num_layers,
            hidden_size,
            num_heads,
            num_tokens,
            vocab_size: 0,
            visual: TokenRange::new(0, visual_len),
            text: TokenRange::new(visual_len, num_tokens),
            norm_kind: default_norm_kind(),
            planted_curve: vec![0.0; num_layers + 1],
            cluster_spread: default_spread(),
            caption: None,
            caption_plan: Vec::new(),
            attention_sink: None,
        }
    }

    pub fn with_curve(mut self, curve: Vec<f64>) -> Self {
        self.planted_curve = curve;
        self
    }
}

pub fn generate_synthetic_dump(
    spec: &SynthSpec,
    seed: u64,
    out_dir: &Path,
) -> Result<DumpManifest> {
    synthesize(spec, seed)?.write(out_dir)
}

/// In-memory version of [`generate_synthetic_dump`].
pub fn synthesize(spec: &SynthSpec, seed: u64) -> Result<DumpData> {
    let plan = Plan::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.hidden_size;
    let t = spec.num_tokens;

    let frame = zero_mean_frame(d, plan.directions_needed(), &mut rng);
    let (u, w) = (&frame[0], &frame[1]);
    let mut next = 2;
    let mut take = |n: usize| {
        let dirs = frame[next..next + n].to_vec();
        next += n;
        dirs
    };
    let caption_dirs = take(plan.planted_words);
    let filler_dirs = take(plan.visual_fillers);
    let text_dirs = take(plan.text_dirs);

    let mut hidden = Vec::with_capacity(spec.num_layers + 1);
    for (layer, &target) in spec.planted_curve.iter().enumerate() {
        let r2 = plan.spread_at(layer);
        let r = r2.sqrt();
        let cos_phi = (target * (1.0 + r2)).clamp(-1.0, 1.0);
        let sin_phi = (1.0 - cos_phi * cos_phi).max(0.0).sqrt();
        let planted = plan.planted_at(layer);

        let mut tensor = Tensor::zeros(vec![t, d]);
        for tok in 0..t {
            let row: Vec<f64> = if spec.visual.range().contains(&tok) {
                let k = tok - spec.visual.start;
                let dir = if k < planted {
                    Some(&caption_dirs[k])
                } else if filler_dirs.is_empty() {
                    None
                } else {
                    Some(&filler_dirs[(k - planted) % filler_dirs.len()])
                };
                (0..d)
                    .map(|c| u[c] + dir.map_or(0.0, |a| r * a[c]))
                    .collect()
            } else if spec.text.range().contains(&tok) {
                let j = tok - spec.text.start;
                let dir = (!text_dirs.is_empty()).then(|| &text_dirs[j % text_dirs.len()]);
                (0..d)
                    .map(|c| cos_phi * u[c] + sin_phi * w[c] + dir.map_or(0.0, |b| r * b[c]))
                    .collect()
            } else {
                (0..d)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            };
            let scale: f64 = rng.random_range(0.5..2.0);
            for (dst, v) in tensor.row_mut(tok).iter_mut().zip(row) {
                *dst = (scale * v) as f32;
            }
        }
        hidden.push(tensor);
    }

    let blocks = (1..=spec.num_layers)
        .map(|layer| synth_block(spec, layer, &mut rng))
        .collect();

    // Vocabulary: specials, fillers (the first `visual_fillers` carry
    // directions), then caption words.
    let mut vocab: Vec<String> = vec!["<unk>".into(), "<s>".into()];
    let fillers_needed = spec
        .vocab_size
        .saturating_sub(vocab.len() + plan.caption_words.len())
        .max(plan.visual_fillers);
    let mut filler_index = 0usize;
    while vocab.len() < 2 + fillers_needed {
        let word = filler_word(filler_index);
        filler_index += 1;
        if !plan.caption_words.contains(&word) {
            vocab.push(format!("\u{2581}{word}"));
        }
    }
    let first_caption_id = vocab.len();
    vocab.extend(plan.caption_words.iter().map(|w| format!("\u{2581}{w}")));

    let gain = plan.readout_gain();
    let mut unembedding = Tensor::zeros(vec![vocab.len(), d]);
    for id in 0..vocab.len() {
        let (dir, offset) = if id >= first_caption_id {
            let k = id - first_caption_id;
            (caption_dirs.get(k), 1.0 + 0.01 * k as f64)
        } else {
            let filler = id.checked_sub(2).filter(|&f| f < filler_dirs.len());
            (filler.map(|f| &filler_dirs[f]), 0.1 + 0.001 * id as f64)
        };
        for (c, dst) in unembedding.row_mut(id).iter_mut().enumerate() {
            let v = dir.map_or(0.0, |a| gain * a[c]) - offset * u[c];
            *dst = v as f32;
        }
    }

    let tokens = (0..t)
        .map(|i| {
            if spec.visual.range().contains(&i) {
                format!("<img_{}>", i - spec.visual.start)
            } else {
                format!("tok{i}")
            }
        })
        .collect();

    Ok(DumpData {
        model_name: spec.model_name.clone(),
        num_layers: spec.num_layers,
        num_heads: spec.num_heads,
        head_dim: d / spec.num_heads,
        tokens,
        spans: ModalitySpan {
            visual: spec.visual,
            text: spec.text,
        },
        norm_kind: spec.norm_kind,
        caption: spec.caption.clone(),
        hidden,
        blocks,
        unembedding,
        norm_gamma: Tensor::new(vec![d], vec![1.0; d])?,
        norm_beta: Tensor::zeros(vec![d]),
        norm_eps: match spec.norm_kind {
            NormKind::Layernorm => 1e-5,
            NormKind::Rmsnorm => 1e-6,
        },
        vocab,
    })
}

struct Plan<'a> {
    spec: &'a SynthSpec,
    caption_words: Vec<String>,
    /// Caption words that get a readout direction.
    planted_words: usize,
    visual_fillers: usize,
    text_dirs: usize,
}

impl<'a> Plan<'a> {
    fn new(spec: &'a SynthSpec) -> Result<Self> {
        let infeasible = |msg: String| Err(Error::InfeasibleSpec(msg));
        let (l, t, d, h) = (
            spec.num_layers,
            spec.num_tokens,
            spec.hidden_size,
            spec.num_heads,
        );
        if l < 1 || t < 2 {
            return infeasible(format!(
                "need num_layers >= 1 and num_tokens >= 2, got {l} and {t}"
            ));
        }
        if h == 0 || !d.is_multiple_of(h) {
            return infeasible(format!("hidden_size {d} is not divisible by num_heads {h}"));
        }
        let spans = ModalitySpan {
            visual: spec.visual,
            text: spec.text,
        };
        if let Err(e) = spans.check(t) {
            return infeasible(e);
        }
        if spec.planted_curve.len() != l + 1 {
            return infeasible(format!(
                "planted_curve has {} values, need {}",
                spec.planted_curve.len(),
                l + 1
            ));
        }
        if let Some(bad) = spec
            .planted_curve
            .iter()
            .find(|s| !s.is_finite() || s.abs() > 1.0)
        {
            return infeasible(format!("planted similarity {bad} is outside [-1, 1]"));
        }
        if !(spec.cluster_spread.is_finite() && spec.cluster_spread >= 0.0) {
            return infeasible(format!(
                "cluster_spread {} must be >= 0",
                spec.cluster_spread
            ));
        }
        if let Some(sink) = &spec.attention_sink {
            if sink.mass.len() != l || sink.tokens == 0 {
                return infeasible(
                    "attention_sink needs tokens >= 1 and one mass per block".into(),
                );
            }
            if sink.mass.iter().any(|m| !(0.0..=1.0).contains(m)) {
                return infeasible("attention_sink mass must lie in [0, 1]".into());
            }
        }

        let caption_words = match &spec.caption {
            Some(c) => content_words(c, &Stoplist::builtin()),
            None => Vec::new(),
        };
        if !spec.caption_plan.is_empty() {
            if spec.caption_plan.len() != l + 1 {
                return infeasible(format!(
                    "caption_plan has {} entries, need {}",
                    spec.caption_plan.len(),
                    l + 1
                ));
            }
            let most = spec.caption_plan.iter().copied().max().unwrap_or(0);
            if most > caption_words.len() || most > spec.visual.len() {
                return infeasible(format!(
                    "caption_plan plants {most} words but the caption has {} content words and \
                     there are {} visual tokens",
                    caption_words.len(),
                    spec.visual.len()
                ));
            }
        }
        let planted_words = spec.caption_plan.iter().copied().max().unwrap_or(0);

        let budget = d.saturating_sub(1);
        let wants_noise = spec.cluster_spread > 0.0 || planted_words > 0;
        let required = 2 + planted_words + if wants_noise { 2 } else { 0 };
        if budget < required {
            return infeasible(format!(
                "hidden_size {d} leaves {budget} zero-mean directions, {required} needed"
            ));
        }
        let (visual_fillers, text_dirs) = if wants_noise {
            let extra = budget - required;
            let vf = 1 + (spec.visual.len() - 1).min(extra / 2);
            let td = 1 + (spec.text.len() - 1).min(extra - (vf - 1));
            (vf, td)
        } else {
            (0, 0)
        };

        let plan = Self {
            spec,
            caption_words,
            planted_words,
            visual_fillers,
            text_dirs,
        };
        for layer in 0..=l {
            if plan.planted_at(layer) > 0 && plan.spread_at(layer) == 0.0 {
                return infeasible(format!(
                    "layer {layer} plants caption words but its similarity {} leaves no room \
                     for within-cluster spread",
                    spec.planted_curve[layer]
                ));
            }
        }
        Ok(plan)
    }

    fn directions_needed(&self) -> usize {
        2 + self.planted_words + self.visual_fillers + self.text_dirs
    }

    fn planted_at(&self, layer: usize) -> usize {
        self.spec.caption_plan.get(layer).copied().unwrap_or(0)
    }

    /// `r²` at `layer`, capped so `|s|·(1 + r²) ≤ 1`.
    fn spread_at(&self, layer: usize) -> f64 {
        let s = self.spec.planted_curve[layer].abs();
        let mut r2 = self.spec.cluster_spread;
        if r2 == 0.0 && self.planted_at(layer) > 0 {
            r2 = default_spread();
        }
        if s > 0.0 {
            r2 = r2.min(1.0 / s - 1.0);
        }
        r2.max(0.0)
    }

    /// Scale on caption/filler directions so a planted word beats every
    /// offset along `u`.
    fn readout_gain(&self) -> f64 {
        let smallest = (0..=self.spec.num_layers)
            .map(|l| self.spread_at(l).sqrt())
            .filter(|&r| r > 0.0)
            .fold(f64::INFINITY, f64::min);
        if smallest.is_finite() {
            4.0 / smallest
        } else {
            1.0
        }
    }
}

/// `count` orthonormal vectors in R^d, each orthogonal to the all-ones vector.
fn zero_mean_frame(d: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let ones = vec![1.0 / (d as f64).sqrt(); d];
    let mut basis: Vec<Vec<f64>> = vec![ones];
    while basis.len() < count + 1 {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        // two passes of Gram-Schmidt for numerical orthogonality
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    basis.split_off(1)
}

fn synth_block(spec: &SynthSpec, layer: usize, rng: &mut ChaCha8Rng) -> BlockData {
    let (t, d, h) = (spec.num_tokens, spec.hidden_size, spec.num_heads);
    let sink = spec
        .attention_sink
        .as_ref()
        .map(|s| (s.tokens, s.mass[layer - 1]));

    let mut probs = vec![0.0f32; h * t * t];
    for head in 0..h {
        for i in 0..t {
            let base: Vec<f64> = (0..=i).map(|_| rng.random_range(0.5..1.5)).collect();
            let total: f64 = base.iter().sum();
            let row = &mut probs[(head * t + i) * t..(head * t + i + 1) * t];
            let (sink_tokens, mass) = sink.map_or((1, 0.0), |(n, m)| (n.min(i + 1), m));
            for j in 0..=i {
                let mut p = (1.0 - mass) * base[j] / total;
                if j < sink_tokens {
                    p += mass / sink_tokens as f64;
                }
                row[j] = p as f32;
            }
        }
    }

    let mut gaussian = |shape: Vec<usize>, std: f64| {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| (std * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect();
        Tensor::new(shape, data).expect("shape matches data")
    };
    let w_std = 1.0 / (d as f64).sqrt();
    BlockData {
        attn_probs: Tensor::new(vec![h, t, t], probs).expect("shape matches data"),
        attn_input: gaussian(vec![t, d], 1.0),
        w_v: gaussian(vec![d, d], w_std),
        b_v: gaussian(vec![d], 0.1),
        w_o: gaussian(vec![d, d], w_std),
        b_o: gaussian(vec![d], 0.1),
    }
}

/// Alphabetic pseudo-words: "zaqa", "zaqb", ...
fn filler_word(mut index: usize) -> String {
    let mut suffix = Vec::new();
    loop {
        suffix.push((b'a' + (index % 26) as u8) as char);
        index /= 26;
        if index == 0 {
            break;
        }
    }
    suffix.reverse();
    format!("zaq{}", suffix.into_iter().collect::<String>())
}
