//! Naive reference implementations used as test oracles, plus random
//! fixture builders. Nothing here calls into the library's math.
#![allow(dead_code, clippy::needless_range_loop)]

use mmdyn_core::dump_io::{BlockData, DumpData, ModalitySpan, NormKind, TokenRange};
use mmdyn_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f32>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect()
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for i in 0..a.len() {
        dot += a[i] as f64 * b[i] as f64;
        na += a[i] as f64 * a[i] as f64;
        nb += b[i] as f64 * b[i] as f64;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Mean pairwise cosine across two row sets.
pub fn inter(visual: &[Vec<f32>], text: &[Vec<f32>]) -> f64 {
    let mut total = 0.0;
    for v in visual {
        for w in text {
            total += cosine(v, w);
        }
    }
    total / (visual.len() * text.len()) as f64
}

/// Mean cosine over ordered distinct pairs (equal to the unordered mean).
pub fn intra(rows: &[Vec<f32>]) -> f64 {
    let k = rows.len();
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                total += cosine(&rows[i], &rows[j]);
            }
        }
    }
    total / (k * (k - 1)) as f64
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f32>> {
    t.rows().map(|r| r.to_vec()).collect()
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for r in 0..k {
                out[i][j] += a[i][r] * b[r][j];
            }
        }
    }
    out
}

fn to_f64(t: &Tensor) -> Vec<Vec<f64>> {
    t.rows()
        .map(|r| r.iter().map(|&x| x as f64).collect())
        .collect()
}

/// Head transform via full matrices: compute the whole value projection,
/// zero every column outside the head's slice, multiply by the full W_O.
pub fn head_transform(
    x: &Tensor,
    w_v: &Tensor,
    b_v: &Tensor,
    w_o: &Tensor,
    heads: usize,
    head: usize,
) -> Vec<Vec<f64>> {
    let d = x.row_len();
    let dh = d / heads;
    let mut value = matmul(&to_f64(x), &to_f64(w_v));
    for row in value.iter_mut() {
        for c in 0..d {
            row[c] += b_v.as_slice()[c] as f64;
            if c / dh != head {
                row[c] = 0.0;
            }
        }
    }
    matmul(&value, &to_f64(w_o))
}

/// `‖Σ_h α^h[i,j] f^h(x_j)‖` for every key j, one pair at a time.
pub fn saliency(block: &BlockData, heads: usize, query: usize) -> Vec<f64> {
    let t = block.attn_input.num_rows();
    let d = block.attn_input.row_len();
    let transforms: Vec<Vec<Vec<f64>>> = (0..heads)
        .map(|h| {
            head_transform(
                &block.attn_input,
                &block.w_v,
                &block.b_v,
                &block.w_o,
                heads,
                h,
            )
        })
        .collect();
    let mut out = vec![0.0; t];
    for j in 0..t {
        let mut v = vec![0.0; d];
        for h in 0..heads {
            let alpha = block.attn_probs.as_slice()[(h * t + query) * t + j] as f64;
            for c in 0..d {
                v[c] += alpha * transforms[h][j][c];
            }
        }
        out[j] = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    out
}

/// Positions ranked by counting how many entries beat each one.
pub fn rank_order(values: &[f64]) -> Vec<usize> {
    let n = values.len();
    let mut order = vec![usize::MAX; n];
    for i in 0..n {
        let beaten_by = (0..n)
            .filter(|&j| values[j] > values[i] || (values[j] == values[i] && j < i))
            .count();
        order[beaten_by] = i;
    }
    order
}

/// Kahan-compensated mean and population standard deviation per column.
pub fn mean_std(curves: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = curves[0].len();
    let count = curves.len() as f64;
    let mut means = Vec::new();
    let mut stds = Vec::new();
    for l in 0..n {
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for c in curves {
            let y = c[l] - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        let mean = sum / count;
        let var = curves.iter().map(|c| (c[l] - mean).powi(2)).sum::<f64>() / count;
        means.push(mean);
        stds.push(var.sqrt());
    }
    (means, stds)
}

pub fn final_norm(h: &[f32], gamma: &[f32], beta: &[f32], eps: f64, kind: NormKind) -> Vec<f64> {
    let d = h.len() as f64;
    let mut out = Vec::new();
    match kind {
        NormKind::Layernorm => {
            let mean: f64 = h.iter().map(|&x| x as f64).sum::<f64>() / d;
            let var: f64 = h.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / d;
            for c in 0..h.len() {
                out.push(
                    gamma[c] as f64 * (h[c] as f64 - mean) / (var + eps).sqrt() + beta[c] as f64,
                );
            }
        }
        NormKind::Rmsnorm => {
            let ms: f64 = h.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / d;
            for c in 0..h.len() {
                out.push(gamma[c] as f64 * h[c] as f64 / (ms + eps).sqrt());
            }
        }
    }
    out
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| scale * rng.random_range(-1.0f32..1.0))
            .collect(),
    )
    .unwrap()
}

/// Causal, row-stochastic attention `[H, T, T]` with random weights.
pub fn random_attention(rng: &mut ChaCha8Rng, heads: usize, t: usize) -> Tensor {
    let mut data = vec![0.0f32; heads * t * t];
    for h in 0..heads {
        for i in 0..t {
            let w: Vec<f64> = (0..=i).map(|_| rng.random_range(0.01..1.0)).collect();
            let total: f64 = w.iter().sum();
            for j in 0..=i {
                data[(h * t + i) * t + j] = (w[j] / total) as f32;
            }
        }
    }
    Tensor::new(vec![heads, t, t], data).unwrap()
}

pub fn random_block(rng: &mut ChaCha8Rng, heads: usize, t: usize, d: usize) -> BlockData {
    BlockData {
        attn_probs: random_attention(rng, heads, t),
        attn_input: random_tensor(rng, vec![t, d], 1.0),
        w_v: random_tensor(rng, vec![d, d], 0.5),
        b_v: random_tensor(rng, vec![d], 0.1),
        w_o: random_tensor(rng, vec![d, d], 0.5),
        b_o: random_tensor(rng, vec![d], 0.1),
    }
}

/// A structurally valid random dump with the given geometry. Visual tokens
/// come first, then text tokens, then (if `t > m + n`) nothing else.
pub fn random_dump(
    rng: &mut ChaCha8Rng,
    layers: usize,
    t: usize,
    heads: usize,
    head_dim: usize,
    visual: usize,
    vocab: usize,
) -> DumpData {
    let d = heads * head_dim;
    DumpData {
        model_name: "random".into(),
        num_layers: layers,
        num_heads: heads,
        head_dim,
        tokens: (0..t).map(|i| format!("t{i}")).collect(),
        spans: ModalitySpan {
            visual: TokenRange::new(0, visual),
            text: TokenRange::new(visual, t),
        },
        norm_kind: NormKind::Layernorm,
        caption: Some("a red bus parked on the street".into()),
        hidden: (0..=layers)
            .map(|_| random_tensor(rng, vec![t, d], 1.0))
            .collect(),
        blocks: (0..layers)
            .map(|_| random_block(rng, heads, t, d))
            .collect(),
        unembedding: random_tensor(rng, vec![vocab, d], 1.0),
        norm_gamma: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
        norm_beta: Tensor::zeros(vec![d]),
        norm_eps: 1e-5,
        vocab: (0..vocab).map(|i| format!("\u{2581}w{i}")).collect(),
    }
}
