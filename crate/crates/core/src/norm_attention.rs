//! Norm-based attention saliency.
//!
//! Saliency of query `i` toward key `j` is `‖Σ_h α^h[i,j] · f^h(x_j)‖₂`, where
//! `f^h(x) = (x W_V + b_V)|_h · W_O|_h` is head `h`'s value-then-output
//! transform of the attention input. `b_O` is left out: it does not depend
//! on the key.

use serde::Serialize;

use crate::dump_io::{BlockData, ValidatedDump};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyMode {
    /// Norm of the head-summed vector.
    #[default]
    HeadSum,
    /// Sum of per-head norms. Inspection only.
    PerHead,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaliencyMap {
    pub layer: usize,
    pub query_index: usize,
    /// Length T; zero for keys after the query.
    pub values: Vec<f64>,
}

/// One row per decoder block `1..=L` for a fixed query.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaliencyStack {
    pub query_index: usize,
    pub maps: Vec<SaliencyMap>,
}

impl SaliencyStack {
    pub fn from_rows(query_index: usize, rows: Vec<Vec<f64>>) -> Self {
        Self {
            query_index,
            maps: rows
                .into_iter()
                .enumerate()
                .map(|(i, values)| SaliencyMap {
                    layer: i + 1,
                    query_index,
                    values,
                })
                .collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.maps.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.maps.first().map_or(0, |m| m.values.len())
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.maps.iter().map(|m| m.values.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopTokens {
    pub k: usize,
    /// Per stack row, the `k` most salient token indices.
    pub per_layer: Vec<Vec<usize>>,
    /// All token indices ranked by saliency summed over layers.
    pub global: Vec<usize>,
}

fn square_check(what: &str, t: &Tensor, d: usize) -> Result<()> {
    t.expect_shape(what, &[d, d])
}

/// Head `h`'s transform of every row of `x`. Output is `[T, d]`.
pub fn head_transform(
    x: &Tensor,
    w_v: &Tensor,
    b_v: &Tensor,
    w_o: &Tensor,
    num_heads: usize,
    head: usize,
) -> Result<Tensor> {
    let out = transform_rows(x, w_v, b_v, w_o, num_heads, head)?;
    Tensor::new(
        vec![x.num_rows(), x.row_len()],
        out.into_iter().map(|v| v as f32).collect(),
    )
}

/// Row-major `[T, d]` transform in f64.
fn transform_rows(
    x: &Tensor,
    w_v: &Tensor,
    b_v: &Tensor,
    w_o: &Tensor,
    num_heads: usize,
    head: usize,
) -> Result<Vec<f64>> {
    let d = x.row_len();
    square_check("W_V", w_v, d)?;
    square_check("W_O", w_o, d)?;
    b_v.expect_shape("b_V", &[d])?;
    if num_heads == 0 || !d.is_multiple_of(num_heads) || head >= num_heads {
        return Err(Error::ShapeMismatch {
            what: format!("head {head} of {num_heads}"),
            expected: vec![num_heads, d / num_heads.max(1)],
            got: vec![d],
        });
    }
    let dh = d / num_heads;
    let cols = head * dh..(head + 1) * dh;
    let (wv, wo, bv) = (w_v.as_slice(), w_o.as_slice(), b_v.as_slice());

    let t = x.num_rows();
    let mut out = vec![0.0f64; t * d];
    let mut value = vec![0.0f64; dh];
    for (j, row) in x.rows().enumerate() {
        for (slot, c) in value.iter_mut().zip(cols.clone()) {
            let mut acc = bv[c] as f64;
            for (r, &xr) in row.iter().enumerate() {
                acc += xr as f64 * wv[r * d + c] as f64;
            }
            *slot = acc;
        }
        for o in 0..d {
            let mut acc = 0.0f64;
            for (k, c) in cols.clone().enumerate() {
                acc += value[k] * wo[c * d + o] as f64;
            }
            out[j * d + o] = acc;
        }
    }
    Ok(out)
}

/// Transforms for all heads of a block, reused across queries.
struct HeadOutputs {
    d: usize,
    per_head: Vec<Vec<f64>>,
}

impl HeadOutputs {
    fn new(block: &BlockData, num_heads: usize) -> Result<Self> {
        let per_head = (0..num_heads)
            .map(|h| {
                transform_rows(
                    &block.attn_input,
                    &block.w_v,
                    &block.b_v,
                    &block.w_o,
                    num_heads,
                    h,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            d: block.attn_input.row_len(),
            per_head,
        })
    }

    fn row(&self, head: usize, token: usize) -> &[f64] {
        &self.per_head[head][token * self.d..(token + 1) * self.d]
    }
}

fn saliency_row(probs: &Tensor, heads: &HeadOutputs, query: usize, mode: SaliencyMode) -> Vec<f64> {
    let t = probs.shape()[1];
    let d = heads.d;
    let mut values = vec![0.0; t];
    let mut acc = vec![0.0f64; d];
    for (j, value) in values.iter_mut().enumerate().take(query + 1) {
        match mode {
            SaliencyMode::HeadSum => {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for h in 0..heads.per_head.len() {
                    let alpha = probs.at3(h, query, j) as f64;
                    for (a, &fv) in acc.iter_mut().zip(heads.row(h, j)) {
                        *a += alpha * fv;
                    }
                }
                *value = acc.iter().fold(0.0, |s, a| s + a * a).sqrt();
            }
            SaliencyMode::PerHead => {
                let mut total = 0.0;
                for h in 0..heads.per_head.len() {
                    let alpha = probs.at3(h, query, j) as f64;
                    let sq = heads
                        .row(h, j)
                        .iter()
                        .fold(0.0, |s, &fv| s + (alpha * fv).powi(2));
                    total += sq.sqrt();
                }
                *value = total;
            }
        }
    }
    values
}

fn check_block(block: &BlockData, num_heads: usize) -> Result<()> {
    let t = block.attn_input.num_rows();
    block
        .attn_input
        .expect_shape("attn_input", &[t, block.attn_input.row_len()])?;
    block
        .attn_probs
        .expect_shape("attn_probs", &[num_heads, t, t])
}

/// Saliency of `query` toward every key in one decoder block.
pub fn norm_saliency(
    block: &BlockData,
    num_heads: usize,
    layer: usize,
    query: usize,
    mode: SaliencyMode,
) -> Result<SaliencyMap> {
    check_block(block, num_heads)?;
    let t = block.attn_input.num_rows();
    if query >= t {
        return Err(Error::ShapeMismatch {
            what: format!("query index {query}"),
            expected: vec![t],
            got: vec![query],
        });
    }
    let heads = HeadOutputs::new(block, num_heads)?;
    Ok(SaliencyMap {
        layer,
        query_index: query,
        values: saliency_row(&block.attn_probs, &heads, query, mode),
    })
}

/// Saliency of the last token over decoder blocks `1..=L`.
pub fn last_token_saliency(dump: &ValidatedDump) -> Result<SaliencyStack> {
    last_token_saliency_with(dump, SaliencyMode::HeadSum)
}

pub fn last_token_saliency_with(dump: &ValidatedDump, mode: SaliencyMode) -> Result<SaliencyStack> {
    let query = dump.num_tokens() - 1;
    let num_heads = dump.manifest().num_heads;
    let maps = (1..=dump.num_layers())
        .map(|layer| {
            dump.block(layer)
                .and_then(|block| norm_saliency(&block, num_heads, layer, query, mode))
                .map_err(Error::at_layer(layer))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SaliencyStack {
        query_index: query,
        maps,
    })
}

/// Indices sorted by value descending, ties by lower index.
fn ranked(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        (values[b] + 0.0)
            .total_cmp(&(values[a] + 0.0))
            .then(a.cmp(&b))
    });
    idx
}

pub fn top_attended_tokens(stack: &SaliencyStack, k: usize) -> Result<TopTokens> {
    let t = stack.num_tokens();
    if k == 0 || k > t {
        return Err(Error::BadK { k, max: t });
    }
    let per_layer = stack
        .maps
        .iter()
        .map(|m| {
            let mut r = ranked(&m.values);
            r.truncate(k);
            r
        })
        .collect();
    let mut totals = vec![0.0; t];
    for m in &stack.maps {
        for (tot, v) in totals.iter_mut().zip(&m.values) {
            *tot += v;
        }
    }
    Ok(TopTokens {
        k,
        per_layer,
        global: ranked(&totals),
    })
}
