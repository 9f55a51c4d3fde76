//! LogitLens verbalization of visual-token hidden states.
//!
//! Every layer's visual-token states go through the model's final norm and
//! unembedding matrix; the resulting top-k words are scored against the
//! ground-truth caption.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::dump_io::{NormKind, ValidatedDump};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_TOP_K: usize = 5;

const BUILTIN_STOPLIST: &str = include_str!("../data/stoplist_en.txt");
const BUILTIN_STOPLIST_ID: &str = "builtin:en";

/// Subword markers stripped from the front of vocabulary strings.
const SUBWORD_MARKERS: [char; 2] = ['\u{2581}', '\u{0120}'];

/// Final norm parameters and unembedding matrix, loaded into memory.
#[derive(Debug, Clone)]
pub struct LoadedHead {
    /// `[V, d]`.
    pub unembedding: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
    pub norm_kind: NormKind,
    pub vocab: Vec<String>,
}

impl LoadedHead {
    pub fn vocab_size(&self) -> usize {
        self.unembedding.num_rows()
    }
}

#[derive(Debug, Clone)]
pub struct Stoplist {
    id: String,
    words: HashSet<String>,
}

impl Stoplist {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_STOPLIST_ID.to_string(), BUILTIN_STOPLIST)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let digest = hex::encode(Sha256::digest(text.as_bytes()));
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Self::parse(
            format!("file:{name}:sha256:{}", &digest[..16]),
            &text,
        ))
    }

    pub fn from_words<I, S>(id: &str, words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            id: id.to_string(),
            words: words
                .into_iter()
                .map(|w| w.as_ref().to_lowercase())
                .collect(),
        }
    }

    /// One word per line; `#` starts a comment.
    fn parse(id: String, text: &str) -> Self {
        let words = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim().to_lowercase())
            .filter(|w| !w.is_empty())
            .collect();
        Self { id, words }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }
}

impl Default for Stoplist {
    fn default() -> Self {
        Self::builtin()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenDecodes {
    pub token_index: usize,
    /// `(vocab id, logit)`, logit-descending, ties by lower id.
    pub decodes: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodedLayer {
    pub layer: usize,
    pub per_token: Vec<TokenDecodes>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallCurve {
    pub values: Vec<f64>,
    pub k: usize,
    pub stoplist_id: String,
    pub sample_count: usize,
}

/// Final norm applied to one hidden vector, in f64.
pub fn apply_final_norm(h: &[f32], head: &LoadedHead) -> Vec<f64> {
    let d = h.len() as f64;
    let gamma = head.gamma.as_slice();
    let beta = head.beta.as_slice();
    match head.norm_kind {
        NormKind::Layernorm => {
            let mean = h.iter().map(|&x| x as f64).sum::<f64>() / d;
            let var = h.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + head.eps).sqrt();
            h.iter()
                .enumerate()
                .map(|(c, &x)| gamma[c] as f64 * (x as f64 - mean) * inv + beta[c] as f64)
                .collect()
        }
        NormKind::Rmsnorm => {
            let ms = h.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (ms + head.eps).sqrt();
            h.iter()
                .enumerate()
                .map(|(c, &x)| gamma[c] as f64 * x as f64 * inv)
                .collect()
        }
    }
}

pub fn logits(h: &[f32], head: &LoadedHead) -> Vec<f64> {
    let normed = apply_final_norm(h, head);
    head.unembedding
        .rows()
        .map(|row| {
            row.iter()
                .zip(&normed)
                .fold(0.0f64, |acc, (&u, &x)| acc + u as f64 * x)
        })
        .collect()
}

/// Indices of the `k` largest values, descending, ties by lower index.
pub fn top_k(values: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    if k == 0 || k > values.len() {
        return Err(Error::BadK {
            k,
            max: values.len(),
        });
    }
    // +0.0 and -0.0 compare equal so they fall to the id tie rule
    let key = |i: usize| values[i] + 0.0;
    let cmp = |a: &usize, b: &usize| key(*b).total_cmp(&key(*a)).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    Ok(idx.into_iter().map(|i| (i, values[i])).collect())
}

pub fn decode_hidden(h: &[f32], head: &LoadedHead, k: usize) -> Result<Vec<(usize, f64)>> {
    top_k(&logits(h, head), k)
}

/// Top-k decodes for every visual token at every layer `0..=L`.
pub fn verbalize_visual_tokens(dump: &ValidatedDump, k: usize) -> Result<Vec<DecodedLayer>> {
    let head = dump.load_head()?;
    if k == 0 || k > head.vocab_size() {
        return Err(Error::BadK {
            k,
            max: head.vocab_size(),
        });
    }
    let visual = dump.manifest().spans.visual;
    (0..=dump.num_layers())
        .map(|layer| {
            let hidden = dump.hidden(layer).map_err(Error::at_layer(layer))?;
            let per_token = visual
                .range()
                .map(|t| {
                    Ok(TokenDecodes {
                        token_index: t,
                        decodes: decode_hidden(hidden.row(t), &head, k)?,
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map_err(Error::at_layer(layer))?;
            Ok(DecodedLayer { layer, per_token })
        })
        .collect()
}

/// Strips subword markers and whitespace, lowercases, and drops empty,
/// non-alphabetic or stoplisted words.
pub fn normalize_word(token: &str, stoplist: &Stoplist) -> Option<String> {
    let word = token
        .trim()
        .trim_start_matches(SUBWORD_MARKERS)
        .trim()
        .to_lowercase();
    if word.is_empty() || !word.chars().all(char::is_alphabetic) || stoplist.contains(&word) {
        None
    } else {
        Some(word)
    }
}

/// Distinct content words of a caption, in order of first appearance.
pub fn content_words(caption: &str, stoplist: &Stoplist) -> Vec<String> {
    let mut seen = HashSet::new();
    caption
        .split(|c: char| !c.is_alphabetic())
        .filter_map(|w| normalize_word(w, stoplist))
        .filter(|w| seen.insert(w.clone()))
        .collect()
}

/// `|G ∩ D| / |G|` with G the caption's content words and D the union of
/// normalized decodes over all visual tokens.
pub fn caption_recall(
    decoded: &DecodedLayer,
    vocab: &[String],
    caption: &str,
    stoplist: &Stoplist,
) -> Result<f64> {
    let truth: BTreeSet<String> = content_words(caption, stoplist).into_iter().collect();
    if truth.is_empty() {
        return Err(Error::EmptyCaption);
    }
    let decoded_words: HashSet<String> = decoded
        .per_token
        .iter()
        .flat_map(|t| t.decodes.iter())
        .filter_map(|&(id, _)| vocab.get(id).and_then(|s| normalize_word(s, stoplist)))
        .collect();
    let hits = truth.iter().filter(|w| decoded_words.contains(*w)).count();
    Ok(hits as f64 / truth.len() as f64)
}

pub fn recall_from_decoded(
    decoded: &[DecodedLayer],
    vocab: &[String],
    caption: &str,
    k: usize,
    stoplist: &Stoplist,
) -> Result<RecallCurve> {
    let values = decoded
        .iter()
        .map(|layer| caption_recall(layer, vocab, caption, stoplist))
        .collect::<Result<Vec<_>>>()?;
    Ok(RecallCurve {
        values,
        k,
        stoplist_id: stoplist.id().to_string(),
        sample_count: 1,
    })
}

pub fn recall_curve(dump: &ValidatedDump, k: usize, stoplist: &Stoplist) -> Result<RecallCurve> {
    let caption = dump
        .manifest()
        .caption
        .as_deref()
        .ok_or(Error::MissingCaption)?;
    let decoded = verbalize_visual_tokens(dump, k)?;
    recall_from_decoded(&decoded, &dump.manifest().head.vocab, caption, k, stoplist)
}

/// Per-layer mean in input order.
pub fn aggregate_recall(curves: &[RecallCurve]) -> Result<RecallCurve> {
    let first = curves.first().ok_or(Error::EmptySeries)?;
    let n = first.values.len();
    if let Some(bad) = curves.iter().find(|c| c.values.len() != n) {
        return Err(Error::LengthMismatch {
            expected: n,
            got: bad.values.len(),
        });
    }
    if curves
        .iter()
        .any(|c| c.k != first.k || c.stoplist_id != first.stoplist_id)
    {
        return Err(Error::MixedKinds);
    }
    let values = (0..n)
        .map(|l| curves.iter().fold(0.0, |acc, c| acc + c.values[l]) / curves.len() as f64)
        .collect();
    Ok(RecallCurve {
        values,
        k: first.k,
        stoplist_id: first.stoplist_id.clone(),
        sample_count: curves.iter().map(|c| c.sample_count).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn head(u: Vec<Vec<f32>>, norm_kind: NormKind, eps: f64) -> LoadedHead {
        let d = u[0].len();
        let v = u.len();
        LoadedHead {
            unembedding: Tensor::from_rows(&u).unwrap(),
            gamma: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
            beta: Tensor::zeros(vec![d]),
            eps,
            norm_kind,
            vocab: (0..v).map(|i| format!("w{i}")).collect(),
        }
    }

    fn basis(v: usize, d: usize) -> Vec<Vec<f32>> {
        (0..v)
            .map(|i| (0..d).map(|c| if c == i { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    #[test]
    fn rmsnorm_unit_mean_square_is_identity() {
        let h = [1.0f32, -1.0, 1.0, -1.0];
        let hd = head(basis(4, 4), NormKind::Rmsnorm, 0.0);
        assert_eq!(apply_final_norm(&h, &hd), vec![1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn layernorm_of_constant_is_zero() {
        let hd = head(basis(4, 4), NormKind::Layernorm, 1e-5);
        assert_eq!(apply_final_norm(&[1.0; 4], &hd), vec![0.0; 4]);
    }

    #[test]
    fn final_norm_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 16;
        let h: Vec<f32> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let gamma: Vec<f32> = (0..d).map(|_| rng.random_range(0.5..1.5)).collect();
        let beta: Vec<f32> = (0..d).map(|_| rng.random_range(-0.1..0.1)).collect();
        for kind in [NormKind::Layernorm, NormKind::Rmsnorm] {
            let mut hd = head(basis(2, d), kind, 1e-5);
            hd.gamma = Tensor::new(vec![d], gamma.clone()).unwrap();
            if kind == NormKind::Layernorm {
                hd.beta = Tensor::new(vec![d], beta.clone()).unwrap();
            }
            let got = apply_final_norm(&h, &hd);
            // scalar oracle
            let mut mean = 0.0;
            for &x in &h {
                mean += x as f64;
            }
            mean /= d as f64;
            let mut var = 0.0;
            let mut ms = 0.0;
            for &x in &h {
                var += (x as f64 - mean) * (x as f64 - mean);
                ms += x as f64 * x as f64;
            }
            var /= d as f64;
            ms /= d as f64;
            for c in 0..d {
                let want = match kind {
                    NormKind::Layernorm => {
                        gamma[c] as f64 * (h[c] as f64 - mean) / (var + 1e-5).sqrt()
                            + beta[c] as f64
                    }
                    NormKind::Rmsnorm => gamma[c] as f64 * h[c] as f64 / (ms + 1e-5).sqrt(),
                };
                assert!((got[c] - want).abs() < 1e-6, "{kind:?} c={c}");
            }
        }
    }

    #[test]
    fn basis_unembedding_decodes_index() {
        // rmsnorm with eps 0 maps 2*e3 (d=4) to 2*e3; scale to get exactly e3
        let hd = head(basis(6, 4), NormKind::Rmsnorm, 0.0);
        let mut h = [0.0f32; 4];
        h[3] = 1.0;
        let mut hd = hd;
        hd.gamma = Tensor::new(vec![4], vec![0.5; 4]).unwrap();
        let top = decode_hidden(&h, &hd, 1).unwrap();
        assert_eq!(top, vec![(3, 1.0)]);
    }

    #[test]
    fn k_equal_vocab_returns_everything_sorted() {
        let hd = head(basis(4, 4), NormKind::Rmsnorm, 0.0);
        let top = decode_hidden(&[0.1, 0.4, 0.3, 0.2], &hd, 4).unwrap();
        let ids: Vec<usize> = top.iter().map(|p| p.0).collect();
        assert_eq!(ids, vec![1, 2, 3, 0]);
        assert!(top.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn bad_k() {
        assert!(matches!(top_k(&[1.0, 2.0], 0), Err(Error::BadK { .. })));
        assert!(matches!(
            top_k(&[1.0, 2.0], 3),
            Err(Error::BadK { k: 3, max: 2 })
        ));
    }

    #[test]
    fn ties_go_to_lower_ids() {
        let top = top_k(&[0.0, 1.0, 0.0, 1.0, 0.0], 4).unwrap();
        let ids: Vec<usize> = top.iter().map(|p| p.0).collect();
        assert_eq!(ids, vec![1, 3, 0, 2]);
        let top = top_k(&[-0.0, 0.0, -0.0], 3).unwrap();
        assert_eq!(top.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn normalize_word_rules() {
        let stop = Stoplist::builtin();
        assert_eq!(normalize_word("\u{2581}Dog", &stop).as_deref(), Some("dog"));
        assert_eq!(
            normalize_word("\u{0120}Cat ", &stop).as_deref(),
            Some("cat")
        );
        assert_eq!(normalize_word("##", &stop), None);
        assert_eq!(normalize_word("the", &stop), None);
        assert_eq!(normalize_word("\u{2581}", &stop), None);
        assert_eq!(normalize_word("abc1", &stop), None);
    }

    fn decoded_words(words: &[&str]) -> (DecodedLayer, Vec<String>) {
        let vocab: Vec<String> = words.iter().map(|w| w.to_string()).collect();
        let layer = DecodedLayer {
            layer: 0,
            per_token: (0..words.len())
                .map(|i| TokenDecodes {
                    token_index: i,
                    decodes: vec![(i, 1.0)],
                })
                .collect(),
        };
        (layer, vocab)
    }

    #[test]
    fn recall_definition() {
        let stop = Stoplist::from_words("t", ["a", "on", "the"]);
        let caption = "a red bus on the street";
        let (layer, vocab) = decoded_words(&["bus", "sky"]);
        let r = caption_recall(&layer, &vocab, caption, &stop).unwrap();
        assert!((r - 1.0 / 3.0).abs() < 1e-12);

        let (layer, vocab) = decoded_words(&["\u{2581}red", "Bus", "street", "sky"]);
        assert_eq!(caption_recall(&layer, &vocab, caption, &stop).unwrap(), 1.0);

        let (layer, vocab) = decoded_words(&["sky", "tree"]);
        assert_eq!(caption_recall(&layer, &vocab, caption, &stop).unwrap(), 0.0);

        assert!(matches!(
            caption_recall(&layer, &vocab, "the a on", &stop),
            Err(Error::EmptyCaption)
        ));
    }

    #[test]
    fn content_words_dedup_in_order() {
        let stop = Stoplist::builtin();
        assert_eq!(
            content_words("A dog, a DOG and a cat.", &stop),
            vec!["dog".to_string(), "cat".to_string()]
        );
    }

    #[test]
    fn aggregate_recall_mean() {
        let c = |v: Vec<f64>| RecallCurve {
            values: v,
            k: 5,
            stoplist_id: "x".into(),
            sample_count: 1,
        };
        let agg = aggregate_recall(&[c(vec![0.0, 1.0]), c(vec![0.5, 0.0])]).unwrap();
        assert_eq!(agg.values, vec![0.25, 0.5]);
        assert_eq!(agg.sample_count, 2);
        assert!(matches!(
            aggregate_recall(&[c(vec![0.0]), c(vec![0.0, 1.0])]),
            Err(Error::LengthMismatch { .. })
        ));
    }
}
