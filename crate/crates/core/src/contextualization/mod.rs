//! Cosine contextualization between and within modalities.
//!
//! All sums run sequentially in a fixed order (row-major over pairs) so the
//! result is bit-identical however callers parallelize across layers or
//! samples.

mod phases;

use serde::{Deserialize, Serialize};

use crate::dump_io::{ModalitySpan, TokenRange, ValidatedDump};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use phases::{
    segment_phases, segment_values, smooth, Direction, Phase, PhaseConfig, PhaseDiagram, PhaseLabel,
};

/// Vectors at or below this norm are rejected.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    Inter,
    IntraVisual,
    IntraText,
}

impl CurveKind {
    pub fn name(self) -> &'static str {
        match self {
            CurveKind::Inter => "inter",
            CurveKind::IntraVisual => "intra_visual",
            CurveKind::IntraText => "intra_text",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCurve {
    pub kind: CurveKind,
    /// Indexed by layer `0..=L`.
    pub values: Vec<f64>,
    pub sample_count: usize,
    pub stddev: Option<Vec<f64>>,
}

impl SimilarityCurve {
    pub fn new(kind: CurveKind, values: Vec<f64>) -> Self {
        Self {
            kind,
            values,
            sample_count: 1,
            stddev: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Row vectors of `range` in f64 with their Euclidean norms.
fn rows_with_norms(hidden: &Tensor, range: TokenRange) -> Result<Vec<(Vec<f64>, f64)>> {
    range
        .range()
        .map(|token| {
            let row: Vec<f64> = hidden.row(token).iter().map(|&x| x as f64).collect();
            let norm = row.iter().fold(0.0, |acc, x| acc + x * x).sqrt();
            if norm <= ZERO_NORM {
                Err(Error::ZeroVector { token })
            } else {
                Ok((row, norm))
            }
        })
        .collect()
}

fn cosine(a: &(Vec<f64>, f64), b: &(Vec<f64>, f64)) -> f64 {
    let dot = a.0.iter().zip(&b.0).fold(0.0, |acc, (x, y)| acc + x * y);
    (dot / (a.1 * b.1)).clamp(-1.0, 1.0)
}

fn check_range(hidden: &Tensor, range: TokenRange) -> Result<()> {
    if hidden.shape().len() != 2 || range.end > hidden.num_rows() {
        return Err(Error::ShapeMismatch {
            what: "hidden states".into(),
            expected: vec![range.end, hidden.row_len()],
            got: hidden.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean cosine over all (visual, text) pairs, visual index outer.
pub fn inter_modal_similarity(hidden: &Tensor, spans: &ModalitySpan) -> Result<f64> {
    check_range(hidden, spans.visual)?;
    check_range(hidden, spans.text)?;
    let visual = rows_with_norms(hidden, spans.visual)?;
    let text = rows_with_norms(hidden, spans.text)?;
    if visual.is_empty() || text.is_empty() {
        return Err(Error::SpanTooSmall { len: 0 });
    }
    let mut sum = 0.0;
    for v in &visual {
        for w in &text {
            sum += cosine(v, w);
        }
    }
    Ok(sum / (visual.len() * text.len()) as f64)
}

/// Mean cosine over unordered distinct pairs inside one span.
pub fn intra_modal_similarity(hidden: &Tensor, span: TokenRange) -> Result<f64> {
    let k = span.len();
    if k < 2 {
        return Err(Error::SpanTooSmall { len: k });
    }
    check_range(hidden, span)?;
    let rows = rows_with_norms(hidden, span)?;
    let mut sum = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            sum += cosine(&rows[i], &rows[j]);
        }
    }
    Ok(2.0 * sum / (k * (k - 1)) as f64)
}

pub fn layer_similarity(hidden: &Tensor, spans: &ModalitySpan, kind: CurveKind) -> Result<f64> {
    match kind {
        CurveKind::Inter => inter_modal_similarity(hidden, spans),
        CurveKind::IntraVisual => intra_modal_similarity(hidden, spans.visual),
        CurveKind::IntraText => intra_modal_similarity(hidden, spans.text),
    }
}

/// One value per hidden-state tensor, layers `0..=L`.
pub fn similarity_curve(dump: &ValidatedDump, kind: CurveKind) -> Result<SimilarityCurve> {
    let spans = dump.manifest().spans;
    let values = (0..=dump.num_layers())
        .map(|layer| {
            dump.hidden(layer)
                .and_then(|h| layer_similarity(&h, &spans, kind))
                .map_err(Error::at_layer(layer))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SimilarityCurve::new(kind, values))
}

/// Per-layer mean and population standard deviation, summed in input order.
pub fn aggregate_curves(curves: &[SimilarityCurve]) -> Result<SimilarityCurve> {
    let first = curves.first().ok_or(Error::EmptySeries)?;
    for c in curves {
        if c.kind != first.kind {
            return Err(Error::MixedKinds);
        }
        if c.len() != first.len() {
            return Err(Error::LengthMismatch {
                expected: first.len(),
                got: c.len(),
            });
        }
    }
    let n = curves.len() as f64;
    let mut mean = Vec::with_capacity(first.len());
    let mut stddev = Vec::with_capacity(first.len());
    for l in 0..first.len() {
        let m = curves.iter().fold(0.0, |acc, c| acc + c.values[l]) / n;
        let var = curves
            .iter()
            .fold(0.0, |acc, c| acc + (c.values[l] - m) * (c.values[l] - m))
            / n;
        mean.push(m);
        stddev.push(var.sqrt());
    }
    Ok(SimilarityCurve {
        kind: first.kind,
        values: mean,
        sample_count: curves.iter().map(|c| c.sample_count).sum(),
        stddev: Some(stddev),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spans(visual: (usize, usize), text: (usize, usize)) -> ModalitySpan {
        ModalitySpan {
            visual: TokenRange::new(visual.0, visual.1),
            text: TokenRange::new(text.0, text.1),
        }
    }

    fn t(rows: &[&[f32]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identical_rows_are_fully_similar() {
        let h = t(&[&[1.0f32, 2.0, 2.0][..]; 4]);
        let s = inter_modal_similarity(&h, &spans((0, 2), (2, 4))).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_modalities() {
        let h = t(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]);
        assert_eq!(
            inter_modal_similarity(&h, &spans((0, 2), (2, 4))).unwrap(),
            0.0
        );
    }

    #[test]
    fn forty_five_degrees() {
        let h = t(&[&[1.0, 0.0], &[1.0, 1.0]]);
        let s = inter_modal_similarity(&h, &spans((0, 1), (1, 2))).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-7);
    }

    #[test]
    fn zero_vector_is_an_error() {
        let h = t(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert!(matches!(
            inter_modal_similarity(&h, &spans((0, 1), (1, 2))),
            Err(Error::ZeroVector { token: 1 })
        ));
    }

    #[test]
    fn intra_cases() {
        let h = t(&[&[1.0f32, 1.0, 0.0][..]; 3]);
        assert!((intra_modal_similarity(&h, TokenRange::new(0, 3)).unwrap() - 1.0).abs() < 1e-12);
        let e = t(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        assert_eq!(
            intra_modal_similarity(&e, TokenRange::new(0, 3)).unwrap(),
            0.0
        );
        assert!(matches!(
            intra_modal_similarity(&e, TokenRange::new(1, 2)),
            Err(Error::SpanTooSmall { len: 1 })
        ));
    }

    #[test]
    fn aggregate_identity_and_spread() {
        let one = SimilarityCurve::new(CurveKind::Inter, vec![0.1, 0.2, 0.3]);
        let agg = aggregate_curves(std::slice::from_ref(&one)).unwrap();
        assert_eq!(agg.values, one.values);
        assert_eq!(agg.stddev, Some(vec![0.0; 3]));

        let a = SimilarityCurve::new(CurveKind::Inter, vec![0.0; 3]);
        let b = SimilarityCurve::new(CurveKind::Inter, vec![1.0; 3]);
        let agg = aggregate_curves(&[a, b]).unwrap();
        assert_eq!(agg.values, vec![0.5; 3]);
        assert_eq!(agg.stddev, Some(vec![0.5; 3]));
        assert_eq!(agg.sample_count, 2);
    }

    #[test]
    fn aggregate_rejects_mixed_input() {
        let a = SimilarityCurve::new(CurveKind::Inter, vec![0.0; 3]);
        let b = SimilarityCurve::new(CurveKind::IntraText, vec![0.0; 3]);
        let c = SimilarityCurve::new(CurveKind::Inter, vec![0.0; 4]);
        assert!(matches!(
            aggregate_curves(&[a.clone(), b]),
            Err(Error::MixedKinds)
        ));
        assert!(matches!(
            aggregate_curves(&[a, c]),
            Err(Error::LengthMismatch {
                expected: 3,
                got: 4
            })
        ));
        assert!(aggregate_curves(&[]).is_err());
    }
}
