//! Segmentation of a layer curve into monotone phases.
//!
//! The curve is smoothed with a centered moving average, its first
//! differences are classified as rising or falling (changes inside the
//! deadband keep the previous direction), equal-direction runs become
//! intervals, and the interval with the least total variation is merged into
//! its larger neighbour until at most `target_phases` remain. A final pattern
//! of rise, fall, rise, fall is labelled I–IV.

use serde::{Deserialize, Serialize};

use crate::contextualization::SimilarityCurve;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub smooth_window: usize,
    pub deadband: f64,
    pub target_phases: usize,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            smooth_window: 3,
            deadband: 0.002,
            target_phases: 4,
        }
    }
}

impl PhaseConfig {
    pub fn check(&self) -> Result<()> {
        if self.smooth_window == 0 || self.smooth_window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "smooth_window must be odd and >= 1, got {}",
                self.smooth_window
            )));
        }
        if !(self.deadband.is_finite() && self.deadband >= 0.0) {
            return Err(Error::Config(format!(
                "deadband must be >= 0, got {}",
                self.deadband
            )));
        }
        if self.target_phases == 0 {
            return Err(Error::Config("target_phases must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Rising,
    Falling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseLabel {
    I,
    II,
    III,
    IV,
}

const CANONICAL: [Direction; 4] = [
    Direction::Rising,
    Direction::Falling,
    Direction::Rising,
    Direction::Falling,
];
const LABELS: [PhaseLabel; 4] = [
    PhaseLabel::I,
    PhaseLabel::II,
    PhaseLabel::III,
    PhaseLabel::IV,
];

/// Closed layer interval `[start, end]`; adjacent phases share an endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub start: usize,
    pub end: usize,
    pub direction: Direction,
    pub label: Option<PhaseLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseDiagram {
    /// Interior layer indices where the direction changes.
    pub boundaries: Vec<usize>,
    pub phases: Vec<Phase>,
    pub canonical: bool,
}

#[derive(Debug, Clone, Copy)]
struct Run {
    start: usize,
    end: usize,
    direction: Direction,
    variation: f64,
}

/// Centered moving average; windows are truncated at the edges.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let n = values.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            values[lo..=hi].iter().fold(0.0, |acc, v| acc + v) / (hi - lo + 1) as f64
        })
        .collect()
}

pub fn segment_phases(curve: &SimilarityCurve, cfg: &PhaseConfig) -> Result<PhaseDiagram> {
    segment_values(&curve.values, cfg)
}

pub fn segment_values(values: &[f64], cfg: &PhaseConfig) -> Result<PhaseDiagram> {
    cfg.check()?;
    if values.len() < cfg.target_phases + 1 || values.len() < 2 {
        return Err(Error::TooShort {
            len: values.len(),
            target: cfg.target_phases,
        });
    }
    let smoothed = smooth(values, cfg.smooth_window);
    let deltas: Vec<f64> = smoothed.windows(2).map(|w| w[1] - w[0]).collect();
    let directions = classify(&deltas, cfg.deadband);

    let mut runs: Vec<Run> = Vec::new();
    for (i, (&dir, &delta)) in directions.iter().zip(&deltas).enumerate() {
        match runs.last_mut() {
            Some(run) if run.direction == dir => {
                run.end = i + 1;
                run.variation += delta.abs();
            }
            _ => runs.push(Run {
                start: i,
                end: i + 1,
                direction: dir,
                variation: delta.abs(),
            }),
        }
    }

    while runs.len() > cfg.target_phases {
        let weakest = (0..runs.len())
            .min_by(|&a, &b| {
                runs[a]
                    .variation
                    .total_cmp(&runs[b].variation)
                    .then(a.cmp(&b))
            })
            .expect("non-empty");
        let neighbour = if weakest == 0 {
            1
        } else if weakest == runs.len() - 1 {
            weakest - 1
        } else if runs[weakest + 1].variation > runs[weakest - 1].variation {
            weakest + 1
        } else {
            weakest - 1
        };
        let absorbed = runs[weakest];
        let target = &mut runs[neighbour];
        target.start = target.start.min(absorbed.start);
        target.end = target.end.max(absorbed.end);
        target.variation += absorbed.variation;
        runs.remove(weakest);
        runs = coalesce(runs);
    }

    let canonical =
        runs.len() == CANONICAL.len() && runs.iter().zip(CANONICAL).all(|(r, d)| r.direction == d);
    let phases = runs
        .iter()
        .enumerate()
        .map(|(i, r)| Phase {
            start: r.start,
            end: r.end,
            direction: r.direction,
            label: canonical.then(|| LABELS[i]),
        })
        .collect();
    Ok(PhaseDiagram {
        boundaries: runs.iter().skip(1).map(|r| r.start).collect(),
        phases,
        canonical,
    })
}

/// Direction per difference. Values within the deadband inherit the previous
/// direction; a leading flat stretch takes the first decisive direction.
fn classify(deltas: &[f64], deadband: f64) -> Vec<Direction> {
    let decisive = |d: f64| {
        if d.abs() <= deadband {
            None
        } else if d > 0.0 {
            Some(Direction::Rising)
        } else {
            Some(Direction::Falling)
        }
    };
    let fallback = deltas.iter().find_map(|&d| decisive(d)).unwrap_or_else(|| {
        // no decisive step anywhere: follow the net change
        if deltas.iter().sum::<f64>() < 0.0 {
            Direction::Falling
        } else {
            Direction::Rising
        }
    });
    let mut current = fallback;
    deltas
        .iter()
        .map(|&d| {
            if let Some(dir) = decisive(d) {
                current = dir;
            }
            current
        })
        .collect()
}

fn coalesce(runs: Vec<Run>) -> Vec<Run> {
    let mut out: Vec<Run> = Vec::with_capacity(runs.len());
    for run in runs {
        match out.last_mut() {
            Some(prev) if prev.direction == run.direction => {
                prev.end = run.end;
                prev.variation += run.variation;
            }
            _ => out.push(run),
        }
    }
    out
}
