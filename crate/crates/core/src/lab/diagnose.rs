//! Training-sufficiency diagnostic and dataset quadrant labels.
//!
//! A well-trained model should improve (or hold steady) as the gallery grows
//! and should give similar EERs across reruns. The diagnostic measures both on
//! EER curves expressed in percentage points.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::run::{Cell, RunRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityThresholds {
    /// Largest tolerated EER increase between consecutive gallery sizes,
    /// percentage points.
    pub tau: f64,
    /// Largest tolerated interquartile range across reruns, percentage points.
    pub kappa: f64,
}

impl Default for StabilityThresholds {
    fn default() -> Self {
        StabilityThresholds {
            tau: 0.2,
            kappa: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingVerdict {
    ConsistentWithWellTrained,
    UnderTrained,
}

impl fmt::Display for TrainingVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainingVerdict::ConsistentWithWellTrained => "consistent-with-well-trained",
            TrainingVerdict::UnderTrained => "under-trained",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub g_values: Vec<usize>,
    /// Mean EER per gallery size across reruns, percentage points.
    pub mean_eer: Vec<f64>,
    /// Consecutive gallery sizes where the mean EER went up at all.
    pub increases: usize,
    /// Increases larger than `tau`.
    pub violations: usize,
    pub max_increase: f64,
    /// Largest per-gallery-size interquartile range across reruns.
    pub max_iqr: f64,
    pub reruns: usize,
    pub thresholds: StabilityThresholds,
    pub verdict: TrainingVerdict,
}

/// Interquartile range with linear interpolation between order statistics.
pub fn interquartile_range(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.75) - quantile_sorted(&v, 0.25)
}

pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Diagnoses EER curves, one per rerun, each holding one value (percentage
/// points) per entry of `g_values`. Gallery sizes are sorted first.
pub fn stability_of_curves(
    g_values: &[usize],
    curves: &[Vec<f64>],
    thresholds: StabilityThresholds,
) -> Result<StabilityReport> {
    if g_values.len() < 3 {
        return Err(Error::Config(format!(
            "stability diagnostic needs at least 3 gallery sizes, got {}",
            g_values.len()
        )));
    }
    if curves.is_empty() {
        return Err(Error::Config(
            "stability diagnostic needs at least one run".into(),
        ));
    }
    if let Some(c) = curves.iter().find(|c| c.len() != g_values.len()) {
        return Err(Error::Shape(format!(
            "curve has {} values for {} gallery sizes",
            c.len(),
            g_values.len()
        )));
    }
    let mut order: Vec<usize> = (0..g_values.len()).collect();
    order.sort_by_key(|&i| g_values[i]);

    let column = |i: usize| -> Vec<f64> { curves.iter().map(|c| c[i]).collect() };
    let mean_eer: Vec<f64> = order
        .iter()
        .map(|&i| column(i).iter().sum::<f64>() / curves.len() as f64)
        .collect();
    let steps: Vec<f64> = mean_eer.windows(2).map(|w| w[1] - w[0]).collect();
    let increases = steps.iter().filter(|&&d| d > 0.0).count();
    let violations = steps.iter().filter(|&&d| d > thresholds.tau).count();
    let max_increase = steps.iter().copied().fold(0.0f64, f64::max);
    let max_iqr = order
        .iter()
        .map(|&i| interquartile_range(&column(i)))
        .fold(0.0f64, f64::max);
    let verdict = if violations == 0 && max_iqr <= thresholds.kappa {
        TrainingVerdict::ConsistentWithWellTrained
    } else {
        TrainingVerdict::UnderTrained
    };
    Ok(StabilityReport {
        g_values: order.iter().map(|&i| g_values[i]).collect(),
        mean_eer,
        increases,
        violations,
        max_increase,
        max_iqr,
        reruns: curves.len(),
        thresholds,
        verdict,
    })
}

/// Diagnoses the reruns of one cell. All records must share the cell and
/// report the same gallery sizes.
pub fn stability_diagnostic(
    records: &[RunRecord],
    thresholds: StabilityThresholds,
) -> Result<StabilityReport> {
    let first = records
        .first()
        .ok_or_else(|| Error::Config("stability diagnostic needs at least one run".into()))?;
    if let Some(r) = records.iter().find(|r| r.cell != first.cell) {
        return Err(Error::Config(format!(
            "run `{}` belongs to a different cell than `{}`",
            r.run_id, first.run_id
        )));
    }
    let g_values: Vec<usize> = first.eer_by_g.keys().copied().collect();
    let curves = records
        .iter()
        .map(|r| {
            if r.eer_by_g.keys().ne(g_values.iter()) {
                return Err(Error::Config(format!(
                    "run `{}` reports different gallery sizes",
                    r.run_id
                )));
            }
            Ok(r.eer_by_g.values().map(|e| e * 100.0).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    stability_of_curves(&g_values, &curves, thresholds)
}

/// Groups records by cell and diagnoses each group.
pub fn diagnose_cells(
    records: &[RunRecord],
    thresholds: StabilityThresholds,
) -> Vec<(Cell, Result<StabilityReport>)> {
    let mut groups: BTreeMap<Cell, Vec<RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.cell).or_default().push(r.clone());
    }
    groups
        .into_iter()
        .map(|(cell, rs)| (cell, stability_diagnostic(&rs, thresholds)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadrantThresholds {
    /// Subject count at and above which a dataset is wide.
    pub subjects: u64,
    /// Samples per subject at and above which a dataset is deep.
    pub samples_per_subject: f64,
}

impl Default for QuadrantThresholds {
    fn default() -> Self {
        QuadrantThresholds {
            subjects: 1_000,
            samples_per_subject: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BreadthClass {
    Narrow,
    Wide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthClass {
    Shallow,
    Deep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadrantLabel {
    pub breadth: BreadthClass,
    pub depth: DepthClass,
    pub thresholds: QuadrantThresholds,
}

impl QuadrantLabel {
    /// Quadrant number with breadth on the horizontal axis and depth on the
    /// vertical: I wide/deep, II narrow/deep, III narrow/shallow, IV
    /// wide/shallow.
    pub fn quadrant(&self) -> u8 {
        match (self.breadth, self.depth) {
            (BreadthClass::Wide, DepthClass::Deep) => 1,
            (BreadthClass::Narrow, DepthClass::Deep) => 2,
            (BreadthClass::Narrow, DepthClass::Shallow) => 3,
            (BreadthClass::Wide, DepthClass::Shallow) => 4,
        }
    }
}

impl fmt::Display for QuadrantLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let roman = ["I", "II", "III", "IV"][usize::from(self.quadrant()) - 1];
        let b = match self.breadth {
            BreadthClass::Narrow => "narrow",
            BreadthClass::Wide => "wide",
        };
        let d = match self.depth {
            DepthClass::Shallow => "shallow",
            DepthClass::Deep => "deep",
        };
        write!(f, "{b}, {d} (quadrant {roman})")
    }
}

/// Thresholds are inclusive: a value equal to a threshold counts as wide or
/// deep.
pub fn classify_quadrant(
    n_subjects: u64,
    per_subject_volume: f64,
    thresholds: QuadrantThresholds,
) -> QuadrantLabel {
    QuadrantLabel {
        breadth: if n_subjects >= thresholds.subjects {
            BreadthClass::Wide
        } else {
            BreadthClass::Narrow
        },
        depth: if per_subject_volume >= thresholds.samples_per_subject {
            DepthClass::Deep
        } else {
            DepthClass::Shallow
        },
        thresholds,
    }
}
