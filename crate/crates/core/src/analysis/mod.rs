//! Parameter drift, class balance and multi-run aggregation.

mod report;
mod svg;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::model::ParameterSnapshot;
use crate::Scalar;

pub use report::{
    emit_report, read_accuracy_csv, read_classes_csv, read_delta_csv, read_mad_csv,
    read_summary_csv, write_accuracy_csv, write_classes_csv, write_delta_csv, write_mad_csv,
    write_summary_csv, AccuracyRow, ArmReport, ClassRow, DeltaRow, ReportData, SummaryRow,
};
pub use svg::{accuracy_svg, classes_svg, mad_svg};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("snapshot structure mismatch: {0}")]
    StructureMismatch(String),
    #[error("runs do not share the |T| grid: {0}")]
    GridMismatch(String),
    #[error("no runs to aggregate")]
    NoRuns,
    #[error("{path}: {msg}")]
    Io {
        path: std::path::PathBuf,
        msg: String,
    },
    #[error("csv: {0}")]
    Csv(String),
    #[error("nothing to report")]
    EmptyReport,
}

/// Drift of one layer between two snapshots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDelta {
    pub layer: i32,
    /// Mean over the layer's parameters of `|after - before|`.
    pub mad: f64,
    /// Population variance of `|after - before|` within the layer.
    pub variance: f64,
    pub count: usize,
}

/// Mean absolute parameter difference per layer, layers in snapshot order.
pub fn mad_per_layer<T: Scalar>(
    before: &ParameterSnapshot<T>,
    after: &ParameterSnapshot<T>,
) -> Result<Vec<LayerDelta>, AnalysisError> {
    if before.records.len() != after.records.len() {
        return Err(AnalysisError::StructureMismatch(format!(
            "{} vs {} tensors",
            before.records.len(),
            after.records.len()
        )));
    }
    // Per layer: count, sum and sum of squares of |delta|.
    let mut acc: Vec<(i32, usize, f64, f64)> = Vec::new();
    for (a, b) in before.records.iter().zip(&after.records) {
        if a.layer != b.layer || a.name != b.name || a.tensor.shape() != b.tensor.shape() {
            return Err(AnalysisError::StructureMismatch(format!(
                "`{}` (layer {}) vs `{}` (layer {})",
                a.name, a.layer, b.name, b.layer
            )));
        }
        let slot = match acc.iter().position(|e| e.0 == a.layer) {
            Some(i) => i,
            None => {
                acc.push((a.layer, 0, 0.0, 0.0));
                acc.len() - 1
            }
        };
        let e = &mut acc[slot];
        for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
            let d = (y.as_f64() - x.as_f64()).abs();
            e.1 += 1;
            e.2 += d;
            e.3 += d * d;
        }
    }
    Ok(acc
        .into_iter()
        .map(|(layer, n, s, ss)| {
            let mean = if n == 0 { 0.0 } else { s / n as f64 };
            let variance = if n == 0 {
                0.0
            } else {
                (ss / n as f64 - mean * mean).max(0.0)
            };
            LayerDelta {
                layer,
                mad: mean,
                variance,
                count: n,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistribution {
    pub counts: Vec<(String, usize)>,
    /// Largest minus smallest class count.
    pub delta: usize,
}

pub fn class_delta(counts: &[(String, usize)]) -> ClassDistribution {
    let max = counts.iter().map(|c| c.1).max().unwrap_or(0);
    let min = counts.iter().map(|c| c.1).min().unwrap_or(0);
    ClassDistribution {
        counts: counts.to_vec(),
        delta: max - min,
    }
}

/// Mean accuracy at one |T| across runs with a 95% Student-t interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub t_size: usize,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub width: f64,
    pub runs: usize,
    /// False when fewer than two runs make the interval undefined; the
    /// width is then reported as 0.
    pub ci_defined: bool,
}

/// Two-sided 95% Student-t quantile for `df` degrees of freedom.
pub fn t_quantile_975(df: usize) -> f64 {
    let t = StudentsT::new(0.0, 1.0, df as f64).expect("positive degrees of freedom");
    // The library inversion stops near 1e-11; Newton steps on the CDF
    // bring it to rounding level.
    let mut x = t.inverse_cdf(0.975);
    for _ in 0..3 {
        x -= (t.cdf(x) - 0.975) / t.pdf(x);
    }
    x
}

/// Aggregates `(t_size, accuracy)` series, one per run, point by point.
pub fn aggregate_runs(series: &[Vec<(usize, f64)>]) -> Result<Vec<RunAggregate>, AnalysisError> {
    let first = series.first().ok_or(AnalysisError::NoRuns)?;
    for (k, s) in series.iter().enumerate() {
        if s.len() != first.len() || s.iter().zip(first).any(|(a, b)| a.0 != b.0) {
            return Err(AnalysisError::GridMismatch(format!(
                "run {k} differs from run 0"
            )));
        }
    }
    let n = series.len();
    Ok((0..first.len())
        .map(|i| {
            let xs: Vec<f64> = series.iter().map(|s| s[i].1).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            if n < 2 {
                return RunAggregate {
                    t_size: first[i].0,
                    mean,
                    lower: mean,
                    upper: mean,
                    width: 0.0,
                    runs: n,
                    ci_defined: false,
                };
            }
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let half = t_quantile_975(n - 1) * (var / n as f64).sqrt();
            RunAggregate {
                t_size: first[i].0,
                mean,
                lower: mean - half,
                upper: mean + half,
                width: 2.0 * half,
                runs: n,
                ci_defined: true,
            }
        })
        .collect())
}

/// Trapezoidal area under an accuracy-vs-|T| curve, normalized by the |T|
/// span so it reads as an average accuracy.
pub fn curve_auc(points: &[(usize, f64)]) -> f64 {
    match points {
        [] => 0.0,
        [(_, a)] => *a,
        _ => {
            let span = (points[points.len() - 1].0 - points[0].0) as f64;
            let area: f64 = points
                .windows(2)
                .map(|w| (w[1].0 - w[0].0) as f64 * (w[0].1 + w[1].1) / 2.0)
                .sum();
            if span == 0.0 {
                points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64
            } else {
                area / span
            }
        }
    }
}
