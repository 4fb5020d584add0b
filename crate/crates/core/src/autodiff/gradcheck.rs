use crate::rng::RngStream;
use crate::Scalar;

use super::{ForwardMode, Graph, Tensor, TensorError, Var};

/// Outcome of a finite-difference gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over probes of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`
    pub max_rel_error: f64,
    pub probes: usize,
    /// `(parameter index, element index)` of the worst probe.
    pub worst: Option<(usize, usize)>,
    /// A probe produced a non-finite loss or gradient.
    pub non_finite: bool,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        !self.non_finite && self.max_rel_error < tol
    }
}

fn eval_loss<T, F>(params: &[Tensor<T>], mode: ForwardMode, build: &F) -> Result<f64, TensorError>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new(mode);
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone(), true)).collect();
    let loss = build(&mut g, &vars)?;
    Ok(g.value(loss).data()[0].as_f64())
}

/// Denominator floor of the relative error. Central differences at h=1e-5
/// on an O(1) loss carry round-off near 1e-11, so gradients below this are
/// effectively compared in absolute terms.
pub const MIN_SCALE: f64 = 1e-6;

/// Compares analytic gradients of the scalar built by `build` against
/// central differences with step `h` at `probes` randomly chosen parameter
/// elements (every element when `probes` covers them all).
///
/// `build` must be deterministic for fixed parameters: any dropout inside
/// it has to draw from streams it re-creates on each call.
pub fn grad_check<T, F>(
    params: &[Tensor<T>],
    mode: ForwardMode,
    build: F,
    probes: usize,
    h: f64,
    rng: &mut RngStream,
) -> Result<GradCheckReport, TensorError>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new(mode);
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone(), true)).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let sizes: Vec<usize> = params.iter().map(Tensor::len).collect();
    let total: usize = sizes.iter().sum();
    let locate = |mut flat: usize| {
        for (i, &s) in sizes.iter().enumerate() {
            if flat < s {
                return (i, flat);
            }
            flat -= s;
        }
        unreachable!("flat index within total")
    };
    let picks: Vec<(usize, usize)> = if probes >= total {
        (0..total).map(locate).collect()
    } else {
        (0..probes).map(|_| locate(rng.below(total))).collect()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        probes: picks.len(),
        worst: None,
        non_finite: false,
    };
    let mut work = params.to_vec();
    for (pi, ei) in picks {
        let analytic = grads.get(vars[pi]).map_or(0.0, |g| g[ei].as_f64());
        let orig = work[pi].data()[ei];
        work[pi].data_mut()[ei] = T::lit(orig.as_f64() + h);
        let up = eval_loss(&work, mode, &build)?;
        work[pi].data_mut()[ei] = T::lit(orig.as_f64() - h);
        let down = eval_loss(&work, mode, &build)?;
        work[pi].data_mut()[ei] = orig;
        let numeric = (up - down) / (2.0 * h);
        if !numeric.is_finite() || !analytic.is_finite() {
            report.non_finite = true;
            report.worst = Some((pi, ei));
            continue;
        }
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MIN_SCALE);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((pi, ei));
        }
    }
    Ok(report)
}
