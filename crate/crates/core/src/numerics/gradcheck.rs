use serde::{Deserialize, Serialize};

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst_param_index: usize,
    pub h: f64,
}

/// `|a - n| / max(1, |a|, |n|)`.
#[inline]
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Central differences `(f(θ + h e_k) - f(θ - h e_k)) / 2h` for every coordinate.
pub fn finite_diff_grad<F>(f: F, theta: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(h > 0.0);
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|k| {
            probe[k] = theta[k] + h;
            let plus = f(&probe);
            probe[k] = theta[k] - h;
            let minus = f(&probe);
            probe[k] = theta[k];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

pub fn grad_check<F>(analytic: &[f64], f: F, theta: &[f64], h: f64) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(analytic.len(), theta.len(), "gradient length mismatch");
    let numeric = finite_diff_grad(f, theta, h);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param_index: 0,
        h,
    };
    for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = rel_error(*a, *n);
        if e > report.max_rel_error || e.is_nan() {
            report.max_rel_error = if e.is_nan() { f64::INFINITY } else { e };
            report.worst_param_index = k;
        }
    }
    report
}
