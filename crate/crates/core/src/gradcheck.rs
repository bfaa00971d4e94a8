//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side only re-runs forward evaluations, so it stays
//! independent of every backward rule it is checking. Used by the unit
//! tests, the acceptance suite and the `selftest` subcommand.

use crate::tensor::Tensor;

/// Scalar function of a named-tensor snapshot.
pub type EvalFn<'a> = dyn FnMut(&[(String, Tensor)]) -> f64 + 'a;

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

impl FdReport {
    pub fn assert_below(&self, tol: f64) {
        assert!(
            self.max_rel_err < tol,
            "gradient mismatch at {}: rel err {:.3e} >= {:.1e} ({} components checked)",
            self.worst,
            self.max_rel_err,
            tol,
            self.checked
        );
    }
}

/// `|a - b| / max(|a|, |b|, floor)` with a floor of 1e-6 so near-zero
/// pairs do not blow up the ratio. Differences below 1e-9 absolute
/// count as matched: central differences in f64 carry that much noise
/// regardless of the gradient's size, so for tiny gradients the
/// relative form would only measure the probe, not the backward pass.
pub fn relative_error(a: f64, b: f64) -> f64 {
    if (a - b).abs() < 1e-9 {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare analytic gradients against central differences of `eval`.
///
/// `params` is a named snapshot of every tensor the scalar function
/// depends on; `analytic` must contain the same names. Every component
/// is perturbed by `±h`.
pub fn check_gradients(
    params: &[(String, Tensor)],
    analytic: &[(String, Tensor)],
    eval: &mut EvalFn<'_>,
    h: f64,
) -> FdReport {
    assert_eq!(params.len(), analytic.len(), "parameter/gradient count mismatch");
    let mut work: Vec<(String, Tensor)> = params.to_vec();
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: String::from("-"),
        checked: 0,
    };
    for ti in 0..work.len() {
        assert_eq!(
            work[ti].0, analytic[ti].0,
            "gradient name order mismatch at index {}",
            ti
        );
        assert_eq!(
            work[ti].1.shape(),
            analytic[ti].1.shape(),
            "gradient shape mismatch for {}",
            work[ti].0
        );
        for ei in 0..work[ti].1.numel() {
            let orig = work[ti].1.data()[ei];
            work[ti].1.data_mut()[ei] = orig + h;
            let plus = eval(&work);
            work[ti].1.data_mut()[ei] = orig - h;
            let minus = eval(&work);
            work[ti].1.data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let ana = analytic[ti].1.data()[ei];
            let rel = relative_error(numeric, ana);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{}[{}] (fd {:.6e}, analytic {:.6e})", work[ti].0, ei, numeric, ana);
            }
        }
    }
    report
}
