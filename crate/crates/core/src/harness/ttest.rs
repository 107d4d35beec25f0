//! One-tailed paired Student's t-test.
//!
//! The upper tail of Student's t with `ν` degrees of freedom is
//! `P(T ≥ t) = ½ · I_x(ν/2, ½)` with `x = ν / (ν + t²)` for `t ≥ 0`, where
//! `I` is the regularized incomplete beta function. `I` comes from
//! `statrs`, which evaluates it with the Lentz continued fraction (switching
//! to the symmetry relation when `x` is past the mean) and a Lanczos
//! log-gamma prefactor.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTestResult {
    pub t: f64,
    /// One-tailed p-value for `mean(ours − baseline) > 0`.
    pub p: f64,
    pub dof: usize,
    pub significant: bool,
    /// Set when the differences have zero variance and `p` comes from the
    /// sign convention instead of the t distribution.
    pub degenerate: bool,
}

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// Paired test of `ours` against `baseline`, paired by position.
pub fn paired_ttest(ours: &[f64], baseline: &[f64]) -> Result<TTestResult> {
    if ours.len() != baseline.len() {
        return Err(Error::Input(format!(
            "paired samples differ in length ({} vs {})",
            ours.len(),
            baseline.len()
        )));
    }
    let n = ours.len();
    if n < 2 {
        return Err(Error::Input(format!(
            "a paired t-test needs at least 2 pairs, got {n}"
        )));
    }
    if ours.iter().chain(baseline).any(|v| !v.is_finite()) {
        return Err(Error::Input(
            "paired samples contain non-finite values".into(),
        ));
    }
    let diffs: Vec<f64> = ours.iter().zip(baseline).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let dof = n - 1;
    if var == 0.0 {
        let (t, p) = if mean > 0.0 {
            (f64::INFINITY, 0.0)
        } else if mean < 0.0 {
            (f64::NEG_INFINITY, 1.0)
        } else {
            (0.0, 0.5)
        };
        return Ok(TTestResult {
            t,
            p,
            dof,
            significant: p < SIGNIFICANCE_LEVEL,
            degenerate: true,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let p = student_t_upper_tail(t, dof as f64);
    Ok(TTestResult {
        t,
        p,
        dof,
        significant: p < SIGNIFICANCE_LEVEL,
        degenerate: false,
    })
}

/// `P(T ≥ t)` for Student's t with `dof` degrees of freedom.
pub fn student_t_upper_tail(t: f64, dof: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    let x = dof / (dof + t * t);
    let half_tail = 0.5 * statrs::function::beta::beta_reg(dof / 2.0, 0.5, x);
    if t >= 0.0 {
        half_tail
    } else {
        1.0 - half_tail
    }
}
