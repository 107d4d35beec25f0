//! Central finite-difference gradient checking, independent of the tape's
//! backward rules (the numeric side only ever runs forward passes).
//!
//! A probe whose `±step` interval straddles a kink (for example a ReLU input
//! within `step` of zero) has no meaningful central difference. For a smooth
//! function the central differences at `step` and `step / 2` agree to second
//! order, so probes where they disagree beyond `tol` are counted in `kinks`
//! and left out of `max_rel_err`. The test only looks at function values, so
//! it cannot hide a wrong analytic gradient.

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `|analytic − numeric| / max(1, |analytic|, |numeric|)` per probed element.
    pub rel_err: Vec<f64>,
    /// Whether each probe straddles a non-differentiable point.
    pub kink: Vec<bool>,
    /// Largest `rel_err` over probes that are not kinks.
    pub max_rel_err: f64,
    pub kinks: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }

    pub fn probes(&self) -> usize {
        self.analytic.len()
    }

    fn from_probes(analytic: Vec<f64>, probes: &[Probe], tol: f64) -> Self {
        let numeric: Vec<f64> = probes.iter().map(Probe::central).collect();
        let rel_err: Vec<f64> = analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| relative(a, n))
            .collect();
        let kink: Vec<bool> = probes.iter().map(|p| p.is_kink(tol)).collect();
        let max_rel_err = rel_err
            .iter()
            .zip(&kink)
            .filter(|(_, &k)| !k)
            .map(|(&e, _)| e)
            .fold(0.0, f64::max);
        Self {
            analytic,
            numeric,
            rel_err,
            kinks: kink.iter().filter(|&&k| k).count(),
            kink,
            max_rel_err,
            tol,
        }
    }
}

fn signed(offset: f64) -> String {
    if offset < 0.0 {
        format!("- {}", -offset)
    } else {
        format!("+ {offset}")
    }
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Central differences at `step` and `step / 2`.
struct Probe {
    full: f64,
    half: f64,
}

impl Probe {
    /// Evaluates `f` at `x ± step` and `x ± step / 2` through `eval(offset)`.
    fn measure(step: f64, mut eval: impl FnMut(f64) -> Result<f64>) -> Result<Self> {
        let full = (eval(step)? - eval(-step)?) / (2.0 * step);
        let half = (eval(step / 2.0)? - eval(-step / 2.0)?) / step;
        Ok(Self { full, half })
    }

    fn central(&self) -> f64 {
        self.full
    }

    fn is_kink(&self, tol: f64) -> bool {
        relative(self.full, self.half) > tol
    }
}

fn probe_value(tape: &Tape, out: Var, probe: &str) -> Result<f64> {
    let t = tape.value(out);
    if !t.is_scalar() {
        return Err(Error::Contract(format!(
            "grad_check: function returned shape {:?}",
            t.shape()
        )));
    }
    let v = t.item();
    if !v.is_finite() {
        return Err(Error::Domain {
            op: "grad_check",
            detail: format!("function is not finite ({v}) at probe {probe}"),
        });
    }
    Ok(v)
}

/// Checks the tape gradient of a scalar function `f(x)` against central
/// differences with the given `step`.
pub fn grad_check<F>(mut f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    probe_value(&tape, out, "x")?;
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec);

    let mut probes = Vec::with_capacity(x.len());
    let mut eval = |values: Vec<f64>, probe: String| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new(x.shape().to_vec(), values)?, false);
        let out = f(&mut tape, v)?;
        probe_value(&tape, out, &probe)
    };
    for i in 0..x.len() {
        probes.push(Probe::measure(step, |offset| {
            let mut values = x.values().to_vec();
            values[i] += offset;
            eval(values, format!("x[{i}] {}", signed(offset)))
        })?);
    }
    Ok(GradCheckReport::from_probes(analytic, &probes, tol))
}

/// Checks gradients with respect to stored parameters. At most
/// `max_probes_per_param` evenly strided elements of each parameter are probed.
pub fn grad_check_params<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    mut f: F,
    step: f64,
    tol: f64,
    max_probes_per_param: usize,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    probe_value(&tape, out, "base")?;
    tape.backward(out)?;
    let mut analytic = Vec::new();
    let mut probes = Vec::new();
    for &id in ids {
        let name = store.get(id).name.clone();
        let n = store.get(id).tensor.len();
        let var = tape
            .param_vars()
            .find(|(pid, _)| *pid == id)
            .map(|(_, v)| v);
        let grad: Vec<f64> = var
            .and_then(|v| tape.grad(v).map(<[f64]>::to_vec))
            .unwrap_or_else(|| vec![0.0; n]);
        let stride = n.div_ceil(max_probes_per_param.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).tensor.values()[i];
            let probe = Probe::measure(step, |offset| {
                store.get_mut(id).tensor.values_mut()[i] = orig + offset;
                let mut t = Tape::new();
                let out = f(&mut t, store);
                store.get_mut(id).tensor.values_mut()[i] = orig;
                probe_value(&t, out?, &format!("{name}[{i}] {}", signed(offset)))
            })?;
            analytic.push(grad[i]);
            probes.push(probe);
        }
    }
    Ok(GradCheckReport::from_probes(analytic, &probes, tol))
}
