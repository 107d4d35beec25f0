//! Disease prototype learning: the alignment, prototype and regularized
//! cross-entropy objectives, the prototype set and the linear classifier.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::encoders::Linear;
use crate::error::{Error, Result};

/// Floor applied to probabilities inside `log`.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub tau1: f64,
    pub tau2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            tau1: 0.07,
            tau2: 0.07,
            lambda1: 0.1,
            lambda2: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("tau1", self.tau1), ("tau2", self.tau2)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {t}")));
            }
        }
        for (name, l) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {l}"
                )));
            }
        }
        Ok(())
    }
}

/// Sign convention of the prototype objective.
///
/// `Corrected` pulls samples toward their prototype and pushes prototypes
/// apart. `AsPrinted` negates both terms, which does the opposite; it exists
/// only so the two readings can be compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProtSign {
    #[default]
    Corrected,
    AsPrinted,
}

/// Trainable prototypes `m` (C×h), their frozen anchors and the
/// prototype → class map.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    pub m: ParamId,
    pub anchors: ParamId,
    class_map: Vec<usize>,
    n_classes: usize,
}

impl PrototypeSet {
    pub const PREFIX: &'static str = "prototypes.";

    /// Initializes every `m_k` to a copy of `anchors[k]`.
    pub fn new(
        store: &mut ParamStore,
        anchors: &[Vec<f64>],
        class_map: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        let c = anchors.len();
        if c == 0 {
            return Err(Error::Config("prototype count is 0".into()));
        }
        if class_map.len() != c {
            return Err(Error::Config(format!(
                "class map has {} entries for {c} prototypes",
                class_map.len()
            )));
        }
        if n_classes == 0 || n_classes > c {
            return Err(Error::Config(format!(
                "class count {n_classes} must be in 1..={c} (at most one class per prototype)"
            )));
        }
        if let Some(&bad) = class_map.iter().find(|&&k| k >= n_classes) {
            return Err(Error::Config(format!(
                "class map entry {bad} out of range for {n_classes} classes"
            )));
        }
        let missing: Vec<usize> = (0..n_classes).filter(|k| !class_map.contains(k)).collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "classes {missing:?} have no prototype"
            )));
        }
        let t = Tensor::from_rows(anchors)?;
        let m = store.add("prototypes.m", t.clone(), true)?;
        let anchors = store.add("prototypes.anchors", t, false)?;
        Ok(Self {
            m,
            anchors,
            class_map,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.class_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_map.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn class_map(&self) -> &[usize] {
        &self.class_map
    }

    pub fn class_of(&self, prototype: usize) -> Result<usize> {
        self.class_map.get(prototype).copied().ok_or_else(|| {
            Error::Input(format!(
                "prototype id {prototype} out of range for {}",
                self.len()
            ))
        })
    }

    /// `mean_k ||m_k − anchor_k||₂`.
    pub fn mean_anchor_distance(&self, store: &ParamStore) -> f64 {
        let m = store.value(self.m);
        let a = store.value(self.anchors);
        let total: f64 = (0..m.rows())
            .map(|k| {
                m.row(k)
                    .iter()
                    .zip(a.row(k))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        total / m.rows() as f64
    }
}

/// Symmetric InfoNCE over the `n×n` cosine matrix, averaged over both
/// directions.
pub fn loss_ita(tape: &mut Tape, f_v: Var, f_ts: Var, tau1: f64) -> Result<Var> {
    check_temperature("tau1", tau1)?;
    let n = tape.value(f_v).rows();
    if tape.value(f_ts).rows() != n {
        return Err(Error::shape(
            "loss_ita",
            format!("{n} image rows vs {} prompt rows", tape.value(f_ts).rows()),
        ));
    }
    let s = tape.cosine_sim_matrix(f_v, f_ts)?;
    let s = tape.scale(s, 1.0 / tau1);
    let targets: Vec<usize> = (0..n).collect();
    let i2t = tape.cross_entropy_rows(s, &targets)?;
    let st = tape.transpose(s);
    let t2i = tape.cross_entropy_rows(st, &targets)?;
    let both = tape.add(i2t, t2i)?;
    Ok(tape.scale(both, 0.5))
}

/// `Σ_k 1/(2|S_k|) Σ_{i∈S_k} [exp(cos(f_v_i, m_k)/τ) + exp(cos(f_ts_i, m_k)/τ)]`
/// over the prototypes present in the batch.
pub fn prototype_attraction(
    tape: &mut Tape,
    f_v: Var,
    f_ts: Var,
    prototype_ids: &[usize],
    m: Var,
    tau2: f64,
) -> Result<Var> {
    check_temperature("tau2", tau2)?;
    let n = prototype_ids.len();
    if n == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    let c = tape.value(m).rows();
    for v in [f_v, f_ts] {
        if tape.value(v).rows() != n {
            return Err(Error::shape(
                "prototype_attraction",
                format!(
                    "{} feature rows for {n} prototype ids",
                    tape.value(v).rows()
                ),
            ));
        }
    }
    let mut group = vec![0usize; c];
    for &k in prototype_ids {
        if k >= c {
            return Err(Error::Input(format!(
                "prototype id {k} out of range for {c}"
            )));
        }
        group[k] += 1;
    }
    let mut weights = vec![0.0; n * c];
    for (i, &k) in prototype_ids.iter().enumerate() {
        weights[i * c + k] = 1.0 / (2.0 * group[k] as f64);
    }
    let w = tape.constant(Tensor::matrix(n, c, weights)?);
    let mut terms = Vec::with_capacity(2);
    for feats in [f_v, f_ts] {
        let cos = tape.cosine_sim_matrix(feats, m)?;
        let cos = tape.scale(cos, 1.0 / tau2);
        let e = tape.exp(cos)?;
        let weighted = tape.mul(e, w)?;
        terms.push(tape.sum(weighted));
    }
    tape.add(terms[0], terms[1])
}

/// `Σ_{k≠j} exp(cos(m_k, m_j)/τ)` over ordered pairs.
pub fn prototype_separation(tape: &mut Tape, m: Var, tau2: f64) -> Result<Var> {
    check_temperature("tau2", tau2)?;
    let c = tape.value(m).rows();
    let cos = tape.cosine_sim_matrix(m, m)?;
    let cos = tape.scale(cos, 1.0 / tau2);
    let e = tape.exp(cos)?;
    let mut mask = vec![1.0; c * c];
    for k in 0..c {
        mask[k * c + k] = 0.0;
    }
    let mask = tape.constant(Tensor::matrix(c, c, mask)?);
    let off = tape.mul(e, mask)?;
    Ok(tape.sum(off))
}

/// Prototype objective: `−attraction + λ1·separation` (or its negation for
/// [`ProtSign::AsPrinted`]).
#[allow(clippy::too_many_arguments)]
pub fn loss_prot(
    tape: &mut Tape,
    f_v: Var,
    f_ts: Var,
    prototype_ids: &[usize],
    m: Var,
    tau2: f64,
    lambda1: f64,
    sign: ProtSign,
) -> Result<Var> {
    crate::probe::record_prototype_call();
    let attract = prototype_attraction(tape, f_v, f_ts, prototype_ids, m, tau2)?;
    let sep = prototype_separation(tape, m, tau2)?;
    let sep = tape.scale(sep, lambda1);
    match sign {
        ProtSign::Corrected => tape.sub(sep, attract),
        ProtSign::AsPrinted => tape.sub(attract, sep),
    }
}

/// `−(1/n) Σ log(max(p_i[y_i], ε))`.
pub fn cross_entropy_probs(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = (tape.value(probs).rows(), tape.value(probs).cols());
    if labels.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    let mut onehot = vec![0.0; n * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Input(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        onehot[i * k + y] = 1.0;
    }
    let y = tape.constant(Tensor::matrix(n, k, onehot)?);
    let logp = tape.log_floor(probs, LOG_FLOOR)?;
    let picked = tape.mul(logp, y)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / n as f64))
}

/// `(λ2/C) Σ_k ||m_k − anchor_k||₂`.
pub fn anchor_regularizer(tape: &mut Tape, m: Var, anchors: Var, lambda2: f64) -> Result<Var> {
    let c = tape.value(m).rows();
    let d = tape.sub(m, anchors)?;
    let norms = tape.row_norms(d);
    let s = tape.sum(norms);
    Ok(tape.scale(s, lambda2 / c as f64))
}

/// Cross-entropy plus the anchor regularizer.
pub fn loss_reg_ce(
    tape: &mut Tape,
    probs: Var,
    labels: &[usize],
    m: Var,
    anchors: Var,
    lambda2: f64,
) -> Result<Var> {
    let ce = cross_entropy_probs(tape, probs, labels)?;
    let reg = anchor_regularizer(tape, m, anchors, lambda2)?;
    tape.add(ce, reg)
}

/// The linear head `φ`, initialized to zero (uniform predictions).
#[derive(Debug, Clone)]
pub struct Classifier {
    pub linear: Linear,
}

impl Classifier {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, n_classes: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::zeros(store, &format!("{prefix}.head"), dim, n_classes, true)?,
        })
    }

    /// Random initialization, used by heads that start from noise.
    pub fn random<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        n_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, &format!("{prefix}.head"), dim, n_classes, true, rng)?,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.linear.d_out
    }

    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, f_v: Var) -> Result<Var> {
        crate::probe::record_classifier_call();
        self.linear.forward(tape, store, f_v)
    }

    pub fn classify(&self, tape: &mut Tape, store: &ParamStore, f_v: Var) -> Result<Var> {
        let z = self.logits(tape, store, f_v)?;
        tape.softmax_rows(z)
    }

    pub fn classify_vector(&self, store: &ParamStore, f_v: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, f_v.len(), f_v.to_vec())?);
        let p = self.classify(&mut tape, store, x)?;
        Ok(tape.value(p).values().to_vec())
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.linear.params()
    }
}

/// Which terms enter the total; a disabled term contributes a constant zero.
/// With `reg_ce` off the cross-entropy is kept and only the anchor
/// regularizer is dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossSwitches {
    pub ita: bool,
    pub prot: bool,
    pub reg_ce: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self {
            ita: true,
            prot: true,
            reg_ce: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_ita: f64,
    pub l_prot: f64,
    pub l_reg_ce: f64,
    pub l_total: f64,
}

/// Tape nodes of each term.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub l_ita: Var,
    pub l_prot: Var,
    pub l_reg_ce: Var,
    pub l_total: Var,
}

impl LossTerms {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            l_ita: tape.value(self.l_ita).item(),
            l_prot: tape.value(self.l_prot).item(),
            l_reg_ce: tape.value(self.l_reg_ce).item(),
            l_total: tape.value(self.l_total).item(),
        }
    }
}

/// Per-batch inputs to [`total_loss`], already on the tape.
#[derive(Debug, Clone, Copy)]
pub struct BatchFeatures<'a> {
    pub f_v: Var,
    pub f_ts: Var,
    pub probs: Var,
    pub labels: &'a [usize],
    pub prototype_ids: &'a [usize],
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Objective {
    pub weights: LossWeights,
    pub sign: ProtSign,
    pub switches: LossSwitches,
}

/// `L_total = L_ita + L_prot + L_reg_ce`.
pub fn total_loss(
    tape: &mut Tape,
    store: &ParamStore,
    prototypes: &PrototypeSet,
    batch: BatchFeatures<'_>,
    objective: &Objective,
) -> Result<LossTerms> {
    objective.weights.validate()?;
    let n = batch.labels.len();
    if n == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    if batch.prototype_ids.len() != n {
        return Err(Error::shape(
            "total_loss",
            format!("{} prototype ids for {n} labels", batch.prototype_ids.len()),
        ));
    }
    for (i, (&k, &y)) in batch.prototype_ids.iter().zip(batch.labels).enumerate() {
        let mapped = prototypes.class_of(k)?;
        if mapped != y {
            return Err(Error::Input(format!(
                "sample {i}: prototype {k} maps to class {mapped}, label is {y}"
            )));
        }
    }
    let w = objective.weights;
    let m = tape.param(store, prototypes.m);
    let anchors = tape.param(store, prototypes.anchors);
    let l_ita = if objective.switches.ita {
        loss_ita(tape, batch.f_v, batch.f_ts, w.tau1)?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };
    let l_prot = if objective.switches.prot {
        loss_prot(
            tape,
            batch.f_v,
            batch.f_ts,
            batch.prototype_ids,
            m,
            w.tau2,
            w.lambda1,
            objective.sign,
        )?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };
    let lambda2 = if objective.switches.reg_ce {
        w.lambda2
    } else {
        0.0
    };
    let l_reg_ce = loss_reg_ce(tape, batch.probs, batch.labels, m, anchors, lambda2)?;
    let partial = tape.add(l_ita, l_prot)?;
    let l_total = tape.add(partial, l_reg_ce)?;
    Ok(LossTerms {
        l_ita,
        l_prot,
        l_reg_ce,
        l_total,
    })
}

fn check_temperature(name: &str, t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Config(format!("{name} must be positive, got {t}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
