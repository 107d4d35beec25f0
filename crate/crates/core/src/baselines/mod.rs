//! Comparison methods: linear probing, CLIP-Adapter, CoOp and CoCoOp heads
//! on top of the frozen encoders.

use rand::Rng;

use crate::autodiff::{Axis, ParamId, ParamStore, Tape, Tensor, Var};
use crate::dpl::Classifier;
use crate::encoders::layers::{normal, INIT_STD};
use crate::encoders::{Linear, TextEncoder};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BaselineKind {
    LinearProbe,
    ClipAdapter,
    Coop,
    Cocoop,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::LinearProbe,
        BaselineKind::ClipAdapter,
        BaselineKind::Coop,
        BaselineKind::Cocoop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::LinearProbe => "linear_probe",
            BaselineKind::ClipAdapter => "clip_adapter",
            BaselineKind::Coop => "coop",
            BaselineKind::Cocoop => "cocoop",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Kind-specific settings. Training budget (epochs, batch, lr) is shared with
/// the main method and lives in the experiment config.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    /// CLIP-Adapter bottleneck is `h / adapter_reduction`.
    pub adapter_reduction: usize,
    pub adapter_blend: f64,
    pub context_len: usize,
    /// CoCoOp meta-net bottleneck is `h / meta_reduction`.
    pub meta_reduction: usize,
    pub tau: f64,
}

impl BaselineConfig {
    pub fn new(kind: BaselineKind) -> Self {
        Self {
            kind,
            adapter_reduction: 4,
            adapter_blend: 0.2,
            context_len: 4,
            meta_reduction: 16,
            tau: 0.07,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.adapter_blend) {
            return Err(Error::Config(format!(
                "adapter blend must be in [0, 1], got {}",
                self.adapter_blend
            )));
        }
        if self.adapter_reduction == 0 || self.meta_reduction == 0 {
            return Err(Error::Config(
                "bottleneck reductions must be positive".into(),
            ));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Softmax over the `C` prototype logits, summed into `K` class
/// probabilities through the prototype → class map.
pub fn aggregate_to_classes(
    tape: &mut Tape,
    logits: Var,
    class_map: &[usize],
    n_classes: usize,
) -> Result<Var> {
    let c = tape.value(logits).cols();
    if class_map.len() != c {
        return Err(Error::shape(
            "aggregate_to_classes",
            format!("{c} logits for a class map of {}", class_map.len()),
        ));
    }
    let p = tape.softmax_rows(logits)?;
    if c == n_classes && class_map.iter().enumerate().all(|(i, &k)| i == k) {
        return Ok(p);
    }
    let mut map = vec![0.0; c * n_classes];
    for (i, &k) in class_map.iter().enumerate() {
        if k >= n_classes {
            return Err(Error::Input(format!(
                "class map entry {k} out of range for {n_classes}"
            )));
        }
        map[i * n_classes + k] = 1.0;
    }
    let map = tape.constant(Tensor::matrix(c, n_classes, map)?);
    tape.matmul(p, map)
}

/// Only a `K`-way affine head on frozen features.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub head: Classifier,
}

impl LinearProbe {
    pub fn new(store: &mut ParamStore, dim: usize, n_classes: usize) -> Result<Self> {
        Ok(Self {
            head: Classifier::new(store, "probe", dim, n_classes)?,
        })
    }

    pub fn probs(&self, tape: &mut Tape, store: &ParamStore, f_v: Var) -> Result<Var> {
        self.head.classify(tape, store, f_v)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.head.params()
    }
}

/// Residual bottleneck adapter on image features, classified by similarity
/// to fixed prompt features.
#[derive(Debug, Clone)]
pub struct ClipAdapter {
    pub down: Linear,
    pub up: Linear,
    pub blend: f64,
    pub tau: f64,
    prompt_features: Tensor,
    class_map: Vec<usize>,
    n_classes: usize,
}

impl ClipAdapter {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: &BaselineConfig,
        prompt_features: Tensor,
        class_map: Vec<usize>,
        n_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let h = prompt_features.cols();
        let width = h / config.adapter_reduction;
        if width == 0 {
            return Err(Error::Config(format!(
                "adapter bottleneck is empty for width {h}"
            )));
        }
        Ok(Self {
            down: Linear::new(store, "adapter.down", h, width, false, rng)?,
            up: Linear::new(store, "adapter.up", width, h, false, rng)?,
            blend: config.adapter_blend,
            tau: config.tau,
            prompt_features,
            class_map,
            n_classes,
        })
    }

    /// `f' = α·A(f_v) + (1 − α)·f_v`.
    pub fn adapt(&self, tape: &mut Tape, store: &ParamStore, f_v: Var) -> Result<Var> {
        let a = self.down.forward(tape, store, f_v)?;
        let a = tape.relu(a);
        let a = self.up.forward(tape, store, a)?;
        let a = tape.scale(a, self.blend);
        let keep = tape.scale(f_v, 1.0 - self.blend);
        tape.add(a, keep)
    }

    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, f_v: Var) -> Result<Var> {
        let f = self.adapt(tape, store, f_v)?;
        let t = tape.constant(self.prompt_features.clone());
        let s = tape.cosine_sim_matrix(f, t)?;
        Ok(tape.scale(s, 1.0 / self.tau))
    }

    pub fn probs(&self, tape: &mut Tape, store: &ParamStore, f_v: Var) -> Result<Var> {
        let z = self.logits(tape, store, f_v)?;
        aggregate_to_classes(tape, z, &self.class_map, self.n_classes)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.down.params();
        v.extend(self.up.params());
        v
    }
}

/// How CoOp context vectors start.
#[derive(Debug, Clone, PartialEq)]
pub enum ContextInit {
    Random,
    /// Copies of these words' token embeddings (one word per context slot).
    Words(Vec<usize>),
}

/// Learned context tokens shared by every class prompt
/// `[CLS] ctx_1 … ctx_M <class>`.
#[derive(Debug, Clone)]
pub struct Coop {
    pub context: Option<ParamId>,
    pub context_len: usize,
    pub class_tokens: Vec<usize>,
    pub tau: f64,
    class_map: Vec<usize>,
    n_classes: usize,
}

impl Coop {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        text: &TextEncoder,
        prefix: &str,
        context_len: usize,
        init: &ContextInit,
        class_tokens: Vec<usize>,
        class_map: Vec<usize>,
        n_classes: usize,
        tau: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if class_tokens.len() != class_map.len() {
            return Err(Error::Config(
                "one class token per prototype is required".into(),
            ));
        }
        let h = text.config.embed_dim;
        let context = if context_len == 0 {
            None
        } else {
            let values = match init {
                ContextInit::Random => normal(rng, context_len * h, INIT_STD),
                ContextInit::Words(words) => {
                    if words.len() != context_len {
                        return Err(Error::Config(format!(
                            "{} init words for {context_len} context slots",
                            words.len()
                        )));
                    }
                    let table = store.value(text.tok_emb);
                    let mut v = Vec::with_capacity(context_len * h);
                    for &w in words {
                        if w >= table.rows() {
                            return Err(Error::Input(format!(
                                "init word id {w} out of vocabulary"
                            )));
                        }
                        v.extend_from_slice(table.row(w));
                    }
                    v
                }
            };
            Some(store.add(
                format!("{prefix}.context"),
                Tensor::matrix(context_len, h, values)?,
                true,
            )?)
        };
        Ok(Self {
            context,
            context_len,
            class_tokens,
            tau,
            class_map,
            n_classes,
        })
    }

    /// Embedded prompts for every class with an optional `1×h` shift added
    /// to each context vector.
    fn embedded_prompts(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        text: &TextEncoder,
        shift: Option<Var>,
    ) -> Result<Vec<Var>> {
        let ctx = match (self.context, shift) {
            (Some(id), Some(s)) => {
                let c = tape.param(store, id);
                Some(tape.add(c, s)?)
            }
            (Some(id), None) => Some(tape.param(store, id)),
            (None, _) => None,
        };
        self.class_tokens
            .iter()
            .map(|&t| text.embed_with_context(tape, store, ctx, t))
            .collect()
    }

    /// `C×h` prompt features.
    pub fn prompt_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        text: &TextEncoder,
    ) -> Result<Var> {
        crate::probe::record_prompt_encode();
        let seqs = self.embedded_prompts(tape, store, text, None)?;
        text.encode_embedded(tape, store, &seqs)
    }

    pub fn logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        text: &TextEncoder,
        f_v: Var,
    ) -> Result<Var> {
        let t = self.prompt_features(tape, store, text)?;
        let s = tape.cosine_sim_matrix(f_v, t)?;
        Ok(tape.scale(s, 1.0 / self.tau))
    }

    pub fn probs(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        text: &TextEncoder,
        f_v: Var,
    ) -> Result<Var> {
        let z = self.logits(tape, store, text, f_v)?;
        aggregate_to_classes(tape, z, &self.class_map, self.n_classes)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.context.into_iter().collect()
    }
}

/// CoOp with every context vector shifted by a per-image meta-net output.
#[derive(Debug, Clone)]
pub struct Cocoop {
    pub coop: Coop,
    pub meta_down: Linear,
    pub meta_up: Linear,
}

impl Cocoop {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        text: &TextEncoder,
        config: &BaselineConfig,
        init: &ContextInit,
        class_tokens: Vec<usize>,
        class_map: Vec<usize>,
        n_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let h = text.config.embed_dim;
        let width = h / config.meta_reduction;
        if width == 0 {
            return Err(Error::Config(format!(
                "meta-net bottleneck is empty for width {h}"
            )));
        }
        let coop = Coop::new(
            store,
            text,
            "cocoop",
            config.context_len,
            init,
            class_tokens,
            class_map,
            n_classes,
            config.tau,
            rng,
        )?;
        Ok(Self {
            coop,
            meta_down: Linear::new(store, "cocoop.meta.down", h, width, true, rng)?,
            meta_up: Linear::new(store, "cocoop.meta.up", width, h, true, rng)?,
        })
    }

    pub fn meta_width(&self) -> usize {
        self.meta_down.d_out
    }

    pub fn meta(&self, tape: &mut Tape, store: &ParamStore, f_v: Var) -> Result<Var> {
        let x = self.meta_down.forward(tape, store, f_v)?;
        let x = tape.relu(x);
        self.meta_up.forward(tape, store, x)
    }

    /// `n×C` logits; row `i` uses prompts conditioned on image `i`.
    pub fn logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        text: &TextEncoder,
        f_v: Var,
    ) -> Result<Var> {
        crate::probe::record_prompt_encode();
        let n = tape.value(f_v).rows();
        let c = self.coop.class_tokens.len();
        let shifts = self.meta(tape, store, f_v)?;
        let mut seqs = Vec::with_capacity(n * c);
        for i in 0..n {
            let s = tape.slice(shifts, Axis::Rows, i, 1)?;
            seqs.extend(self.coop.embedded_prompts(tape, store, text, Some(s))?);
        }
        let t = text.encode_embedded(tape, store, &seqs)?;
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let v = tape.slice(f_v, Axis::Rows, i, 1)?;
            let ti = tape.slice(t, Axis::Rows, i * c, c)?;
            rows.push(tape.cosine_sim_matrix(v, ti)?);
        }
        let s = tape.concat(&rows, Axis::Rows)?;
        Ok(tape.scale(s, 1.0 / self.coop.tau))
    }

    pub fn probs(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        text: &TextEncoder,
        f_v: Var,
    ) -> Result<Var> {
        let z = self.logits(tape, store, text, f_v)?;
        aggregate_to_classes(tape, z, &self.coop.class_map, self.coop.n_classes)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.coop.params();
        v.extend(self.meta_down.params());
        v.extend(self.meta_up.params());
        v
    }
}
