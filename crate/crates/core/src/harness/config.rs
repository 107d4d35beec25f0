//! Experiment configuration and its `[section]` / `key = value` file form.

use std::path::Path;

use serde::Deserialize;

use crate::baselines::{BaselineConfig, BaselineKind};
use crate::dpl::{LossWeights, ProtSign};
use crate::encoders::{AdamWConfig, TextEncoderConfig, VisionEncoderConfig};
use crate::error::{Error, Result};
use crate::synthbench::{PretrainConfig, ScenarioConfig, ScenarioKind};

/// The adaptation method being trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    DicopDpl,
    Baseline(BaselineKind),
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::DicopDpl,
        Method::Baseline(BaselineKind::LinearProbe),
        Method::Baseline(BaselineKind::ClipAdapter),
        Method::Baseline(BaselineKind::Coop),
        Method::Baseline(BaselineKind::Cocoop),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::DicopDpl => "dicop_dpl",
            Method::Baseline(k) => k.name(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!(
                    "unknown method `{s}` (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Leave-one-out variants of the main method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Full,
    /// Alignment loss removed.
    NoIta,
    /// Prototype loss removed.
    NoProt,
    /// Anchor regularizer removed, plain cross-entropy kept.
    PlainCe,
    /// Image context forced to zero.
    NoContext,
    /// Prompts reduced to `[CLS]` plus a class-name token.
    NoAttributes,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoIta,
        Variant::NoProt,
        Variant::PlainCe,
        Variant::NoContext,
        Variant::NoAttributes,
    ];

    pub const ABLATIONS: [Variant; 5] = [
        Variant::NoIta,
        Variant::NoProt,
        Variant::PlainCe,
        Variant::NoContext,
        Variant::NoAttributes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoIta => "wo_ita",
            Variant::NoProt => "wo_prot",
            Variant::PlainCe => "plain_ce",
            Variant::NoContext => "no_context",
            Variant::NoAttributes => "no_attributes",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How the vision encoder is adapted by the main method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FineTune {
    Lora { rank: usize, alpha: f64 },
    LayerDecay { beta: f64 },
}

/// Widths and depths of the two encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub text_layers: usize,
    pub vision_layers: usize,
    pub n_heads: usize,
    pub patch_size: usize,
    /// Seed of the encoder initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            text_layers: 2,
            vision_layers: 2,
            n_heads: 4,
            patch_size: 8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn text(&self, vocab_size: usize) -> TextEncoderConfig {
        TextEncoderConfig {
            vocab_size,
            max_seq_len: 32,
            embed_dim: self.embed_dim,
            n_layers: self.text_layers,
            n_heads: self.n_heads,
        }
    }

    pub fn vision(&self) -> VisionEncoderConfig {
        VisionEncoderConfig {
            image_size: crate::synthbench::IMAGE_SIZE,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            n_layers: self.vision_layers,
            n_heads: self.n_heads,
        }
    }

    /// Architecture summary used to tag checkpoints.
    pub fn describe(&self) -> String {
        format!(
            "h={} text_layers={} vision_layers={} heads={} patch={}",
            self.embed_dim, self.text_layers, self.vision_layers, self.n_heads, self.patch_size
        )
    }
}

/// Shared adaptation learning rate. A 5% few-shot subset of the desk split
/// fits in one batch, so 40 epochs are 40 optimizer steps; below this rate
/// the zero-initialized linear probe never leaves the majority prediction.
pub const DESK_ADAPT_LR: f64 = 0.05;

/// Shared adaptation budget and method settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub fine_tune: FineTune,
    pub fraction: f64,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::DicopDpl,
            epochs: 40,
            batch_size: 64,
            optimizer: AdamWConfig {
                lr: DESK_ADAPT_LR,
                ..AdamWConfig::default()
            },
            fine_tune: FineTune::Lora {
                rank: 4,
                alpha: 4.0,
            },
            fraction: 0.05,
            seeds: (0..10).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub prot_sign: ProtSign,
    /// Kind-independent baseline settings; `kind` is overwritten per run.
    pub baseline: BaselineConfig,
    pub sweep_fractions: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            prot_sign: ProtSign::Corrected,
            baseline: BaselineConfig::new(BaselineKind::LinearProbe),
            sweep_fractions: vec![0.01, 0.05, 0.10, 0.25],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.pretrain.validate()?;
        self.loss.validate()?;
        self.baseline.validate()?;
        let m = &self.model;
        if m.embed_dim == 0
            || m.text_layers == 0
            || m.vision_layers == 0
            || m.n_heads == 0
            || m.patch_size == 0
        {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        self.model.vision().validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let o = t.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) || !(o.weight_decay >= 0.0) {
            return Err(Error::Config(
                "lr must be positive and weight_decay non-negative".into(),
            ));
        }
        if t.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if !(t.fraction > 0.0 && t.fraction <= 1.0) {
            return Err(Error::Config(format!(
                "fraction must be in (0, 1], got {}",
                t.fraction
            )));
        }
        match t.fine_tune {
            FineTune::Lora { rank, alpha } => {
                if rank == 0 || !(alpha > 0.0) {
                    return Err(Error::Config("LoRA rank and alpha must be positive".into()));
                }
            }
            FineTune::LayerDecay { beta } => {
                if !(beta > 0.0 && beta <= 1.0) {
                    return Err(Error::Config(format!(
                        "layer decay must be in (0, 1], got {beta}"
                    )));
                }
            }
        }
        if self.sweep_fractions.is_empty() || self.sweep_fractions.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(
                "sweep fractions must be non-empty and strictly ascending".into(),
            ));
        }
        Ok(())
    }

    /// Parses the `[section]` / `key = value` format. Every key is optional;
    /// unknown sections and keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let file: FileConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let config = file.into_config()?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn baseline_for(&self, kind: BaselineKind) -> BaselineConfig {
        BaselineConfig {
            kind,
            ..self.baseline.clone()
        }
    }
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    scenario: ScenarioSection,
    #[serde(default)]
    model: ModelSection,
    #[serde(default)]
    pretrain: PretrainSection,
    #[serde(default)]
    train: TrainSection,
    #[serde(default)]
    loss: LossSection,
    #[serde(default)]
    baseline: BaselineSection,
    #[serde(default)]
    sweep: SweepSection,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ScenarioSection {
    kind: Option<String>,
    seed: Option<u64>,
    pretrain_pairs_per_class: Option<usize>,
    target_share: Option<f64>,
    images_per_prototype: Option<usize>,
    noise_std: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    embed_dim: Option<usize>,
    text_layers: Option<usize>,
    vision_layers: Option<usize>,
    n_heads: Option<usize>,
    patch_size: Option<usize>,
    seed: Option<u64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct PretrainSection {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    tau: Option<f64>,
    seed: Option<u64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    method: Option<String>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    fine_tune: Option<String>,
    lora_rank: Option<usize>,
    lora_alpha: Option<f64>,
    layer_decay: Option<f64>,
    fraction: Option<f64>,
    seeds: Option<Vec<u64>>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct LossSection {
    tau1: Option<f64>,
    tau2: Option<f64>,
    lambda1: Option<f64>,
    lambda2: Option<f64>,
    prot_sign: Option<String>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct BaselineSection {
    adapter_reduction: Option<usize>,
    adapter_blend: Option<f64>,
    context_len: Option<usize>,
    meta_reduction: Option<usize>,
    tau: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SweepSection {
    fractions: Option<Vec<f64>>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl FileConfig {
    fn into_config(self) -> Result<ExperimentConfig> {
        let mut c = ExperimentConfig::default();

        let s = self.scenario;
        if let Some(kind) = s.kind {
            c.scenario.kind = ScenarioKind::parse(&kind)?;
        }
        set(&mut c.scenario.seed, s.seed);
        set(
            &mut c.scenario.pretrain_pairs_per_class,
            s.pretrain_pairs_per_class,
        );
        set(&mut c.scenario.target_share, s.target_share);
        set(&mut c.scenario.images_per_prototype, s.images_per_prototype);
        set(&mut c.scenario.noise_std, s.noise_std);

        let m = self.model;
        set(&mut c.model.embed_dim, m.embed_dim);
        set(&mut c.model.text_layers, m.text_layers);
        set(&mut c.model.vision_layers, m.vision_layers);
        set(&mut c.model.n_heads, m.n_heads);
        set(&mut c.model.patch_size, m.patch_size);
        set(&mut c.model.seed, m.seed);

        let p = self.pretrain;
        set(&mut c.pretrain.epochs, p.epochs);
        set(&mut c.pretrain.batch_size, p.batch_size);
        set(&mut c.pretrain.lr, p.lr);
        set(&mut c.pretrain.tau, p.tau);
        set(&mut c.pretrain.seed, p.seed);

        let t = self.train;
        if let Some(method) = t.method {
            c.train.method = Method::parse(&method)?;
        }
        set(&mut c.train.epochs, t.epochs);
        set(&mut c.train.batch_size, t.batch_size);
        set(&mut c.train.optimizer.lr, t.lr);
        set(&mut c.train.optimizer.weight_decay, t.weight_decay);
        set(&mut c.train.fraction, t.fraction);
        set(&mut c.train.seeds, t.seeds);
        let (mut rank, mut alpha, mut beta) = (4, 4.0, 0.9);
        set(&mut rank, t.lora_rank);
        set(&mut alpha, t.lora_alpha);
        set(&mut beta, t.layer_decay);
        c.train.fine_tune = match t.fine_tune.as_deref().unwrap_or("lora") {
            "lora" => FineTune::Lora { rank, alpha },
            "layer_decay" => FineTune::LayerDecay { beta },
            other => {
                return Err(Error::Config(format!(
                    "unknown fine_tune `{other}` (expected lora or layer_decay)"
                )))
            }
        };

        let l = self.loss;
        set(&mut c.loss.tau1, l.tau1);
        set(&mut c.loss.tau2, l.tau2);
        set(&mut c.loss.lambda1, l.lambda1);
        set(&mut c.loss.lambda2, l.lambda2);
        c.prot_sign = match l.prot_sign.as_deref().unwrap_or("corrected") {
            "corrected" => ProtSign::Corrected,
            "as_printed" => ProtSign::AsPrinted,
            other => {
                return Err(Error::Config(format!(
                    "unknown prot_sign `{other}` (expected corrected or as_printed)"
                )))
            }
        };

        let b = self.baseline;
        set(&mut c.baseline.adapter_reduction, b.adapter_reduction);
        set(&mut c.baseline.adapter_blend, b.adapter_blend);
        set(&mut c.baseline.context_len, b.context_len);
        set(&mut c.baseline.meta_reduction, b.meta_reduction);
        set(&mut c.baseline.tau, b.tau);

        set(&mut c.sweep_fractions, self.sweep.fractions);
        Ok(c)
    }
}
