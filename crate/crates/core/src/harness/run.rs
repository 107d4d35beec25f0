//! Pretrained models, per-method adaptation models and the seeded training
//! loop with best-validation model selection.

use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{round_to_f32, Checkpoint};
use super::config::{ExperimentConfig, FineTune, Method, Variant};
use super::metrics::{argmax, compute_metrics, MetricSet};
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::baselines::{BaselineKind, ClipAdapter, Cocoop, ContextInit, Coop, LinearProbe};
use crate::dicop::{
    build_prompt, class_name_prompt, encode_contextual_prompts, encode_text_prompts,
    ContextProjector,
};
use crate::dpl::{
    cross_entropy_probs, total_loss, BatchFeatures, Classifier, LossBreakdown, LossSwitches,
    Objective, PrototypeSet,
};
use crate::encoders::{AdamW, DualEncoder, TextEncoder, TokenSequence, VisionEncoder};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::probe::Counters;
use crate::synthbench::{pretrain_clip, PretrainReport, Sample, Scenario, Split};

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 1 << 20;
/// Images per forward pass when embedding without gradients.
const EMBED_CHUNK: usize = 64;
/// Temperature of the zero-shot softmax.
const ZERO_SHOT_TAU: f64 = 0.07;

/// Encoders after contrastive pretraining, rounded to checkpoint precision.
#[derive(Debug, Clone)]
pub struct PretrainedModel {
    pub encoders: DualEncoder,
}

impl PretrainedModel {
    pub fn fingerprint(config: &ExperimentConfig, vocab_size: usize) -> String {
        format!("pretrained {} vocab={vocab_size}", config.model.describe())
    }

    /// Randomly initialized encoders with the configured architecture.
    pub fn initial(config: &ExperimentConfig, vocab_size: usize) -> Result<Self> {
        Ok(Self {
            encoders: DualEncoder::new(
                config.model.text(vocab_size),
                config.model.vision(),
                config.model.seed,
            )?,
        })
    }

    pub fn train(scenario: &Scenario, config: &ExperimentConfig) -> Result<(Self, PretrainReport)> {
        let mut model = Self::initial(config, scenario.vocab.len())?;
        let report = pretrain_clip(&mut model.encoders, &scenario.pretrain, &config.pretrain)?;
        round_to_f32(&mut model.encoders.store);
        Ok((model, report))
    }

    pub fn save(&self, path: &Path, config: &ExperimentConfig) -> Result<()> {
        let vocab = self.encoders.text.config.vocab_size;
        Checkpoint::from_store(&self.encoders.store, &Self::fingerprint(config, vocab)).save(path)
    }

    pub fn load(path: &Path, config: &ExperimentConfig, vocab_size: usize) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Input(format!(
                "no pretrained checkpoint at {}; run the `pretrain` command first",
                path.display()
            )));
        }
        let checkpoint = Checkpoint::load(path)?;
        let mut model = Self::initial(config, vocab_size)?;
        checkpoint.apply_to(
            &mut model.encoders.store,
            &Self::fingerprint(config, vocab_size),
        )?;
        model.encoders.freeze_text();
        Ok(model)
    }
}

/// Which prompts a zero-shot classifier compares images against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZeroShotPrompts {
    /// `[CLS] <class>`: the standard zero-shot setting.
    ClassName,
    /// The attribute descriptions.
    Attributes,
}

/// Zero-shot predictions of the pretrained model on the test split: each
/// image goes to the class of its most similar prototype prompt.
pub fn zero_shot_metrics(
    pretrained: &PretrainedModel,
    scenario: &Scenario,
    kind: ZeroShotPrompts,
) -> Result<MetricSet> {
    let enc = &pretrained.encoders;
    let d = &scenario.dataset;
    let prompts = d
        .descriptors
        .iter()
        .map(|desc| match kind {
            ZeroShotPrompts::ClassName => class_name_prompt(&scenario.vocab, desc.class_id),
            ZeroShotPrompts::Attributes => build_prompt(&scenario.vocab, desc),
        })
        .collect::<Result<Vec<_>>>()?;
    let images: Vec<&Image> = d.test.iter().map(|s| &s.image).collect();
    let sims =
        crate::synthbench::zero_shot_scores(&enc.store, &enc.text, &enc.vision, &images, &prompts)?;
    let mut scores = Vec::with_capacity(sims.len());
    let mut predictions = Vec::with_capacity(sims.len());
    for row in &sims {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = row
            .iter()
            .map(|s| ((s - max) / ZERO_SHOT_TAU).exp())
            .collect();
        let z: f64 = w.iter().sum();
        let mut class_p = vec![0.0; d.n_classes];
        for (k, wk) in w.iter().enumerate() {
            class_p[d.class_map[k]] += wk / z;
        }
        predictions.push(d.class_map[argmax(row)]);
        scores.push(class_p);
    }
    let labels: Vec<usize> = d.test.iter().map(|s| s.class_id).collect();
    compute_metrics(&scores, &predictions, &labels, d.n_classes)
}

/// Main-method components on top of the encoders.
#[derive(Debug, Clone)]
pub struct DicopHead {
    pub projector: ContextProjector,
    pub prototypes: PrototypeSet,
    pub classifier: Classifier,
    /// One prompt per prototype.
    pub prompts: Vec<TokenSequence>,
    pub objective: Objective,
    /// When false the projector output is replaced by zeros.
    pub use_context: bool,
}

#[derive(Debug, Clone)]
pub enum Head {
    Dicop(Box<DicopHead>),
    LinearProbe(LinearProbe),
    ClipAdapter(ClipAdapter),
    Coop(Coop),
    Cocoop(Cocoop),
}

/// Encoders plus a method head; every parameter lives in `encoders.store`.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    pub method: Method,
    pub variant: Variant,
    pub encoders: DualEncoder,
    pub head: Head,
}

impl AdaptedModel {
    pub fn store(&self) -> &ParamStore {
        &self.encoders.store
    }

    pub fn fingerprint(
        config: &ExperimentConfig,
        method: Method,
        variant: Variant,
        vocab_size: usize,
    ) -> String {
        let b = &config.baseline;
        format!(
            "adapted method={method} variant={variant} {} vocab={vocab_size} fine_tune={:?} \
             adapter={} context={} meta={}",
            config.model.describe(),
            config.train.fine_tune,
            b.adapter_reduction,
            b.context_len,
            b.meta_reduction
        )
    }

    /// Class probabilities for already-embedded images.
    fn probs_from_features(&self, tape: &mut Tape, f_v: Var) -> Result<Var> {
        let store = &self.encoders.store;
        let text = &self.encoders.text;
        match &self.head {
            Head::Dicop(h) => h.classifier.classify(tape, store, f_v),
            Head::LinearProbe(p) => p.probs(tape, store, f_v),
            Head::ClipAdapter(a) => a.probs(tape, store, f_v),
            Head::Coop(c) => c.probs(tape, store, text, f_v),
            Head::Cocoop(c) => c.probs(tape, store, text, f_v),
        }
    }

    /// Class probabilities for images. Only the vision encoder and the head
    /// run; for the main method the head is the linear classifier alone.
    pub fn predict_images(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let features =
            self.encoders
                .vision
                .embed_images(&self.encoders.store, images, EMBED_CHUNK)?;
        self.predict_features(&features)
    }

    pub fn predict_features(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(features.len());
        for part in features.chunks(EMBED_CHUNK) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_rows(part)?);
            let p = self.probs_from_features(&mut tape, x)?;
            let p = tape.value(p);
            out.extend((0..p.rows()).map(|i| p.row(i).to_vec()));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, config: &ExperimentConfig) -> Result<()> {
        let vocab = self.encoders.text.config.vocab_size;
        Checkpoint::from_store(
            &self.encoders.store,
            &Self::fingerprint(config, self.method, self.variant, vocab),
        )
        .save(path)
    }
}

/// Result of one seed of one (method, variant, fraction) run.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub n_train: usize,
    /// Epoch whose parameters were kept (0 = initialized model).
    pub best_epoch: usize,
    /// Validation weighted F1 after each epoch, starting with epoch 0.
    pub val_weighted_f1: Vec<f64>,
    /// Mean loss terms per training epoch.
    pub loss_curve: Vec<LossBreakdown>,
    /// Mean prototype-to-anchor distance after each epoch (main method).
    pub anchor_distance: Vec<f64>,
    pub test: MetricSet,
    /// Code paths exercised while scoring the test split.
    pub inference: Counters,
    /// Text encoder and prototype anchors bit-identical after adaptation.
    pub frozen_intact: bool,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub method: Method,
    pub variant: Variant,
    pub fraction: f64,
    pub seeds: Vec<SeedResult>,
    pub wall_time: Duration,
}

impl RunResult {
    pub fn weighted_f1s(&self) -> Vec<f64> {
        self.seeds.iter().map(|s| s.test.weighted_f1).collect()
    }

    pub fn mean_weighted_f1(&self) -> f64 {
        mean(&self.weighted_f1s())
    }
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Frozen vision features of every split, shared by the baselines.
#[derive(Debug, Clone)]
struct SplitFeatures {
    train: Vec<Vec<f64>>,
    val: Vec<Vec<f64>>,
    test: Vec<Vec<f64>>,
}

/// A scenario, its pretrained encoders and the experiment settings.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub scenario: Scenario,
    pub pretrained: PretrainedModel,
    features: OnceLock<SplitFeatures>,
}

impl Experiment {
    pub fn new(
        config: ExperimentConfig,
        scenario: Scenario,
        pretrained: PretrainedModel,
    ) -> Result<Self> {
        config.validate()?;
        let vocab = scenario.vocab.len();
        if pretrained.encoders.text.config.vocab_size != vocab {
            return Err(Error::Config(format!(
                "pretrained text encoder has {} tokens, the scenario vocabulary {vocab}",
                pretrained.encoders.text.config.vocab_size
            )));
        }
        Ok(Self {
            config,
            scenario,
            pretrained,
            features: OnceLock::new(),
        })
    }

    fn frozen_features(&self) -> Result<&SplitFeatures> {
        if let Some(f) = self.features.get() {
            return Ok(f);
        }
        let enc = &self.pretrained.encoders;
        let embed = |samples: &[Sample]| {
            let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
            enc.vision.embed_images(&enc.store, &images, EMBED_CHUNK)
        };
        let d = &self.scenario.dataset;
        let f = SplitFeatures {
            train: embed(&d.train)?,
            val: embed(&d.val)?,
            test: embed(&d.test)?,
        };
        Ok(self.features.get_or_init(|| f))
    }

    /// Prompts of every prototype: attribute prompts, or `[CLS]` plus a
    /// class-name token when attributes are ablated.
    pub fn prompts(&self, variant: Variant) -> Result<Vec<TokenSequence>> {
        let vocab = &self.scenario.vocab;
        self.scenario
            .dataset
            .descriptors
            .iter()
            .map(|d| match variant {
                Variant::NoAttributes => class_name_prompt(vocab, d.class_id),
                _ => build_prompt(vocab, d),
            })
            .collect()
    }

    /// Builds the seeded initial model for a method and variant.
    pub fn build_model(&self, method: Method, variant: Variant, seed: u64) -> Result<AdaptedModel> {
        if variant != Variant::Full && method != Method::DicopDpl {
            return Err(Error::Config(format!(
                "variant {variant} applies only to dicop_dpl"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let mut enc = self.pretrained.encoders.clone();
        enc.freeze_text();
        let d = &self.scenario.dataset;
        let h = enc.embed_dim();
        let class_map = d.class_map.clone();
        let head = match method {
            Method::DicopDpl => {
                match self.config.train.fine_tune {
                    FineTune::Lora { rank, alpha } => {
                        let DualEncoder { store, vision, .. } = &mut enc;
                        vision.attach_lora(store, rank, alpha, &mut rng)?;
                    }
                    FineTune::LayerDecay { beta } => {
                        enc.store.set_trainable_prefix(VisionEncoder::PREFIX, true);
                        enc.vision.apply_layer_decay(&mut enc.store, beta)?;
                    }
                }
                let prompts = self.prompts(variant)?;
                let anchors = text_features(&enc.store, &enc.text, &prompts)?;
                let projector = ContextProjector::new(&mut enc.store, h, h, &mut rng)?;
                let prototypes =
                    PrototypeSet::new(&mut enc.store, &anchors, class_map, d.n_classes)?;
                let classifier = Classifier::new(&mut enc.store, "classifier", h, d.n_classes)?;
                let switches = LossSwitches {
                    ita: variant != Variant::NoIta,
                    prot: variant != Variant::NoProt,
                    reg_ce: variant != Variant::PlainCe,
                };
                Head::Dicop(Box::new(DicopHead {
                    projector,
                    prototypes,
                    classifier,
                    prompts,
                    objective: Objective {
                        weights: self.config.loss,
                        sign: self.config.prot_sign,
                        switches,
                    },
                    use_context: variant != Variant::NoContext,
                }))
            }
            Method::Baseline(kind) => {
                enc.freeze_vision();
                let bc = self.config.baseline_for(kind);
                let class_tokens = d
                    .descriptors
                    .iter()
                    .map(|desc| self.scenario.vocab.class_name_token(desc.class_id))
                    .collect::<Result<Vec<_>>>()?;
                match kind {
                    BaselineKind::LinearProbe => {
                        Head::LinearProbe(LinearProbe::new(&mut enc.store, h, d.n_classes)?)
                    }
                    BaselineKind::ClipAdapter => {
                        let prompts = self.prompts(Variant::NoAttributes)?;
                        let features =
                            Tensor::from_rows(&text_features(&enc.store, &enc.text, &prompts)?)?;
                        Head::ClipAdapter(ClipAdapter::new(
                            &mut enc.store,
                            &bc,
                            features,
                            class_map,
                            d.n_classes,
                            &mut rng,
                        )?)
                    }
                    BaselineKind::Coop => {
                        let DualEncoder { store, text, .. } = &mut enc;
                        Head::Coop(Coop::new(
                            store,
                            text,
                            "coop",
                            bc.context_len,
                            &ContextInit::Random,
                            class_tokens,
                            class_map,
                            d.n_classes,
                            bc.tau,
                            &mut rng,
                        )?)
                    }
                    BaselineKind::Cocoop => {
                        let DualEncoder { store, text, .. } = &mut enc;
                        Head::Cocoop(Cocoop::new(
                            store,
                            text,
                            &bc,
                            &ContextInit::Random,
                            class_tokens,
                            class_map,
                            d.n_classes,
                            &mut rng,
                        )?)
                    }
                }
            }
        };
        Ok(AdaptedModel {
            method,
            variant,
            encoders: enc,
            head,
        })
    }

    /// Rebuilds a model and fills it from an adapted checkpoint.
    pub fn load_adapted(
        &self,
        path: &Path,
        method: Method,
        variant: Variant,
    ) -> Result<AdaptedModel> {
        let checkpoint = Checkpoint::load(path)?;
        let mut model = self.build_model(method, variant, 0)?;
        let fp =
            AdaptedModel::fingerprint(&self.config, method, variant, self.scenario.vocab.len());
        checkpoint.apply_to(&mut model.encoders.store, &fp)?;
        Ok(model)
    }

    /// One run per configured seed.
    pub fn run_adaptation(
        &self,
        method: Method,
        variant: Variant,
        fraction: f64,
    ) -> Result<RunResult> {
        let start = Instant::now();
        let seeds = self
            .config
            .train
            .seeds
            .iter()
            .map(|&seed| {
                self.run_seed(method, variant, fraction, seed)
                    .map(|(r, _)| r)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RunResult {
            method,
            variant,
            fraction,
            seeds,
            wall_time: start.elapsed(),
        })
    }

    /// Adapts one seeded model and scores the selected epoch on the test
    /// split.
    pub fn run_seed(
        &self,
        method: Method,
        variant: Variant,
        fraction: f64,
        seed: u64,
    ) -> Result<(SeedResult, AdaptedModel)> {
        let d = &self.scenario.dataset;
        let train_idx = d.few_shot(fraction, seed)?;
        let mut model = self.build_model(method, variant, seed)?;
        let features = match method {
            Method::DicopDpl => None,
            Method::Baseline(_) => Some(self.frozen_features()?),
        };
        let frozen_before = frozen_snapshot(&model);
        let train_cfg = &self.config.train;
        let mut opt = AdamW::new(train_cfg.optimizer);

        let mut val_curve = vec![self.val_weighted_f1(&model, features)?];
        let mut best = (val_curve[0], 0usize, trainable_snapshot(model.store()));
        let mut loss_curve = Vec::with_capacity(train_cfg.epochs);
        let mut anchor_distance = Vec::new();
        for epoch in 1..=train_cfg.epochs {
            let mut order = train_idx.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(SHUFFLE_STREAM + epoch as u64);
            order.shuffle(&mut rng);
            let mut sum = LossBreakdown::default();
            let mut batches = 0usize;
            for batch in order.chunks(train_cfg.batch_size) {
                let b = self.train_step(&mut model, batch, features, &mut opt)?;
                sum.l_ita += b.l_ita;
                sum.l_prot += b.l_prot;
                sum.l_reg_ce += b.l_reg_ce;
                sum.l_total += b.l_total;
                batches += 1;
            }
            let nb = batches as f64;
            loss_curve.push(LossBreakdown {
                l_ita: sum.l_ita / nb,
                l_prot: sum.l_prot / nb,
                l_reg_ce: sum.l_reg_ce / nb,
                l_total: sum.l_total / nb,
            });
            if let Head::Dicop(h) = &model.head {
                anchor_distance.push(h.prototypes.mean_anchor_distance(model.store()));
            }
            let v = self.val_weighted_f1(&model, features)?;
            val_curve.push(v);
            if v > best.0 {
                best = (v, epoch, trainable_snapshot(model.store()));
            }
            log::debug!(
                "{method}/{variant} seed {seed} epoch {epoch}: loss {:.4} val wF1 {v:.4}",
                sum.l_total / nb
            );
        }
        model.encoders.store.restore(&best.2);
        let frozen_intact = frozen_snapshot(&model) == frozen_before;

        let before = Counters::snapshot();
        let scores = match features {
            None => {
                let images: Vec<&Image> = d.test.iter().map(|s| &s.image).collect();
                model.predict_images(&images)?
            }
            Some(f) => model.predict_features(&f.test)?,
        };
        let inference = Counters::snapshot().since(before);
        let test = score(&scores, &d.test)?;
        Ok((
            SeedResult {
                seed,
                n_train: train_idx.len(),
                best_epoch: best.1,
                val_weighted_f1: val_curve,
                loss_curve,
                anchor_distance,
                test,
                inference,
                frozen_intact,
            },
            model,
        ))
    }

    /// Test-split metrics of an already adapted model.
    pub fn evaluate(&self, model: &AdaptedModel) -> Result<MetricSet> {
        let d = &self.scenario.dataset;
        let images: Vec<&Image> = d.test.iter().map(|s| &s.image).collect();
        score(&model.predict_images(&images)?, &d.test)
    }

    fn val_weighted_f1(
        &self,
        model: &AdaptedModel,
        features: Option<&SplitFeatures>,
    ) -> Result<f64> {
        let val = self.scenario.dataset.split(Split::Val);
        let scores = match features {
            None => {
                let images: Vec<&Image> = val.iter().map(|s| &s.image).collect();
                model.predict_images(&images)?
            }
            Some(f) => model.predict_features(&f.val)?,
        };
        Ok(score(&scores, val)?.weighted_f1)
    }

    fn train_step(
        &self,
        model: &mut AdaptedModel,
        batch: &[usize],
        features: Option<&SplitFeatures>,
        opt: &mut AdamW,
    ) -> Result<LossBreakdown> {
        let train = &self.scenario.dataset.train;
        let labels: Vec<usize> = batch.iter().map(|&i| train[i].class_id).collect();
        let mut tape = Tape::new();
        let (loss, breakdown) = {
            let store = &model.encoders.store;
            let text = &model.encoders.text;
            match (&model.head, features) {
                (Head::Dicop(h), _) => {
                    let images: Vec<&Image> = batch.iter().map(|&i| &train[i].image).collect();
                    let prototype_ids: Vec<usize> =
                        batch.iter().map(|&i| train[i].prototype_id).collect();
                    let f_v = model.encoders.vision.encode(&mut tape, store, &images)?;
                    let f_s = if h.use_context {
                        h.projector.project_context(&mut tape, store, f_v)?
                    } else {
                        let dim = model.encoders.embed_dim();
                        tape.constant(Tensor::zeros(vec![images.len(), dim]))
                    };
                    let f_ts = encode_contextual_prompts(
                        &mut tape,
                        store,
                        text,
                        &h.prompts,
                        &prototype_ids,
                        f_s,
                    )?;
                    let probs = h.classifier.classify(&mut tape, store, f_v)?;
                    let terms = total_loss(
                        &mut tape,
                        store,
                        &h.prototypes,
                        BatchFeatures {
                            f_v,
                            f_ts,
                            probs,
                            labels: &labels,
                            prototype_ids: &prototype_ids,
                        },
                        &h.objective,
                    )?;
                    (terms.l_total, terms.breakdown(&tape))
                }
                (_, Some(f)) => {
                    let rows: Vec<Vec<f64>> = batch.iter().map(|&i| f.train[i].clone()).collect();
                    let x = tape.constant(Tensor::from_rows(&rows)?);
                    let probs = model.probs_from_features(&mut tape, x)?;
                    let ce = cross_entropy_probs(&mut tape, probs, &labels)?;
                    let v = tape.value(ce).item();
                    (
                        ce,
                        LossBreakdown {
                            l_reg_ce: v,
                            l_total: v,
                            ..LossBreakdown::default()
                        },
                    )
                }
                (_, None) => {
                    return Err(Error::Contract(
                        "baseline training needs frozen features".into(),
                    ))
                }
            }
        };
        if !breakdown.l_total.is_finite() {
            return Err(Error::Divergence {
                last_finite_epoch: None,
            });
        }
        tape.backward(loss)?;
        let store = &mut model.encoders.store;
        store.zero_grads();
        store.accumulate_grads(&tape);
        opt.step(store)?;
        Ok(breakdown)
    }
}

/// Metrics of class-probability rows against the samples' labels.
fn score(scores: &[Vec<f64>], samples: &[Sample]) -> Result<MetricSet> {
    let predictions: Vec<usize> = scores.iter().map(|r| argmax(r)).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.class_id).collect();
    let n_classes = scores.first().map_or(0, Vec::len);
    compute_metrics(scores, &predictions, &labels, n_classes)
}

/// Text-only prompt features, one row per prompt.
pub fn text_features(
    store: &ParamStore,
    text: &TextEncoder,
    prompts: &[TokenSequence],
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let f = encode_text_prompts(&mut tape, store, text, prompts)?;
    let f = tape.value(f);
    Ok((0..f.rows()).map(|i| f.row(i).to_vec()).collect())
}

fn trainable_snapshot(store: &ParamStore) -> Vec<(ParamId, Vec<f64>)> {
    store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.tensor.values().to_vec()))
        .collect()
}

/// Bit patterns of the text encoder and the prototype anchors.
fn frozen_snapshot(model: &AdaptedModel) -> Vec<u64> {
    let store = model.store();
    let mut bits: Vec<u64> = store
        .iter()
        .filter(|(_, p)| p.name.starts_with(TextEncoder::PREFIX))
        .flat_map(|(_, p)| p.tensor.values().iter().map(|v| v.to_bits()))
        .collect();
    if let Head::Dicop(h) = &model.head {
        bits.extend(
            store
                .value(h.prototypes.anchors)
                .values()
                .iter()
                .map(|v| v.to_bits()),
        );
    }
    bits
}
