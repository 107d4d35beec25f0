//! End-to-end acceptance checks. Each test covers one criterion and writes a
//! single `PASS` or `FAIL` line to stderr (bypassing output capture) before
//! asserting. The experiment-scale criteria share one pretrained model and a
//! cache of adaptation runs; all heavy work is serialized on one lock so
//! timings are not inflated by concurrent tests.

use std::collections::HashMap;
use std::io::Write as _;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use diva_core::autodiff::{
    grad_check_params, GradCheckReport, ParamId, ParamStore, Tape, Tensor, Var,
};
use diva_core::baselines::{
    BaselineConfig, BaselineKind, ClipAdapter, Cocoop, ContextInit, Coop, LinearProbe,
};
use diva_core::dicop::{encode_contextual_prompts, AttributeVocabulary, ContextProjector};
use diva_core::dpl::{
    anchor_regularizer, loss_ita, loss_prot, loss_reg_ce, total_loss, BatchFeatures, LossWeights,
    Objective, ProtSign, PrototypeSet,
};
use diva_core::encoders::{DualEncoder, TextEncoderConfig, TokenSequence, VisionEncoderConfig};
use diva_core::harness::{
    compute_metrics, paired_ttest, rank_auc, report_tsv, student_t_upper_tail, zero_shot_metrics,
    Checkpoint, Experiment, ExperimentConfig, Method, ModelConfig, PretrainedModel, RunResult,
    Variant, ZeroShotPrompts,
};
use diva_core::image::Image;
use diva_core::synthbench::{generate_scenario, ScenarioConfig, ScenarioKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MAIN_FRACTION: f64 = 0.05;
const BASELINES: [BaselineKind; 4] = [
    BaselineKind::LinearProbe,
    BaselineKind::ClipAdapter,
    BaselineKind::Coop,
    BaselineKind::Cocoop,
];

fn verdict(criterion: &str, pass: bool, detail: &str) {
    let line = format!(
        "{} {criterion}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(pass, "{line}");
}

fn heavy_lock() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

// ------------------------------------------------------------ shared model

struct Shared {
    exp: Experiment,
    pretrain_time: Duration,
    runs: Mutex<HashMap<(Method, Variant, u64), RunResult>>,
}

fn shared() -> &'static Shared {
    static SHARED: OnceLock<Shared> = OnceLock::new();
    SHARED.get_or_init(|| {
        let _guard = heavy_lock();
        let config = ExperimentConfig::default();
        let start = Instant::now();
        let scenario = generate_scenario(&config.scenario).unwrap();
        let (pretrained, _) = PretrainedModel::train(&scenario, &config).unwrap();
        let pretrain_time = start.elapsed();
        Shared {
            exp: Experiment::new(config, scenario, pretrained).unwrap(),
            pretrain_time,
            runs: Mutex::new(HashMap::new()),
        }
    })
}

/// Cached 10-seed run of `(method, variant, fraction)` on the default
/// configuration.
fn run(method: Method, variant: Variant, fraction: f64) -> RunResult {
    let s = shared();
    let key = (method, variant, fraction.to_bits());
    if let Some(r) = s.runs.lock().unwrap().get(&key) {
        return r.clone();
    }
    let _guard = heavy_lock();
    if let Some(r) = s.runs.lock().unwrap().get(&key) {
        return r.clone();
    }
    let r = s.exp.run_adaptation(method, variant, fraction).unwrap();
    let _ = writeln!(
        std::io::stderr(),
        "  ran {method}/{variant} at {fraction}: mean weighted F1 {:.4} over {} seeds in {:.1?}",
        r.mean_weighted_f1(),
        r.seeds.len(),
        r.wall_time
    );
    s.runs.lock().unwrap().insert(key, r.clone());
    r
}

// ------------------------------------------------------------ gradient suite

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-3;
const INSTANCES: u64 = 20;

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, h: usize) -> Tensor {
    Tensor::matrix(
        n,
        h,
        (0..n * h).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn randomize(store: &mut ParamStore, ids: &[ParamId], rng: &mut ChaCha8Rng, scale: f64) {
    for &id in ids {
        for v in store.get_mut(id).tensor.values_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

fn tiny_pair(seed: u64) -> DualEncoder {
    let text = TextEncoderConfig {
        vocab_size: AttributeVocabulary::default().len(),
        max_seq_len: 8,
        embed_dim: 8,
        n_layers: 1,
        n_heads: 2,
    };
    let vision = VisionEncoderConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 8,
        n_layers: 1,
        n_heads: 2,
    };
    DualEncoder::new(text, vision, seed).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Image {
    Image::new(
        size,
        (0..size * size)
            .map(|_| rng.random_range(0.0..1.0))
            .collect(),
    )
    .unwrap()
}

/// Toy loss inputs held as parameters so every one can be probed.
struct LossToy {
    store: ParamStore,
    set: PrototypeSet,
    fv: ParamId,
    fts: ParamId,
    logits: ParamId,
    labels: Vec<usize>,
    protos: Vec<usize>,
    weights: LossWeights,
}

fn loss_toy(seed: u64) -> LossToy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, h) = (rng.random_range(2..6), rng.random_range(3..7));
    let class_map = vec![0, 1, 1];
    let anchors: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..h).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut store = ParamStore::new();
    let set = PrototypeSet::new(&mut store, &anchors, class_map.clone(), 2).unwrap();
    for v in store.get_mut(set.m).tensor.values_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    let fv = store
        .add("fv", random_matrix(&mut rng, n, h), true)
        .unwrap();
    let fts = store
        .add("fts", random_matrix(&mut rng, n, h), true)
        .unwrap();
    let logits = store
        .add("logits", random_matrix(&mut rng, n, 2), true)
        .unwrap();
    let protos: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let labels = protos.iter().map(|&p| class_map[p]).collect();
    let weights = LossWeights {
        tau1: rng.random_range(0.07..1.0),
        tau2: rng.random_range(0.07..1.0),
        lambda1: rng.random_range(0.0..0.5),
        lambda2: rng.random_range(0.0..0.5),
    };
    LossToy {
        store,
        set,
        fv,
        fts,
        logits,
        labels,
        protos,
        weights,
    }
}

impl LossToy {
    fn features(&self, tape: &mut Tape, store: &ParamStore) -> (Var, Var, Var) {
        let fv = tape.param(store, self.fv);
        let fv = tape.l2_normalize_rows(fv);
        let fts = tape.param(store, self.fts);
        let fts = tape.l2_normalize_rows(fts);
        let z = tape.param(store, self.logits);
        (fv, fts, tape.softmax_rows(z).unwrap())
    }
}

/// Aggregate of the gradient checks of one component.
#[derive(Default, Clone, Copy)]
struct Tally {
    max_rel_err: f64,
    kinks: usize,
    probes: usize,
}

impl Tally {
    fn of(reports: impl Iterator<Item = GradCheckReport>) -> Self {
        reports.fold(Self::default(), |t, r| Self {
            max_rel_err: t.max_rel_err.max(r.max_rel_err),
            kinks: t.kinks + r.kinks,
            probes: t.probes + r.probes(),
        })
    }
}

/// Checks over `INSTANCES` random instances of the toy loss inputs.
fn loss_suite<F>(f: F) -> Tally
where
    F: Fn(&LossToy, &mut Tape, &ParamStore) -> diva_core::Result<Var>,
{
    Tally::of((0..INSTANCES).map(|seed| {
        let mut t = loss_toy(seed);
        let ids = vec![t.fv, t.fts, t.logits, t.set.m];
        let mut store = std::mem::take(&mut t.store);
        grad_check_params(&mut store, &ids, |tape, s| f(&t, tape, s), STEP, TOL, 64).unwrap()
    }))
}

fn head_suite<F>(build: F) -> Tally
where
    F: Fn(u64) -> GradCheckReport,
{
    Tally::of((0..INSTANCES).map(build))
}

#[test]
fn gradient_suite() {
    let _guard = heavy_lock();
    let start = Instant::now();
    let mut worst: Vec<(&str, Tally)> = Vec::new();

    worst.push((
        "L_ita",
        loss_suite(|t, tape, s| {
            let (fv, fts, _) = t.features(tape, s);
            loss_ita(tape, fv, fts, t.weights.tau1)
        }),
    ));
    worst.push((
        "L_prot",
        loss_suite(|t, tape, s| {
            let (fv, fts, _) = t.features(tape, s);
            let m = tape.param(s, t.set.m);
            loss_prot(
                tape,
                fv,
                fts,
                &t.protos,
                m,
                t.weights.tau2,
                t.weights.lambda1,
                ProtSign::Corrected,
            )
        }),
    ));
    worst.push((
        "L_reg_ce",
        loss_suite(|t, tape, s| {
            let (_, _, p) = t.features(tape, s);
            let m = tape.param(s, t.set.m);
            let a = tape.param(s, t.set.anchors);
            loss_reg_ce(tape, p, &t.labels, m, a, t.weights.lambda2)
        }),
    ));
    worst.push((
        "L_total",
        loss_suite(|t, tape, s| {
            let (f_v, f_ts, probs) = t.features(tape, s);
            let batch = BatchFeatures {
                f_v,
                f_ts,
                probs,
                labels: &t.labels,
                prototype_ids: &t.protos,
            };
            let objective = Objective {
                weights: t.weights,
                ..Objective::default()
            };
            Ok(total_loss(tape, s, &t.set, batch, &objective)?.l_total)
        }),
    ));

    // Projector, checked through context injection into the text encoder.
    worst.push((
        "projector",
        head_suite(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pair = tiny_pair(seed);
            let proj = ContextProjector::new(&mut pair.store, 32, 8, &mut rng).unwrap();
            randomize(&mut pair.store, &proj.params(), &mut rng, 0.5);
            let x = random_matrix(&mut rng, 2, 32);
            let prompts = vec![TokenSequence(vec![0, 1, 2]), TokenSequence(vec![0, 3])];
            let w = random_matrix(&mut rng, 2, 8);
            let text = pair.text.clone();
            grad_check_params(
                &mut pair.store,
                &proj.params(),
                |tape, s| {
                    let xv = tape.constant(x.clone());
                    let fs = proj.project_context(tape, s, xv)?;
                    let fts = encode_contextual_prompts(tape, s, &text, &prompts, &[1, 0], fs)?;
                    let wv = tape.constant(w.clone());
                    let p = tape.mul(fts, wv)?;
                    Ok(tape.sum(p))
                },
                STEP,
                TOL,
                16,
            )
            .unwrap()
        }),
    ));

    for (name, vision_side) in [("text encoder", false), ("vision encoder", true)] {
        worst.push((
            name,
            head_suite(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
                let mut pair = tiny_pair(seed);
                let imgs: Vec<Image> = (0..2).map(|_| random_image(&mut rng, 8)).collect();
                let seqs = vec![TokenSequence(vec![0, 1, 2, 3]), TokenSequence(vec![0, 4])];
                let (vision, text) = (pair.vision.clone(), pair.text.clone());
                let ids = if vision_side {
                    vision.params()
                } else {
                    text.params()
                };
                grad_check_params(
                    &mut pair.store,
                    &ids,
                    |tape, s| {
                        let refs: Vec<&Image> = imgs.iter().collect();
                        let fv = vision.encode(tape, s, &refs)?;
                        let ft = text.encode(tape, s, &seqs)?;
                        let sim = tape.cosine_sim_matrix(fv, ft)?;
                        let sim = tape.scale(sim, 3.0);
                        tape.cross_entropy_rows(sim, &[0, 1])
                    },
                    STEP,
                    TOL,
                    3,
                )
                .unwrap()
            }),
        ));
    }

    worst.push((
        "linear probe",
        head_suite(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let probe = LinearProbe::new(&mut store, 8, 3).unwrap();
            randomize(&mut store, &probe.params(), &mut rng, 1.0);
            let x = random_matrix(&mut rng, 5, 8);
            let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
            grad_check_params(
                &mut store,
                &probe.params(),
                |tape, s| {
                    let f = tape.constant(x.clone());
                    let p = probe.probs(tape, s, f)?;
                    diva_core::dpl::cross_entropy_probs(tape, p, &labels)
                },
                STEP,
                TOL,
                64,
            )
            .unwrap()
        }),
    ));

    worst.push((
        "CLIP-Adapter",
        head_suite(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let prompts = random_matrix(&mut rng, 3, 16);
            let cfg = BaselineConfig::new(BaselineKind::ClipAdapter);
            let ad =
                ClipAdapter::new(&mut store, &cfg, prompts, vec![0, 1, 1], 2, &mut rng).unwrap();
            randomize(&mut store, &ad.params(), &mut rng, 0.5);
            let fv = store
                .add("fv", random_matrix(&mut rng, 4, 16), true)
                .unwrap();
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..2)).collect();
            let mut ids = ad.params();
            ids.push(fv);
            grad_check_params(
                &mut store,
                &ids,
                |tape, s| {
                    let f = tape.param(s, fv);
                    let p = ad.probs(tape, s, f)?;
                    diva_core::dpl::cross_entropy_probs(tape, p, &labels)
                },
                STEP,
                TOL,
                32,
            )
            .unwrap()
        }),
    ));

    for (name, conditional) in [("CoOp", false), ("CoCoOp", true)] {
        worst.push((
            name,
            head_suite(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut pair = tiny_pair(seed);
                let vocab = AttributeVocabulary::default();
                let tokens: Vec<usize> =
                    (0..3).map(|k| vocab.class_name_token(k).unwrap()).collect();
                let cfg = BaselineConfig {
                    context_len: 2,
                    meta_reduction: 4,
                    tau: rng.random_range(0.2..1.0),
                    ..BaselineConfig::new(BaselineKind::Cocoop)
                };
                let fv = pair
                    .store
                    .add("fv", random_matrix(&mut rng, 3, 8), true)
                    .unwrap();
                let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..2)).collect();
                let text = pair.text.clone();
                let (mut ids, cocoop, coop) = if conditional {
                    let c = Cocoop::new(
                        &mut pair.store,
                        &text,
                        &cfg,
                        &ContextInit::Random,
                        tokens,
                        vec![0, 1, 1],
                        2,
                        &mut rng,
                    )
                    .unwrap();
                    let ids = c.params();
                    randomize(&mut pair.store, &ids, &mut rng, 0.5);
                    (ids, Some(c), None)
                } else {
                    let c = Coop::new(
                        &mut pair.store,
                        &text,
                        "coop",
                        2,
                        &ContextInit::Random,
                        tokens,
                        vec![0, 1, 1],
                        2,
                        cfg.tau,
                        &mut rng,
                    )
                    .unwrap();
                    (c.params(), None, Some(c))
                };
                ids.push(fv);
                grad_check_params(
                    &mut pair.store,
                    &ids,
                    |tape, s| {
                        let f = tape.param(s, fv);
                        let probs = match (&cocoop, &coop) {
                            (Some(c), _) => c.probs(tape, s, &text, f)?,
                            (_, Some(c)) => c.probs(tape, s, &text, f)?,
                            _ => unreachable!(),
                        };
                        diva_core::dpl::cross_entropy_probs(tape, probs, &labels)
                    },
                    STEP,
                    TOL,
                    8,
                )
                .unwrap()
            }),
        ));
    }

    let elapsed = start.elapsed();
    let failing: Vec<String> = worst
        .iter()
        .filter(|(_, t)| !(t.max_rel_err < TOL))
        .map(|(n, t)| format!("{n} ({:.2e})", t.max_rel_err))
        .collect();
    let total = worst.iter().fold(Tally::default(), |a, (_, t)| Tally {
        max_rel_err: a.max_rel_err.max(t.max_rel_err),
        kinks: a.kinks + t.kinks,
        probes: a.probes + t.probes,
    });
    let max = total.max_rel_err;
    // Kinks are excluded from the error, so they must stay rare.
    let kinks_rare = total.kinks * 100 <= total.probes;
    let pass = failing.is_empty() && kinks_rare && elapsed < Duration::from_secs(60);
    verdict(
        "gradient suite",
        pass,
        &format!(
            "{} components × {INSTANCES} instances, {} probes, worst relative error {max:.2e} (limit {TOL:e}), \
             {} probes straddling a ReLU kink excluded (limit 1%), {elapsed:.1?} (limit 60 s){}",
            worst.len(),
            total.probes,
            total.kinks,
            if failing.is_empty() { String::new() } else { format!("; failing: {}", failing.join(", ")) }
        ),
    );
}

// ------------------------------------------------------------ loss oracles

fn rows(tape: &mut Tape, r: &[&[f64]]) -> Var {
    tape.constant(Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap())
}

#[test]
fn loss_oracles() {
    let mut checks: Vec<(&str, bool)> = Vec::new();

    let mut tape = Tape::new();
    let e = rows(&mut tape, &[&[1.0, 0.0], &[0.0, 1.0]]);
    let l = loss_ita(&mut tape, e, e, 1.0).unwrap();
    let expected = (1.0 + (-1f64).exp()).ln();
    checks.push((
        "L_ita identity",
        (tape.value(l).item() - expected).abs() < 1e-6,
    ));

    let one = rows(&mut tape, &[&[0.6, 0.8]]);
    let other = rows(&mut tape, &[&[1.0, 0.0]]);
    let l = loss_ita(&mut tape, one, other, 0.07).unwrap();
    checks.push(("L_ita n=1", tape.value(l).item() == 0.0));

    let mut store = ParamStore::new();
    let set = PrototypeSet::new(
        &mut store,
        &[vec![0.3, -0.2, 0.9], vec![1.0, 0.5, 0.0]],
        vec![0, 1],
        2,
    )
    .unwrap();
    let mut tape = Tape::new();
    let m = tape.param(&store, set.m);
    let a = tape.param(&store, set.anchors);
    let r = anchor_regularizer(&mut tape, m, a, 0.1).unwrap();
    checks.push(("L_reg_ce regularizer at init", tape.value(r).item() == 0.0));

    let v = [0.0, 0.6, 0.8];
    let mut tape = Tape::new();
    let f = rows(&mut tape, &[&v, &v]);
    let m = rows(&mut tape, &[&v]);
    let l = loss_prot(&mut tape, f, f, &[0, 0], m, 1.0, 0.0, ProtSign::Corrected).unwrap();
    checks.push((
        "L_prot attraction −e",
        (tape.value(l).item() + std::f64::consts::E).abs() < 1e-9,
    ));

    let mut tape = Tape::new();
    let f = rows(&mut tape, &[&[1.0, 0.0]]);
    let m = rows(&mut tape, &[&[1.0, 0.0], &[0.0, 1.0]]);
    let with = loss_prot(&mut tape, f, f, &[0], m, 1.0, 0.1, ProtSign::Corrected).unwrap();
    let without = loss_prot(&mut tape, f, f, &[0], m, 1.0, 0.0, ProtSign::Corrected).unwrap();
    let sep = tape.value(with).item() - tape.value(without).item();
    checks.push(("L_prot separation 0.2", (sep - 0.2).abs() < 1e-9));

    let failing: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    verdict(
        "loss oracles",
        failing.is_empty(),
        &if failing.is_empty() {
            format!("{} closed-form cases hold", checks.len())
        } else {
            format!("failing: {}", failing.join(", "))
        },
    );
}

// ------------------------------------------------------------ metric oracles

fn brute_force_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &pi) in positive.iter().enumerate() {
        for (j, &pj) in positive.iter().enumerate() {
            if pi && !pj {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn gamma_half(k: u32) -> f64 {
    if k.is_multiple_of(2) {
        (1..k / 2).map(f64::from).product()
    } else {
        std::f64::consts::PI.sqrt()
            * (1..=(k - 1) / 2)
                .map(|j| f64::from(j) - 0.5)
                .product::<f64>()
    }
}

/// Upper tail of Student's t by Simpson integration of the density.
fn integrated_upper_tail(t: f64, dof: u32) -> f64 {
    let nu = f64::from(dof);
    let c = gamma_half(dof + 1) / ((nu * std::f64::consts::PI).sqrt() * gamma_half(dof));
    let density = |x: f64| c * (1.0 + x * x / nu).powf(-(nu + 1.0) / 2.0);
    let steps = 20_000;
    let h = t.abs() / steps as f64;
    let mut s = density(0.0) + density(t.abs());
    for i in 1..steps {
        s += density(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let central = s * h / 3.0;
    if t >= 0.0 {
        0.5 - central
    } else {
        0.5 + central
    }
}

#[test]
fn metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut auc_ok = 0;
    while auc_ok < 200 {
        let n = rng.random_range(2..=50);
        let scores: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.random_range(0..10u8)) / 10.0)
            .collect();
        let positive: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let Some(auc) = rank_auc(&scores, &positive) else {
            continue;
        };
        if auc != brute_force_auc(&scores, &positive) {
            break;
        }
        auc_ok += 1;
    }

    let mut f1_ok = true;
    for _ in 0..200 {
        let k = 3;
        let n = rng.random_range(k..=60);
        let labels: Vec<usize> = (0..n)
            .map(|i| if i < k { i } else { rng.random_range(0..k) })
            .collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let scores: Vec<Vec<f64>> = preds
            .iter()
            .map(|&p| (0..k).map(|c| f64::from(u8::from(c == p))).collect())
            .collect();
        let m = compute_metrics(&scores, &preds, &labels, k).unwrap();
        let direct: f64 = (0..k)
            .map(|c| {
                let tp = (0..n).filter(|&i| preds[i] == c && labels[i] == c).count() as f64;
                let fp = (0..n).filter(|&i| preds[i] == c && labels[i] != c).count() as f64;
                let fneg = (0..n).filter(|&i| preds[i] != c && labels[i] == c).count() as f64;
                let f1 = if tp == 0.0 {
                    0.0
                } else {
                    2.0 * tp / (2.0 * tp + fp + fneg)
                };
                (tp + fneg) / n as f64 * f1
            })
            .sum();
        f1_ok &= (m.weighted_f1 - direct).abs() < 1e-12;
    }

    let mut worst_p: f64 = 0.0;
    for dof in [5u32, 9, 30] {
        for i in -40..=40 {
            let t = f64::from(i) * 0.25;
            worst_p = worst_p.max(
                (student_t_upper_tail(t, f64::from(dof)) - integrated_upper_tail(t, dof)).abs(),
            );
        }
    }
    for _ in 0..50 {
        let a: Vec<f64> = (0..10).map(|_| rng.random_range(0.5..1.0)).collect();
        let b: Vec<f64> = a
            .iter()
            .map(|x| x - rng.random_range(-0.05..0.08))
            .collect();
        let r = paired_ttest(&a, &b).unwrap();
        worst_p = worst_p.max((r.p - integrated_upper_tail(r.t, 9)).abs());
    }

    verdict(
        "metric oracles",
        auc_ok == 200 && f1_ok && worst_p < 1e-6,
        &format!(
            "AUC exact on {auc_ok}/200 instances; weighted F1 recomputation {}; t-test p worst deviation {worst_p:.2e} (limit 1e-6)",
            if f1_ok { "matches" } else { "differs" }
        ),
    );
}

// ------------------------------------------------------------ scenario integrity

#[test]
fn scenario_integrity() {
    let s = shared();
    let sc = &s.exp.scenario;
    let target = sc.layout.prototypes[sc.layout.target_prototypes()[0]].class_id;
    let new_pairs = sc.pretrain.count_class(target);

    let under = generate_scenario(&ScenarioConfig {
        kind: ScenarioKind::Underrepresented,
        ..s.exp.config.scenario.clone()
    })
    .unwrap();
    let share = under.pretrain.count_class(target) as f64 / under.pretrain.len() as f64;

    let pretrained = PretrainedModel {
        encoders: s.exp.pretrained.encoders.clone(),
    };
    let class_name = zero_shot_metrics(&pretrained, sc, ZeroShotPrompts::ClassName).unwrap();
    let attributes = zero_shot_metrics(&pretrained, sc, ZeroShotPrompts::Attributes).unwrap();
    let tc = sc.layout.target_class;
    let f1 = class_name.per_class[tc].f1.unwrap_or(0.0);
    verdict(
        "scenario integrity",
        new_pairs == 0 && share > 0.0 && share <= 0.005 && f1 <= 0.5,
        &format!(
            "new scenario target pairs {new_pairs}; underrepresented share {:.4}%; zero-shot target F1 {f1:.3} \
             (class-name prompts; attribute prompts give {:.3})",
            share * 100.0,
            attributes.per_class[tc].f1.unwrap_or(0.0)
        ),
    );
}

// ------------------------------------------------------------ directional comparison

#[test]
fn directional_comparison() {
    let s = shared();
    let ours = run(Method::DicopDpl, Variant::Full, MAIN_FRACTION);
    let baselines: Vec<RunResult> = BASELINES
        .iter()
        .map(|&k| run(Method::Baseline(k), Variant::Full, MAIN_FRACTION))
        .collect();
    let pipeline =
        s.pretrain_time + ours.wall_time + baselines.iter().map(|r| r.wall_time).sum::<Duration>();
    let probe = &baselines[0];
    let margin = ours.mean_weighted_f1() - probe.mean_weighted_f1();
    let best = baselines
        .iter()
        .max_by(|a, b| a.mean_weighted_f1().total_cmp(&b.mean_weighted_f1()))
        .unwrap();
    let t = paired_ttest(&ours.weighted_f1s(), &best.weighted_f1s()).unwrap();
    let means: Vec<String> = std::iter::once(&ours)
        .chain(&baselines)
        .map(|r| format!("{} {:.4}", r.method, r.mean_weighted_f1()))
        .collect();
    verdict(
        "directional comparison",
        margin >= 0.03 && ours.mean_weighted_f1() > best.mean_weighted_f1() && t.p < 0.05 && pipeline < Duration::from_secs(45 * 60),
        &format!(
            "mean weighted F1 [{}]; margin over linear probe {margin:+.4} (need ≥ 0.03); vs best baseline {} t = {:.3}, p = {:.4} \
             (need < 0.05); pretrain + 5 methods × {} seeds took {:.1?} (limit 45 min)",
            means.join(", "),
            best.method,
            t.t,
            t.p,
            ours.seeds.len(),
            pipeline
        ),
    );
}

// ------------------------------------------------------------ ablation

#[test]
fn ablation() {
    let full = run(Method::DicopDpl, Variant::Full, MAIN_FRACTION);
    let mut violations = Vec::new();
    let mut means = vec![format!("full {:.4}", full.mean_weighted_f1())];
    for v in Variant::ABLATIONS {
        let r = run(Method::DicopDpl, v, MAIN_FRACTION);
        means.push(format!("{v} {:.4}", r.mean_weighted_f1()));
        if full.mean_weighted_f1() < r.mean_weighted_f1() - 0.01 {
            violations.push(v.name());
        }
    }
    verdict(
        "ablation",
        violations.is_empty(),
        &format!(
            "mean weighted F1 [{}]; full must be ≥ each variant − 0.01{}",
            means.join(", "),
            if violations.is_empty() {
                String::new()
            } else {
                format!("; violated by {}", violations.join(", "))
            }
        ),
    );
}

// ------------------------------------------------------------ data efficiency

#[test]
fn data_efficiency() {
    let fractions = shared().exp.config.sweep_fractions.clone();
    assert_eq!(fractions, vec![0.01, 0.05, 0.10, 0.25]);
    let probe = Method::Baseline(BaselineKind::LinearProbe);
    let ours: Vec<f64> = fractions
        .iter()
        .map(|&f| run(Method::DicopDpl, Variant::Full, f).mean_weighted_f1())
        .collect();
    let theirs: Vec<f64> = fractions
        .iter()
        .map(|&f| run(probe, Variant::Full, f).mean_weighted_f1())
        .collect();
    let monotone = ours.windows(2).all(|w| w[1] >= w[0] - 0.02);
    let adv_low = ours[0] - theirs[0];
    let adv_high = ours[3] - theirs[3];
    verdict(
        "data efficiency",
        monotone && adv_low >= adv_high - 0.02,
        &format!(
            "main method {:?}, linear probe {:?} at fractions {fractions:?}; non-decreasing within 0.02: {monotone}; \
             advantage at 1% {adv_low:+.4} vs at 25% {adv_high:+.4} (need ≥ 25% − 0.02)",
            ours.iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>(),
            theirs.iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    );
}

// ------------------------------------------------------------ determinism

#[test]
fn determinism() {
    let s = shared();
    let main = run(Method::DicopDpl, Variant::Full, MAIN_FRACTION);
    let seed = main.seeds[0].seed;
    let rerun = {
        let _guard = heavy_lock();
        let fresh = Experiment::new(
            s.exp.config.clone(),
            generate_scenario(&s.exp.config.scenario).unwrap(),
            PretrainedModel {
                encoders: s.exp.pretrained.encoders.clone(),
            },
        )
        .unwrap();
        fresh
            .run_seed(Method::DicopDpl, Variant::Full, MAIN_FRACTION, seed)
            .unwrap()
    };
    let single = |r: &diva_core::harness::SeedResult| {
        report_tsv(&[RunResult {
            method: Method::DicopDpl,
            variant: Variant::Full,
            fraction: MAIN_FRACTION,
            seeds: vec![r.clone()],
            wall_time: Duration::ZERO,
        }])
    };
    let report_same = single(&main.seeds[0]) == single(&rerun.0);

    let dir = tempfile::tempdir().unwrap();
    let save_load_save =
        |name: &str,
         save: &dyn Fn(&std::path::Path),
         reload: &dyn Fn(&std::path::Path, &std::path::Path)| {
            let a = dir.path().join(format!("{name}_a.diva"));
            let b = dir.path().join(format!("{name}_b.diva"));
            save(&a);
            reload(&a, &b);
            std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap()
        };
    let config = &s.exp.config;
    let vocab = s.exp.scenario.vocab.len();
    let pre_same = save_load_save(
        "pretrained",
        &|p| s.exp.pretrained.save(p, config).unwrap(),
        &|a, b| {
            PretrainedModel::load(a, config, vocab)
                .unwrap()
                .save(b, config)
                .unwrap()
        },
    );
    let adapted_same = save_load_save("adapted", &|p| rerun.1.save(p, config).unwrap(), &|a, b| {
        s.exp
            .load_adapted(a, Method::DicopDpl, Variant::Full)
            .unwrap()
            .save(b, config)
            .unwrap()
    });
    let raw = Checkpoint::load(&dir.path().join("adapted_a.diva")).unwrap();
    let raw_same =
        raw.to_bytes().unwrap() == std::fs::read(dir.path().join("adapted_a.diva")).unwrap();
    verdict(
        "determinism",
        report_same && pre_same && adapted_same && raw_same,
        &format!(
            "report line for seed {seed} reproduced byte-identically: {report_same}; checkpoint save/load/save identical: \
             pretrained {pre_same}, adapted {adapted_same}, raw {raw_same}"
        ),
    );
}

// ------------------------------------------------------------ freeze contracts

#[test]
fn freeze_contracts() {
    let main = run(Method::DicopDpl, Variant::Full, MAIN_FRACTION);
    let n_test = shared().exp.scenario.dataset.test.len() as u64;
    let frozen = main.seeds.iter().all(|s| s.frozen_intact);
    let vision_only = main.seeds.iter().all(|s| {
        s.inference.prompt_encodes == 0
            && s.inference.prototype_calls == 0
            && s.inference.vision_images == n_test
            && s.inference.classifier_calls > 0
    });
    let c = main.seeds[0].inference;
    verdict(
        "freeze contracts",
        frozen && vision_only,
        &format!(
            "text encoder and anchors bit-identical in all {} seeds: {frozen}; inference counters (seed {}): \
             {} images encoded, {} prompt encodes, {} prototype calls, {} classifier calls",
            main.seeds.len(),
            main.seeds[0].seed,
            c.vision_images,
            c.prompt_encodes,
            c.prototype_calls,
            c.classifier_calls
        ),
    );
}

#[test]
fn model_defaults_are_desk_scale() {
    // Guards the sizes the experiment-scale criteria are stated for.
    let c = ExperimentConfig::default();
    assert_eq!(c.model, ModelConfig::default());
    assert_eq!(
        (
            c.model.embed_dim,
            c.model.text_layers,
            c.model.vision_layers
        ),
        (64, 2, 2)
    );
    assert_eq!(c.train.seeds.len(), 10);
    assert_eq!(c.scenario.pretrain_pairs_per_class, 500);
}
