use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check_params;

const E: f64 = std::f64::consts::E;

fn rows(t: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&t.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, h: usize) -> Tensor {
    Tensor::matrix(
        n,
        h,
        (0..n * h).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, h: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..h).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm).collect()
        })
        .collect()
}

#[test]
fn ita_single_pair_is_zero() {
    let mut tape = Tape::new();
    let a = tape.constant(rows(&[&[0.3, -0.2, 0.9]]));
    let b = tape.constant(rows(&[&[-0.5, 0.1, 0.4]]));
    let l = loss_ita(&mut tape, a, b, 0.07).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
}

#[test]
fn ita_identity_similarities() {
    let oracle = |tau: f64| (-1.0 / tau).exp().ln_1p();
    for (tau, tol) in [(1.0, 1e-6), (0.07, 1e-12)] {
        let mut tape = Tape::new();
        let a = tape.constant(rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = tape.constant(rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let l = loss_ita(&mut tape, a, b, tau).unwrap();
        let l = tape.value(l).item();
        assert!(
            (l - oracle(tau)).abs() < tol,
            "tau {tau}: {l} vs {}",
            oracle(tau)
        );
    }
    assert!((oracle(1.0) - 0.313262).abs() < 1e-6);
    assert!((oracle(0.07) - 6.2487e-7).abs() < 1e-10);
}

#[test]
fn ita_rejects_bad_temperature_and_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let b = tape.constant(rows(&[&[1.0, 0.0]]));
    assert!(loss_ita(&mut tape, a, a, 0.0).is_err());
    assert!(loss_ita(&mut tape, a, b, 1.0).is_err());
}

#[test]
fn prot_attraction_at_the_prototype_is_minus_e() {
    let v = [0.6, 0.8, 0.0];
    let mut tape = Tape::new();
    let f = tape.constant(rows(&[&v, &v, &v]));
    let m = tape.constant(rows(&[&v]));
    let l = loss_prot(
        &mut tape,
        f,
        f,
        &[0, 0, 0],
        m,
        1.0,
        0.0,
        ProtSign::Corrected,
    )
    .unwrap();
    assert!((tape.value(l).item() + E).abs() < 1e-9);
    let printed = loss_prot(
        &mut tape,
        f,
        f,
        &[0, 0, 0],
        m,
        1.0,
        0.0,
        ProtSign::AsPrinted,
    )
    .unwrap();
    assert!((tape.value(printed).item() - E).abs() < 1e-9);
}

#[test]
fn prot_orthogonal_features_give_minus_one() {
    let mut tape = Tape::new();
    let f = tape.constant(rows(&[&[0.0, 1.0], &[0.0, -2.0]]));
    let m = tape.constant(rows(&[&[3.0, 0.0]]));
    let l = loss_prot(&mut tape, f, f, &[0, 0], m, 1.0, 0.0, ProtSign::Corrected).unwrap();
    assert!((tape.value(l).item() + 1.0).abs() < 1e-12);
}

#[test]
fn prot_separation_of_orthogonal_prototypes() {
    let mut tape = Tape::new();
    let m = tape.constant(rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let sep = prototype_separation(&mut tape, m, 1.0).unwrap();
    let weighted = tape.scale(sep, 0.1);
    assert!((tape.value(weighted).item() - 0.2).abs() < 1e-9);

    // With the attraction isolated by subtraction the full loss exposes the same term.
    let f = tape.constant(rows(&[&[1.0, 0.0]]));
    let l = loss_prot(&mut tape, f, f, &[0], m, 1.0, 0.1, ProtSign::Corrected).unwrap();
    let a = prototype_attraction(&mut tape, f, f, &[0], m, 1.0).unwrap();
    let sep_only = tape.value(l).item() + tape.value(a).item();
    assert!((sep_only - 0.2).abs() < 1e-9);
}

#[test]
fn prot_rejects_empty_and_out_of_range() {
    let mut tape = Tape::new();
    let f = tape.constant(rows(&[&[1.0, 0.0]]));
    let m = tape.constant(rows(&[&[1.0, 0.0]]));
    assert!(matches!(
        loss_prot(&mut tape, f, f, &[], m, 1.0, 0.1, ProtSign::Corrected),
        Err(Error::Input(_))
    ));
    assert!(loss_prot(&mut tape, f, f, &[1], m, 1.0, 0.1, ProtSign::Corrected).is_err());
}

fn prototype_store(
    anchors: &[Vec<f64>],
    class_map: Vec<usize>,
    k: usize,
) -> (ParamStore, PrototypeSet) {
    let mut store = ParamStore::new();
    let set = PrototypeSet::new(&mut store, anchors, class_map, k).unwrap();
    (store, set)
}

#[test]
fn prototype_set_contracts() {
    let anchors = vec![vec![0.1, 0.2], vec![0.3, -0.4], vec![1.0, 0.0]];
    let (store, set) = prototype_store(&anchors, vec![0, 1, 1], 2);
    assert_eq!(
        store.value(set.m).values(),
        store.value(set.anchors).values()
    );
    assert!(store.get(set.m).trainable);
    assert!(!store.get(set.anchors).trainable);
    assert_eq!(set.mean_anchor_distance(&store), 0.0);

    let mut s = ParamStore::new();
    assert!(PrototypeSet::new(&mut s, &anchors, vec![0, 1, 1], 4).is_err());
    let mut s = ParamStore::new();
    assert!(PrototypeSet::new(&mut s, &anchors, vec![0, 0, 0], 2).is_err());
    let mut s = ParamStore::new();
    assert!(PrototypeSet::new(&mut s, &anchors, vec![0, 2, 1], 2).is_err());
}

#[test]
fn reg_ce_oracles() {
    let anchors = vec![vec![0.6, 0.8], vec![-1.0, 0.0]];
    let (mut store, set) = prototype_store(&anchors, vec![0, 1], 2);
    let mut tape = Tape::new();
    let m = tape.param(&store, set.m);
    let a = tape.param(&store, set.anchors);
    let reg = anchor_regularizer(&mut tape, m, a, 0.1).unwrap();
    assert_eq!(tape.value(reg).item(), 0.0);

    let p = tape.constant(rows(&[&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]]));
    let l = loss_reg_ce(&mut tape, p, &[0, 1, 1], m, a, 0.1).unwrap();
    assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);

    // One prototype displaced by a unit vector, perfect predictions.
    let (mut one, set1) = prototype_store(&[vec![0.6, 0.8]], vec![0], 1);
    one.get_mut(set1.m)
        .tensor
        .values_mut()
        .copy_from_slice(&[0.6, 1.8]);
    let mut tape = Tape::new();
    let m = tape.param(&one, set1.m);
    let a = tape.param(&one, set1.anchors);
    let p = tape.constant(rows(&[&[1.0], &[1.0]]));
    let l = loss_reg_ce(&mut tape, p, &[0, 0], m, a, 0.1).unwrap();
    assert!((tape.value(l).item() - 0.1).abs() < 1e-15);

    // A zero true-class probability hits the floor instead of producing inf.
    let p = tape.constant(rows(&[&[0.0, 1.0]]));
    let l = cross_entropy_probs(&mut tape, p, &[0]).unwrap();
    assert!((tape.value(l).item() + LOG_FLOOR.ln()).abs() < 1e-9);

    store.get_mut(set.m).tensor.values_mut()[0] += 1.0;
    assert!((set.mean_anchor_distance(&store) - 0.5).abs() < 1e-15);
}

#[test]
fn classifier_outputs() {
    let mut store = ParamStore::new();
    let head = Classifier::new(&mut store, "dpl", 4, 3).unwrap();
    let p = head
        .classify_vector(&store, &[0.5, -1.0, 2.0, 0.1])
        .unwrap();
    for x in &p {
        assert!((x - 1.0 / 3.0).abs() < 1e-15);
    }
    let mut store = ParamStore::new();
    let head = Classifier::new(&mut store, "dpl", 2, 2).unwrap();
    let b = head.linear.bias.unwrap();
    store
        .get_mut(b)
        .tensor
        .values_mut()
        .copy_from_slice(&[3f64.ln(), 0.0]);
    let p = head.classify_vector(&store, &[0.2, 0.7]).unwrap();
    assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
    store
        .get_mut(b)
        .tensor
        .values_mut()
        .copy_from_slice(&[1.7, 1.7]);
    let p = head.classify_vector(&store, &[0.2, 0.7]).unwrap();
    assert_eq!(p, vec![0.5, 0.5]);
}

proptest::proptest! {
    #[test]
    fn classifier_rows_sum_to_one(values in proptest::collection::vec(-5.0f64..5.0, 12), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let head = Classifier::random(&mut store, "p", 4, 5, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 4, values).unwrap());
        let p = head.classify(&mut tape, &store, x).unwrap();
        for i in 0..3 {
            let s: f64 = tape.value(p).row(i).iter().sum();
            proptest::prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

/// Randomized toy batch in its own parameter store, so every input can be
/// probed by finite differences.
struct Toy {
    store: ParamStore,
    set: PrototypeSet,
    fv: ParamId,
    fts: ParamId,
    logits: ParamId,
    labels: Vec<usize>,
    protos: Vec<usize>,
    weights: LossWeights,
}

fn toy(seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, h, c, k) = (rng.random_range(2..6), rng.random_range(3..7), 3, 2);
    let class_map = vec![0, 1, 1];
    let anchors = unit_rows(&mut rng, c, h);
    let mut store = ParamStore::new();
    let set = PrototypeSet::new(&mut store, &anchors, class_map.clone(), k).unwrap();
    // Move the prototypes off their anchors so the norm is differentiable.
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
        .add("logits", random_matrix(&mut rng, n, k), true)
        .unwrap();
    let protos: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let labels = protos.iter().map(|&p| class_map[p]).collect();
    let weights = LossWeights {
        tau1: rng.random_range(0.07..1.0),
        tau2: rng.random_range(0.07..1.0),
        lambda1: rng.random_range(0.0..0.5),
        lambda2: rng.random_range(0.0..0.5),
    };
    Toy {
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

impl Toy {
    fn features(&self, tape: &mut Tape, store: &ParamStore) -> (Var, Var, Var) {
        let fv = tape.param(store, self.fv);
        let fv = tape.l2_normalize_rows(fv);
        let fts = tape.param(store, self.fts);
        let fts = tape.l2_normalize_rows(fts);
        let z = tape.param(store, self.logits);
        let p = tape.softmax_rows(z).unwrap();
        (fv, fts, p)
    }

    fn all_ids(&self) -> Vec<ParamId> {
        vec![self.fv, self.fts, self.logits, self.set.m]
    }
}

fn check<F>(name: &str, mut f: F)
where
    F: FnMut(&Toy, &mut Tape, &ParamStore) -> Result<Var>,
{
    for seed in 0..24 {
        let mut t = toy(seed);
        let ids = t.all_ids();
        let mut store = std::mem::take(&mut t.store);
        let report =
            grad_check_params(&mut store, &ids, |tape, s| f(&t, tape, s), 1e-4, 1e-3, 64).unwrap();
        assert!(
            report.passed(),
            "{name} seed {seed}: {}",
            report.max_rel_err
        );
    }
}

#[test]
fn ita_gradients() {
    check("ita", |t, tape, s| {
        let (fv, fts, _) = t.features(tape, s);
        loss_ita(tape, fv, fts, t.weights.tau1)
    });
}

#[test]
fn prot_gradients() {
    for sign in [ProtSign::Corrected, ProtSign::AsPrinted] {
        check("prot", |t, tape, s| {
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
                sign,
            )
        });
    }
}

#[test]
fn reg_ce_gradients() {
    check("reg_ce", |t, tape, s| {
        let (_, _, p) = t.features(tape, s);
        let m = tape.param(s, t.set.m);
        let a = tape.param(s, t.set.anchors);
        loss_reg_ce(tape, p, &t.labels, m, a, t.weights.lambda2)
    });
}

#[test]
fn total_gradients() {
    check("total", |t, tape, s| {
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
    });
}

#[test]
fn total_breakdown_sums_and_reaches_only_trainables() {
    for seed in 0..10 {
        let mut t = toy(seed);
        let mut tape = Tape::new();
        let (f_v, f_ts, probs) = t.features(&mut tape, &t.store);
        let batch = BatchFeatures {
            f_v,
            f_ts,
            probs,
            labels: &t.labels,
            prototype_ids: &t.protos,
        };
        let terms = total_loss(&mut tape, &t.store, &t.set, batch, &Objective::default()).unwrap();
        let b = terms.breakdown(&tape);
        assert_eq!(b.l_total - (b.l_ita + b.l_prot + b.l_reg_ce), 0.0);
        tape.backward(terms.l_total).unwrap();
        t.store.accumulate_grads(&tape);
        assert!(t
            .store
            .value(t.set.m)
            .grad()
            .unwrap()
            .iter()
            .any(|&g| g != 0.0));
        assert!(t.store.value(t.set.anchors).grad().is_none());
    }
}

#[test]
fn total_with_no_weights_reduces_to_attraction() {
    let v = [0.0, 0.6, 0.8];
    let (store, set) = prototype_store(&[v.to_vec(), vec![1.0, 0.0, 0.0]], vec![0, 1], 2);
    let mut tape = Tape::new();
    let f = tape.constant(rows(&[&v]));
    let p = tape.constant(rows(&[&[1.0, 0.0]]));
    let objective = Objective {
        weights: LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            ..LossWeights::default()
        },
        ..Objective::default()
    };
    let batch = BatchFeatures {
        f_v: f,
        f_ts: f,
        probs: p,
        labels: &[0],
        prototype_ids: &[0],
    };
    let terms = total_loss(&mut tape, &store, &set, batch, &objective).unwrap();
    let b = terms.breakdown(&tape);
    let attraction = (1.0f64 / 0.07).exp();
    assert_eq!(b.l_ita, 0.0);
    assert_eq!(b.l_reg_ce, 0.0);
    assert!((b.l_total + attraction).abs() < 1e-9 * attraction);
    assert_eq!(b.l_total, b.l_prot);
}

#[test]
fn disabled_terms_contribute_zero() {
    let t = toy(3);
    let mut tape = Tape::new();
    let (f_v, f_ts, probs) = t.features(&mut tape, &t.store);
    let batch = BatchFeatures {
        f_v,
        f_ts,
        probs,
        labels: &t.labels,
        prototype_ids: &t.protos,
    };
    let objective = Objective {
        switches: LossSwitches {
            ita: false,
            prot: false,
            reg_ce: false,
        },
        ..Objective::default()
    };
    let b = total_loss(&mut tape, &t.store, &t.set, batch, &objective)
        .unwrap()
        .breakdown(&tape);
    assert_eq!(b.l_ita, 0.0);
    assert_eq!(b.l_prot, 0.0);
    let ce = cross_entropy_probs(&mut tape, probs, &t.labels).unwrap();
    assert_eq!(b.l_reg_ce, tape.value(ce).item());
}

#[test]
fn total_rejects_inconsistent_labels() {
    let t = toy(1);
    let mut tape = Tape::new();
    let (f_v, f_ts, probs) = t.features(&mut tape, &t.store);
    let mut labels = t.labels.clone();
    labels[0] = 1 - labels[0];
    let batch = BatchFeatures {
        f_v,
        f_ts,
        probs,
        labels: &labels,
        prototype_ids: &t.protos,
    };
    let err = total_loss(&mut tape, &t.store, &t.set, batch, &Objective::default()).unwrap_err();
    assert!(matches!(err, Error::Input(_)));
}

#[test]
fn losses_are_permutation_invariant() {
    for seed in 0..20 {
        let t = toy(seed);
        let n = t.labels.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.rotate_left(1);
        order.swap(0, n - 1);
        let eval = |perm: &[usize]| {
            let mut tape = Tape::new();
            let (f_v, f_ts, probs) = t.features(&mut tape, &t.store);
            let f_v = tape.gather_rows(f_v, perm).unwrap();
            let f_ts = tape.gather_rows(f_ts, perm).unwrap();
            let probs = tape.gather_rows(probs, perm).unwrap();
            let labels: Vec<usize> = perm.iter().map(|&i| t.labels[i]).collect();
            let protos: Vec<usize> = perm.iter().map(|&i| t.protos[i]).collect();
            let batch = BatchFeatures {
                f_v,
                f_ts,
                probs,
                labels: &labels,
                prototype_ids: &protos,
            };
            let objective = Objective {
                weights: t.weights,
                ..Objective::default()
            };
            total_loss(&mut tape, &t.store, &t.set, batch, &objective)
                .unwrap()
                .breakdown(&tape)
        };
        let a = eval(&(0..n).collect::<Vec<_>>());
        let b = eval(&order);
        for (x, y) in [
            (a.l_ita, b.l_ita),
            (a.l_prot, b.l_prot),
            (a.l_reg_ce, b.l_reg_ce),
            (a.l_total, b.l_total),
        ] {
            assert!((x - y).abs() <= 1e-9, "seed {seed}: {x} vs {y}");
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Σ cos(f_v_i, m_k(i)) before and after one gradient step of size `lr` on
/// the attraction objective, updating the selected parameters.
fn pull_step(t: &mut Toy, ids: &[ParamId], lr: f64) -> (f64, f64) {
    let total_cos = |s: &ParamStore| -> f64 {
        let fv = s.value(t.fv);
        let m = s.value(t.set.m);
        t.protos
            .iter()
            .enumerate()
            .map(|(i, &k)| cosine(fv.row(i), m.row(k)))
            .sum()
    };
    let before = total_cos(&t.store);
    let mut tape = Tape::new();
    let (fv, fts, _) = t.features(&mut tape, &t.store);
    let m = tape.param(&t.store, t.set.m);
    let l = loss_prot(
        &mut tape,
        fv,
        fts,
        &t.protos,
        m,
        t.weights.tau2,
        0.0,
        ProtSign::Corrected,
    )
    .unwrap();
    tape.backward(l).unwrap();
    t.store.zero_grads();
    t.store.accumulate_grads(&tape);
    for &id in ids {
        let p = t.store.get_mut(id);
        let g = p.tensor.grad().unwrap().to_vec();
        for (v, g) in p.tensor.values_mut().iter_mut().zip(g) {
            *v -= lr * g;
        }
    }
    (before, total_cos(&t.store))
}

#[test]
fn attraction_step_pulls_features_toward_prototypes() {
    for seed in 0..50 {
        let mut t = toy(seed);
        let ids = [t.fv];
        let (before, after) = pull_step(&mut t, &ids, 1e-4);
        assert!(after > before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn attraction_step_pulls_prototypes_toward_their_samples() {
    // One sample per prototype with matching image and prompt features, so
    // each prototype's gradient involves only its own sample.
    for seed in 0..50 {
        let mut t = toy(seed);
        let n = t.labels.len().min(t.set.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let h = t.store.value(t.fv).cols();
        let fv = random_matrix(&mut rng, n, h);
        t.store.get_mut(t.fv).tensor = fv.clone();
        t.store.get_mut(t.fts).tensor = fv;
        t.store.get_mut(t.logits).tensor = Tensor::zeros(vec![n, 2]);
        t.protos = (0..n).collect();
        t.labels = t.protos.iter().map(|&k| t.set.class_map()[k]).collect();
        let ids = [t.set.m];
        let (before, after) = pull_step(&mut t, &ids, 1e-4);
        assert!(after > before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn separation_step_pushes_prototypes_apart() {
    let max_cos = |m: &Tensor| {
        let mut best = f64::NEG_INFINITY;
        for k in 0..m.rows() {
            for j in 0..m.rows() {
                if k != j {
                    best = best.max(cosine(m.row(k), m.row(j)));
                }
            }
        }
        best
    };
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.random_range(2..6);
        let h = rng.random_range(3..9);
        let m0 = random_matrix(&mut rng, c, h);
        let before = max_cos(&m0);
        assert!(before < 1.0);
        let mut tape = Tape::new();
        let m = tape.leaf(m0.clone(), true);
        let sep = prototype_separation(&mut tape, m, 0.07).unwrap();
        let l = tape.scale(sep, 0.1);
        tape.backward(l).unwrap();
        let g = tape.grad(m).unwrap();
        let scale = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        let stepped: Vec<f64> = m0
            .values()
            .iter()
            .zip(g)
            .map(|(v, g)| v - 1e-4 * g / scale)
            .collect();
        let after = max_cos(&Tensor::matrix(c, h, stepped).unwrap());
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}
