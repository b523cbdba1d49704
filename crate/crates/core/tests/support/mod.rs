//! Shared helpers for the integration tests: brute-force oracles written
//! from the definitions rather than from the library code, random-case
//! strategies, and the invariant checks run by the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeSet;

use bmim::autograd::Tape;
use bmim::bmin::{attention_readout, multihop_direction, Direction, DirectionParams};
use bmim::corpus::{cooccurrence_sets, empirical_marginals, CooccurrenceSets};
use bmim::evaluation::AverageMode;
use bmim::fsn::{cummax, fsn_step, FsnParams};
use bmim::heads::{contrastive_loss_value, cross_entropy_value, dual_loss, DualDirection};
use bmim::params::ParamStore;
use bmim::tensor::{argmax, softmax, Mat};
use bmim::{Arch, Dialog, DialogSet, LabelSpace, PredictionBundle, TrainConfig, Utterance};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// Small dimensions that keep end-to-end runs in seconds.
pub fn small_config(arch: Arch) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.arch = arch;
    cfg.model.d_w = 16;
    cfg.model.d = 32;
    cfg.model.d_e = 16;
    cfg.bmin.hops = 2;
    cfg
}

/// One dialog holding the given `(sentiment, act)` pairs.
pub fn dialog_set(pairs: &[(usize, usize)], n_s: usize, n_a: usize) -> DialogSet {
    let labels = LabelSpace::new(names("s", n_s), names("a", n_a)).unwrap();
    let utterances = pairs
        .iter()
        .map(|&(sentiment, act)| Utterance {
            speaker: "A".into(),
            tokens: vec!["w".into()],
            sentiment,
            act,
        })
        .collect();
    DialogSet {
        label_space: labels,
        dialogs: vec![Dialog {
            id: "d0".into(),
            utterances,
        }],
    }
}

// ---------------------------------------------------------------- oracles

#[derive(Debug, PartialEq)]
pub struct OracleScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class_f1: Vec<f64>,
}

/// Naive per-class counting over all utterances, then macro or
/// support-weighted averaging over classes seen in gold or predictions.
pub fn metric_oracle(
    pred: &[usize],
    gold: &[usize],
    k: usize,
    mode: AverageMode,
    excluded: Option<usize>,
) -> OracleScores {
    let mut rows = Vec::new();
    for c in 0..k {
        let mut tp = 0usize;
        let mut predicted = 0usize;
        let mut support = 0usize;
        for i in 0..gold.len() {
            if pred[i] == c {
                predicted += 1;
            }
            if gold[i] == c {
                support += 1;
            }
            if pred[i] == c && gold[i] == c {
                tp += 1;
            }
        }
        let p = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        let r = if support == 0 { 0.0 } else { tp as f64 / support as f64 };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        let counted = (support > 0 || predicted > 0) && excluded != Some(c);
        rows.push((p, r, f, support, counted));
    }
    let per_class_f1 = rows.iter().map(|r| r.2).collect();
    let used: Vec<_> = rows.iter().filter(|r| r.4).collect();
    let (mut precision, mut recall, mut f1) = (0.0, 0.0, 0.0);
    match mode {
        AverageMode::Macro if !used.is_empty() => {
            for r in &used {
                precision += r.0;
                recall += r.1;
                f1 += r.2;
            }
            let n = used.len() as f64;
            precision /= n;
            recall /= n;
            f1 /= n;
        }
        AverageMode::Weighted => {
            let total: usize = used.iter().map(|r| r.3).sum();
            if total > 0 {
                for r in &used {
                    let w = r.3 as f64 / total as f64;
                    precision += w * r.0;
                    recall += w * r.1;
                    f1 += w * r.2;
                }
            }
        }
        _ => {}
    }
    OracleScores {
        precision,
        recall,
        f1,
        per_class_f1,
    }
}

/// Term-by-term supervised contrastive loss over label embeddings, plain
/// `exp`/`ln` with no stabilisation.
pub fn contrastive_oracle(e: &Mat, sets: &CooccurrenceSets, tau: f64, eps: f64) -> f64 {
    let sim = |i: usize, j: usize| -> f64 {
        let mut s = 0.0;
        for c in 0..e.cols {
            s += e.get(i, c) * e.get(j, c);
        }
        (s / tau).exp()
    };
    let mut total = 0.0;
    for i in 0..e.rows {
        let pos = &sets.positives[i];
        if pos.is_empty() {
            continue;
        }
        // −ln(sim_p / D) = ln(1 + (D − sim_p) / sim_p), with D − sim_p summed directly
        let mut anchor = 0.0;
        for &p in pos {
            let mut rest = eps;
            for &q in pos.iter().chain(&sets.negatives[i]) {
                if q != p {
                    rest += sim(i, q);
                }
            }
            anchor -= (rest / sim(i, p)).ln_1p();
        }
        total += -anchor / pos.len() as f64;
    }
    total
}

/// Squared duality gap for one utterance written out directly.
pub fn dual_oracle(p_s: f64, p_a_given_s: f64, p_a: f64, p_s_given_a: f64) -> f64 {
    let gap = (p_s * p_a_given_s).ln() - (p_a * p_s_given_a).ln();
    gap * gap
}

/// Sets where `i` and `j` co-occur when some utterance carries both.
pub fn brute_force_sets(pairs: &[(usize, usize)], n_s: usize, n_a: usize) -> CooccurrenceSets {
    let l = n_s + n_a;
    let mut positives = vec![BTreeSet::new(); l];
    let mut negatives = vec![BTreeSet::new(); l];
    for i in 0..l {
        for j in 0..l {
            if i == j {
                continue;
            }
            let together = pairs.iter().any(|&(s, a)| {
                let joint = [s, n_s + a];
                joint.contains(&i) && joint.contains(&j)
            });
            if together {
                positives[i].insert(j);
            } else {
                negatives[i].insert(j);
            }
        }
    }
    CooccurrenceSets { positives, negatives }
}

// ---------------------------------------------------------------- suites

/// Runs `test` over `cases` deterministic random inputs.
pub fn run_suite<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

pub fn logits_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, 1..16)
}

pub fn check_cummax(logits: Vec<f64>) -> Result<(), TestCaseError> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let x = tape.constant(Mat::row_vector(logits));
    let g = cummax(&mut tape, x);
    let v = tape.value(g).row(0).to_vec();
    for w in v.windows(2) {
        prop_assert!(w[1] >= w[0], "not monotone: {v:?}");
    }
    for &x in &v {
        prop_assert!((0.0..=1.0 + 1e-12).contains(&x), "out of range: {v:?}");
    }
    prop_assert!(close(*v.last().unwrap(), 1.0, 1e-12), "does not end at 1: {v:?}");
    Ok(())
}

pub fn fsn_case() -> impl Strategy<Value = (usize, bool, u64, Vec<f64>, Vec<f64>)> {
    (1usize..10, any::<bool>(), any::<u64>()).prop_flat_map(|(d, shared, seed)| {
        (
            Just(d),
            Just(shared),
            Just(seed),
            prop::collection::vec(-3.0f64..3.0, d),
            prop::collection::vec(-1.0f64..1.0, d),
        )
    })
}

pub fn check_partition_sum(case: (usize, bool, u64, Vec<f64>, Vec<f64>)) -> Result<(), TestCaseError> {
    let (d, shared, seed, u, h) = case;
    let mut store = ParamStore::new();
    let params = FsnParams::new(&mut store, d, shared, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut tape = Tape::new(&store);
    let u = tape.constant(Mat::row_vector(u));
    let h = tape.constant(Mat::row_vector(h));
    let step = fsn_step(&mut tape, u, h, &params);
    let v = |x| tape.value(x).row(0).to_vec();
    let (s, a, c) = (v(step.sentiment_gate), v(step.act_gate), v(step.candidate));
    let (ps, pa, pr) = (v(step.p_sentiment), v(step.p_act), v(step.p_shared));
    for k in 0..d {
        let want = (s[k] + a[k] - s[k] * a[k]) * c[k];
        let got = ps[k] + pa[k] + pr[k];
        prop_assert!(close(got, want, 1e-6), "coordinate {k}: {got} vs {want}");
    }
    Ok(())
}

pub fn attention_case() -> impl Strategy<Value = (bool, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (1usize..8, 1usize..6, any::<bool>()).prop_flat_map(|(n, d, f2b)| {
        let rows = prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), n);
        (Just(f2b), rows.clone(), rows)
    })
}

fn direction(f2b: bool) -> Direction {
    if f2b {
        Direction::FrontToBack
    } else {
        Direction::BackToFront
    }
}

pub fn check_attention(case: (bool, Vec<Vec<f64>>, Vec<Vec<f64>>)) -> Result<(), TestCaseError> {
    let (f2b, x, q) = case;
    let n = x.len();
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let xv = tape.constant(Mat::from_rows(&x));
    let qv = tape.constant(Mat::from_rows(&q));
    let read = attention_readout(&mut tape, xv, qv, direction(f2b));
    let alpha = tape.value(read.alpha);
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..n {
            let allowed = if f2b { j <= i } else { j >= i };
            let w = alpha.get(i, j);
            if allowed {
                prop_assert!(w >= 0.0);
                sum += w;
            } else {
                prop_assert!(w == 0.0, "masked weight ({i},{j}) = {w}");
            }
        }
        prop_assert!(close(sum, 1.0, 1e-6), "row {i} sums to {sum}");
    }
    Ok(())
}

pub type CausalityCase = (usize, usize, u64, Vec<Vec<f64>>, usize, Vec<f64>);

pub fn causality_case() -> impl Strategy<Value = CausalityCase> {
    (2usize..7, 1usize..5, 1usize..4, any::<u64>()).prop_flat_map(|(n, d, hops, seed)| {
        (
            Just(d),
            Just(hops),
            Just(seed),
            prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), n),
            0..n,
            prop::collection::vec(prop_oneof![-2.0f64..-0.5, 0.5f64..2.0], d),
        )
    })
}

fn run_direction(store: &ParamStore, p: &DirectionParams, x: &[Vec<f64>], dir: Direction, hops: usize) -> Mat {
    let mut tape = Tape::new(store);
    let xv = tape.constant(Mat::from_rows(x));
    let q = multihop_direction(&mut tape, xv, dir, hops, p, None);
    tape.value(q).clone()
}

/// Perturbing utterance `k` leaves front-to-back outputs before `k` and
/// back-to-front outputs after `k` bit-identical, while the concatenation
/// changes on both sides of `k`.
pub fn check_causality(case: CausalityCase) -> Result<(), TestCaseError> {
    let (d, hops, seed, x, k, delta) = case;
    let n = x.len();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = DirectionParams::new(&mut store, "f", d, &mut rng);
    let b = DirectionParams::new(&mut store, "b", d, &mut rng);
    let mut y = x.clone();
    for (v, dv) in y[k].iter_mut().zip(&delta) {
        *v += dv;
    }
    let (f0, f1) = (
        run_direction(&store, &f, &x, Direction::FrontToBack, hops),
        run_direction(&store, &f, &y, Direction::FrontToBack, hops),
    );
    let (b0, b1) = (
        run_direction(&store, &b, &x, Direction::BackToFront, hops),
        run_direction(&store, &b, &y, Direction::BackToFront, hops),
    );
    for i in 0..k {
        prop_assert_eq!(f0.row(i), f1.row(i), "f2b row {} saw the future", i);
    }
    for i in k + 1..n {
        prop_assert_eq!(b0.row(i), b1.row(i), "b2f row {} saw the past", i);
    }
    // the concatenation sees both sides
    for i in 0..n {
        if i != k {
            let changed = f0.row(i) != f1.row(i) || b0.row(i) != b1.row(i);
            prop_assert!(changed, "row {} ignores utterance {}", i, k);
        }
    }
    Ok(())
}

pub type LossCase = (usize, usize, Vec<(usize, usize)>, Vec<f64>, Vec<f64>, f64, f64);

pub fn loss_case() -> impl Strategy<Value = LossCase> {
    (1usize..4, 1usize..5, 1usize..8, 1usize..6).prop_flat_map(|(n_s, n_a, n, d_e)| {
        (
            Just(n_s),
            Just(n_a),
            prop::collection::vec((0..n_s, 0..n_a), n),
            prop::collection::vec(-2.0f64..2.0, (n_s + n_a) * d_e),
            prop::collection::vec(-8.0f64..8.0, n * (n_s + n_a) * 2),
            0.05f64..2.0,
            0.0f64..1e-3,
        )
    })
}

fn softmax_rows(logits: &[f64], rows: usize, cols: usize) -> Mat {
    let data = logits[..rows * cols].chunks(cols).flat_map(softmax).collect();
    Mat::from_vec(rows, cols, data)
}

/// Cross-entropy for both tasks, the contrastive loss and both duality
/// directions are all non-negative.
pub fn check_losses_non_negative(case: LossCase) -> Result<(), TestCaseError> {
    let (n_s, n_a, pairs, e, logits, tau, eps) = case;
    let n = pairs.len();
    let l = n_s + n_a;
    let gold_s: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let gold_a: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let y_s = softmax_rows(&logits, n, n_s);
    let y_a = softmax_rows(&logits[n * n_s..], n, n_a);
    let aux_s = softmax_rows(&logits[n * l..], n, n_s);
    let aux_a = softmax_rows(&logits[n * (l + n_s)..], n, n_a);

    let ce_s = cross_entropy_value(&y_s, &gold_s);
    let ce_a = cross_entropy_value(&y_a, &gold_a);
    prop_assert!(ce_s >= 0.0 && ce_a >= 0.0, "cross-entropy {ce_s} {ce_a}");

    let ds = dialog_set(&pairs, n_s, n_a);
    let sets = cooccurrence_sets(&ds, &ds.label_space);
    let emb = Mat::from_vec(l, e.len() / l, e);
    let cl = contrastive_loss_value(&emb, &sets, tau, eps);
    prop_assert!(cl >= 0.0, "contrastive {cl}");

    let marginals = empirical_marginals(&ds);
    let bundle = PredictionBundle {
        o_s: y_s.clone(),
        y_s,
        o_a: y_a.clone(),
        y_a,
        aux_y_s: Some(aux_s),
        aux_y_a: Some(aux_a),
    };
    for dir in [DualDirection::SentimentToAct, DualDirection::ActToSentiment] {
        let dl = dual_loss(&gold_s, &gold_a, &bundle, &marginals, dir).unwrap();
        prop_assert!(dl >= 0.0, "dual {dl}");
    }
    Ok(())
}

pub fn shift_case() -> impl Strategy<Value = (Vec<f64>, f64)> {
    (prop::collection::vec(-20.0f64..20.0, 1..12), -500.0f64..500.0)
}

/// Adding a constant to every logit changes neither the softmax argmax nor
/// its relation to the raw argmax.
pub fn check_shift_invariance(case: (Vec<f64>, f64)) -> Result<(), TestCaseError> {
    let (logits, c) = case;
    let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
    let raw = argmax(&logits);
    prop_assert_eq!(argmax(&softmax(&logits)), raw);
    prop_assert_eq!(argmax(&softmax(&shifted)), raw);

    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let a = tape.constant(Mat::row_vector(logits.clone()));
    let b = tape.constant(Mat::row_vector(shifted));
    let pa = tape.softmax_rows(a);
    let pb = tape.softmax_rows(b);
    prop_assert_eq!(argmax(tape.value(pa).row(0)), raw);
    prop_assert_eq!(argmax(tape.value(pb).row(0)), raw);
    Ok(())
}
