//! Randomised properties of the corpus and metric layers.

mod support;

use bmim::corpus::{batch_dialogs, cooccurrence_sets, empirical_marginals};
use bmim::evaluation::task_metrics;
use bmim::{parse_dialogs, AverageMode, Dialog, DialogSet, LabelSource, LabelSpace, Utterance};
use proptest::prelude::*;
use support::{brute_force_sets, dialog_set, metric_oracle, names};

fn mode_strategy() -> impl Strategy<Value = AverageMode> {
    prop_oneof![Just(AverageMode::Macro), Just(AverageMode::Weighted)]
}

/// `(k, pred, gold)` with labels in `0..k`.
fn labelled(max_k: usize, max_n: usize) -> impl Strategy<Value = (usize, Vec<usize>, Vec<usize>)> {
    (1..=max_k, 0..=max_n).prop_flat_map(|(k, n)| {
        (
            Just(k),
            prop::collection::vec(0..k, n),
            prop::collection::vec(0..k, n),
        )
    })
}

fn corpus() -> impl Strategy<Value = DialogSet> {
    let token = "[a-z0-9?!.']{1,6}";
    let utterance = (
        "[AB]",
        prop::collection::vec(token, 1..6),
        0usize..3,
        0usize..4,
    );
    let dialog = prop::collection::vec(utterance, 1..6);
    prop::collection::vec(dialog, 0..5).prop_map(|dialogs| DialogSet {
        label_space: LabelSpace::new(names("s", 3), names("a", 4)).unwrap(),
        dialogs: dialogs
            .into_iter()
            .enumerate()
            .map(|(i, utts)| Dialog {
                id: format!("d{i}"),
                utterances: utts
                    .into_iter()
                    .map(|(speaker, tokens, sentiment, act)| Utterance {
                        speaker,
                        tokens,
                        sentiment,
                        act,
                    })
                    .collect(),
            })
            .collect(),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn jsonl_round_trip_preserves_content(ds in corpus()) {
        let text = ds.to_jsonl().unwrap();
        let back = parse_dialogs(&text, &LabelSource::Fixed(ds.label_space.clone())).unwrap();
        prop_assert_eq!(back.dialogs.len(), ds.dialogs.len());
        for (a, b) in back.dialogs.iter().zip(&ds.dialogs) {
            prop_assert_eq!(&a.id, &b.id);
            prop_assert_eq!(a.utterances.len(), b.utterances.len());
            for (u, v) in a.utterances.iter().zip(&b.utterances) {
                prop_assert_eq!(&u.speaker, &v.speaker);
                prop_assert_eq!(&u.tokens, &v.tokens);
                prop_assert_eq!((u.sentiment, u.act), (v.sentiment, v.act));
            }
        }
    }

    #[test]
    fn cooccurrence_matches_enumeration(
        n_s in 1usize..4,
        n_a in 1usize..5,
        raw in prop::collection::vec((0usize..16, 0usize..16), 1..12),
    ) {
        let pairs: Vec<(usize, usize)> = raw.iter().map(|&(s, a)| (s % n_s, a % n_a)).collect();
        let ds = dialog_set(&pairs, n_s, n_a);
        let sets = cooccurrence_sets(&ds, &ds.label_space);
        let want = brute_force_sets(&pairs, n_s, n_a);
        prop_assert_eq!(&sets.positives, &want.positives);
        prop_assert_eq!(&sets.negatives, &want.negatives);
        for i in 0..sets.len() {
            prop_assert!(!sets.positives[i].contains(&i));
            prop_assert!(sets.positives[i].is_disjoint(&sets.negatives[i]));
            for &j in &sets.positives[i] {
                prop_assert!(sets.positives[j].contains(&i), "asymmetric pair {} {}", i, j);
            }
        }
    }

    #[test]
    fn marginals_are_distributions(
        raw in prop::collection::vec((0usize..3, 0usize..4), 1..30),
    ) {
        let m = empirical_marginals(&dialog_set(&raw, 3, 4));
        for v in [&m.sentiment, &m.act] {
            prop_assert!(v.iter().all(|&p| p >= 0.0));
            prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn batches_cover_every_dialog_once(n in 0usize..30, size in 1usize..8, seed in any::<Option<u64>>()) {
        let ds = DialogSet {
            label_space: LabelSpace::new(names("s", 1), names("a", 1)).unwrap(),
            dialogs: (0..n).map(|i| Dialog { id: format!("d{i}"), utterances: vec![] }).collect(),
        };
        let batches = batch_dialogs(&ds, size, seed);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        prop_assert!(batches.iter().all(|b| !b.indices.is_empty() && b.indices.len() <= size));
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(batch_dialogs(&ds, size, seed), batches);
    }

    #[test]
    fn metric_core_agrees_with_oracle(
        (k, pred, gold) in labelled(6, 40),
        mode in mode_strategy(),
        exclude in any::<bool>(),
    ) {
        let excluded = exclude.then_some(0);
        let m = task_metrics(&pred, &gold, &names("c", k), mode, excluded);
        let o = metric_oracle(&pred, &gold, k, mode, excluded);
        prop_assert_eq!((m.precision, m.recall, m.f1), (o.precision, o.recall, o.f1));
        for v in [m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn metrics_ignore_utterance_order(
        (k, pred, gold) in labelled(5, 30),
        mode in mode_strategy(),
        rotate in 0usize..30,
    ) {
        let n = gold.len().max(1);
        let r = rotate % n;
        let mut p2 = pred.clone();
        let mut g2 = gold.clone();
        p2.rotate_left(r.min(pred.len()));
        g2.rotate_left(r.min(gold.len()));
        p2.reverse();
        g2.reverse();
        let a = task_metrics(&pred, &gold, &names("c", k), mode, None);
        let b = task_metrics(&p2, &g2, &names("c", k), mode, None);
        prop_assert!((a.f1 - b.f1).abs() < 1e-12);
        prop_assert!((a.precision - b.precision).abs() < 1e-12);
        prop_assert!((a.recall - b.recall).abs() < 1e-12);
    }

    #[test]
    fn weighted_f1_is_support_weighted_sum((k, pred, gold) in labelled(6, 40)) {
        let m = task_metrics(&pred, &gold, &names("c", k), AverageMode::Weighted, None);
        let total: usize = m.per_label.iter().filter(|c| c.averaged).map(|c| c.support).sum();
        let want: f64 = if total == 0 {
            0.0
        } else {
            m.per_label
                .iter()
                .filter(|c| c.averaged)
                .map(|c| c.support as f64 / total as f64 * c.f1)
                .sum()
        };
        prop_assert!((m.f1 - want).abs() < 1e-12);
    }

    #[test]
    fn excluding_an_absent_neutral_changes_nothing(
        (k, pred, gold) in labelled(5, 30),
        mode in mode_strategy(),
    ) {
        // label k is the neutral class and never occurs
        let labels = names("c", k + 1);
        let a = task_metrics(&pred, &gold, &labels, mode, None);
        let b = task_metrics(&pred, &gold, &labels, mode, Some(k));
        prop_assert_eq!((a.precision, a.recall, a.f1), (b.precision, b.recall, b.f1));
    }
}
