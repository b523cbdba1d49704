//! Precision / recall / F1 under the weighted and macro protocols, and the
//! ablation harness.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, Protocol, TrainConfig};
use crate::corpus::{DialogSet, LabelSpace};
use crate::error::{BmimError, Result};
use crate::model::Model;
use crate::training::train;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AverageMode {
    /// Per-class scores weighted by gold support.
    Weighted,
    /// Unweighted mean over classes.
    Macro,
}

impl FromStr for AverageMode {
    type Err = BmimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(AverageMode::Weighted),
            "macro" => Ok(AverageMode::Macro),
            other => Err(BmimError::Config(format!("unknown averaging mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold count.
    pub support: usize,
    pub predicted: usize,
    /// Whether this class enters the average.
    pub averaged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub mode: AverageMode,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub neutral_excluded: bool,
    pub utterances: usize,
    pub per_label: Vec<ClassMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sentiment: TaskMetrics,
    pub act: TaskMetrics,
}

impl MetricsReport {
    /// Mean of the two task F1 scores.
    pub fn combined_f1(&self) -> f64 {
        (self.sentiment.f1 + self.act.f1) / 2.0
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, t) in [("DSC", &self.sentiment), ("DAR", &self.act)] {
            let mode = match t.mode {
                AverageMode::Weighted => "weighted",
                AverageMode::Macro => "macro",
            };
            let excl = if t.neutral_excluded { ", neutral excluded" } else { "" };
            let _ = writeln!(out, "{name} ({mode}{excl}, {} utterances)", t.utterances);
            let _ = writeln!(out, "  {:<20} {:>9} {:>9} {:>9} {:>8}", "label", "precision", "recall", "f1", "support");
            for c in &t.per_label {
                let mark = if c.averaged { ' ' } else { '*' };
                let _ = writeln!(
                    out,
                    "  {:<19}{mark} {:>9.4} {:>9.4} {:>9.4} {:>8}",
                    c.label, c.precision, c.recall, c.f1, c.support
                );
            }
            let _ = writeln!(out, "  {:<20} {:>9.4} {:>9.4} {:>9.4}", "average", t.precision, t.recall, t.f1);
        }
        out
    }
}

/// Averaging settings per task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub sentiment_mode: AverageMode,
    pub act_mode: AverageMode,
    /// Drop the neutral class from the sentiment average.
    pub exclude_neutral: bool,
    /// Drop utterances whose gold sentiment is neutral instead.
    pub drop_neutral_utterances: bool,
}

impl EvalOptions {
    pub fn uniform(mode: AverageMode, exclude_neutral: bool) -> Self {
        EvalOptions {
            sentiment_mode: mode,
            act_mode: mode,
            exclude_neutral,
            drop_neutral_utterances: false,
        }
    }

    pub fn protocol(p: Protocol) -> Self {
        match p {
            Protocol::Mastodon => EvalOptions {
                sentiment_mode: AverageMode::Macro,
                act_mode: AverageMode::Weighted,
                exclude_neutral: true,
                drop_neutral_utterances: false,
            },
            Protocol::Dailydialog => EvalOptions::uniform(AverageMode::Macro, false),
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Metric core. Classes enter the average when they occur in the gold or
/// predicted labels and are not `excluded`. Zero denominators score 0.
pub fn task_metrics(
    pred: &[usize],
    gold: &[usize],
    labels: &[String],
    mode: AverageMode,
    excluded: Option<usize>,
) -> TaskMetrics {
    assert_eq!(pred.len(), gold.len(), "prediction and gold lengths differ");
    let k = labels.len();
    let mut tp = vec![0usize; k];
    let mut n_pred = vec![0usize; k];
    let mut n_gold = vec![0usize; k];
    for (&p, &g) in pred.iter().zip(gold) {
        n_pred[p] += 1;
        n_gold[g] += 1;
        if p == g {
            tp[p] += 1;
        }
    }
    let per_label: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let precision = ratio(tp[c], n_pred[c]);
            let recall = ratio(tp[c], n_gold[c]);
            ClassMetrics {
                label: labels[c].clone(),
                precision,
                recall,
                f1: f1_score(precision, recall),
                support: n_gold[c],
                predicted: n_pred[c],
                averaged: (n_gold[c] > 0 || n_pred[c] > 0) && Some(c) != excluded,
            }
        })
        .collect();
    let (precision, recall, f1) = average(&per_label, mode);
    TaskMetrics {
        mode,
        precision,
        recall,
        f1,
        neutral_excluded: excluded.is_some(),
        utterances: gold.len(),
        per_label,
    }
}

fn average(classes: &[ClassMetrics], mode: AverageMode) -> (f64, f64, f64) {
    let included: Vec<&ClassMetrics> = classes.iter().filter(|c| c.averaged).collect();
    if included.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    match mode {
        AverageMode::Macro => {
            let n = included.len() as f64;
            let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
            for c in &included {
                p += c.precision;
                r += c.recall;
                f += c.f1;
            }
            (p / n, r / n, f / n)
        }
        AverageMode::Weighted => {
            let total: usize = included.iter().map(|c| c.support).sum();
            if total == 0 {
                return (0.0, 0.0, 0.0);
            }
            let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
            for c in &included {
                let w = c.support as f64 / total as f64;
                p += w * c.precision;
                r += w * c.recall;
                f += w * c.f1;
            }
            (p, r, f)
        }
    }
}

/// Scores predicted label ids against gold ids for both tasks.
pub fn metrics_from_labels(
    labels: &LabelSpace,
    pred_s: &[usize],
    gold_s: &[usize],
    pred_a: &[usize],
    gold_a: &[usize],
    opts: &EvalOptions,
) -> MetricsReport {
    let neutral = labels.neutral_id;
    let (ps, gs): (Vec<usize>, Vec<usize>) = match (opts.drop_neutral_utterances, neutral) {
        (true, Some(nid)) => pred_s
            .iter()
            .zip(gold_s)
            .filter(|(_, &g)| g != nid)
            .map(|(&p, &g)| (p, g))
            .unzip(),
        _ => (pred_s.to_vec(), gold_s.to_vec()),
    };
    let excluded = if opts.exclude_neutral { neutral } else { None };
    MetricsReport {
        sentiment: task_metrics(&ps, &gs, &labels.sentiment_labels, opts.sentiment_mode, excluded),
        act: task_metrics(pred_a, gold_a, &labels.act_labels, opts.act_mode, None),
    }
}

/// Label-space mismatch as a data error naming the differing labels.
pub fn check_label_space(model: &LabelSpace, data: &LabelSpace) -> Result<()> {
    if model.sentiment_labels == data.sentiment_labels && model.act_labels == data.act_labels {
        return Ok(());
    }
    let diff = |a: &[String], b: &[String]| -> Vec<String> {
        a.iter()
            .filter(|l| !b.contains(l))
            .chain(b.iter().filter(|l| !a.contains(l)))
            .cloned()
            .collect()
    };
    let mut names = diff(&model.sentiment_labels, &data.sentiment_labels);
    names.extend(diff(&model.act_labels, &data.act_labels));
    let detail = if names.is_empty() {
        "label order differs".to_string()
    } else {
        format!("labels {}", names.join(", "))
    };
    Err(BmimError::Data(format!(
        "data label space does not match the checkpoint: {detail}"
    )))
}

/// Predicted `(sentiment, act)` ids for every utterance, in corpus order.
pub fn predict_labels(model: &Model, data: &DialogSet) -> Result<(Vec<usize>, Vec<usize>)> {
    let per_dialog: Vec<Result<(Vec<usize>, Vec<usize>)>> = data
        .dialogs
        .par_iter()
        .map(|d| Ok(model.predict(d)?.predicted()))
        .collect();
    let (mut s, mut a) = (Vec::new(), Vec::new());
    for r in per_dialog {
        let (ds, da) = r?;
        s.extend(ds);
        a.extend(da);
    }
    Ok((s, a))
}

pub fn evaluate(model: &Model, data: &DialogSet, opts: &EvalOptions) -> Result<MetricsReport> {
    if data.num_utterances() == 0 {
        return Err(BmimError::Data("evaluation data is empty".into()));
    }
    check_label_space(&model.labels, &data.label_space)?;
    let (pred_s, pred_a) = predict_labels(model, data)?;
    let gold_s: Vec<usize> = data.utterances().map(|u| u.sentiment).collect();
    let gold_a: Vec<usize> = data.utterances().map(|u| u.act).collect();
    Ok(metrics_from_labels(&model.labels, &pred_s, &gold_s, &pred_a, &gold_a, opts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub dsc_f1: f64,
    pub dar_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<24} {:>8} {:>8}\n", "variant", "DSC F1", "DAR F1");
        for r in &self.rows {
            let _ = writeln!(out, "{:<24} {:>8.4} {:>8.4}", r.variant, r.dsc_f1, r.dar_f1);
        }
        out
    }
}

/// Trains each variant with the shared seed and scores it on `test`.
pub fn ablate(
    cfg: &TrainConfig,
    variants: &[Ablation],
    train_set: &DialogSet,
    dev: &DialogSet,
    test: &DialogSet,
    opts: &EvalOptions,
) -> Result<AblationTable> {
    if variants.is_empty() {
        return Err(BmimError::Config("at least one ablation variant is required".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let mut vcfg = cfg.clone();
        vcfg.ablation = v.clone();
        let ckpt = train(&vcfg, train_set, dev)?;
        let report = evaluate(&ckpt.model, test, opts)?;
        rows.push(AblationRow {
            variant: v.name(),
            dsc_f1: report.sentiment.f1,
            dar_f1: report.act.f1,
        });
    }
    Ok(AblationTable { rows })
}
