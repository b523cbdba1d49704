//! Label embeddings, the three output architectures and the four losses.
//!
//! One embedding table holds every label (sentiments first, then acts). Its
//! rows are the output weights of the classifiers, so the contrastive loss
//! on the table also shapes the decision geometry.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::config::Arch;
use crate::corpus::{CooccurrenceSets, LabelSpace, Marginals};
use crate::error::{BmimError, Result};
use crate::layers::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Sentiment,
    Act,
}

/// `tanh(x Wᵀ + b) · E_taskᵀ`
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Classifier {
    pub hidden: Linear,
    pub task: Task,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadParams {
    pub label_embeddings: ParamId,
    pub num_sentiments: usize,
    pub num_acts: usize,
    pub sentiment: Classifier,
    pub act: Classifier,
    /// Reverse-direction classifier feeding the dual loss (arch b and c).
    pub aux: Option<Classifier>,
}

impl HeadParams {
    /// `q_width` is the per-task representation width (4d).
    pub fn new(
        store: &mut ParamStore,
        arch: Arch,
        q_width: usize,
        d_e: usize,
        num_sentiments: usize,
        num_acts: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let l = num_sentiments + num_acts;
        let label_embeddings =
            store.add_uniform("heads.label_embeddings", l, d_e, (3.0 / d_e as f64).sqrt(), rng);
        let mut make = |name: &str, width: usize, task: Task| Classifier {
            hidden: Linear::new(store, &format!("heads.{name}"), width, d_e, rng),
            task,
        };
        let (sentiment, act, aux) = match arch {
            Arch::Parallel => (
                make("sentiment", q_width, Task::Sentiment),
                make("act", q_width, Task::Act),
                None,
            ),
            Arch::SentimentToAct => (
                make("sentiment", q_width, Task::Sentiment),
                make("act_given_sentiment", 2 * q_width, Task::Act),
                Some(make("aux_sentiment", 2 * q_width, Task::Sentiment)),
            ),
            Arch::ActToSentiment => (
                make("sentiment_given_act", 2 * q_width, Task::Sentiment),
                make("act", q_width, Task::Act),
                Some(make("aux_act", 2 * q_width, Task::Act)),
            ),
        };
        HeadParams {
            label_embeddings,
            num_sentiments,
            num_acts,
            sentiment,
            act,
            aux,
        }
    }

    fn label_rows(&self, tape: &mut Tape, task: Task) -> Var {
        let e = tape.param(self.label_embeddings);
        match task {
            Task::Sentiment => tape.slice_rows(e, 0, self.num_sentiments),
            Task::Act => tape.slice_rows(e, self.num_sentiments, self.num_acts),
        }
    }
}

/// Returns `(scores, probs)`.
pub fn classify(tape: &mut Tape, input: Var, head: &Classifier, params: &HeadParams) -> (Var, Var) {
    let pre = head.hidden.apply(tape, input);
    let hidden = tape.tanh(pre);
    let labels = params.label_rows(tape, head.task);
    let scores = tape.matmul_t(hidden, labels);
    let probs = tape.softmax_rows(scores);
    (scores, probs)
}

/// Tape handles of one forward pass through the output layer.
#[derive(Clone, Copy, Debug)]
pub struct BundleVars {
    pub o_s: Var,
    pub y_s: Var,
    pub o_a: Var,
    pub y_a: Var,
    /// Reverse-direction distribution and the task it predicts.
    pub aux: Option<(Task, Var)>,
}

pub fn forward_architecture(
    tape: &mut Tape,
    arch: Arch,
    q_s: Var,
    q_a: Var,
    params: &HeadParams,
) -> BundleVars {
    match arch {
        Arch::Parallel => {
            let (o_s, y_s) = classify(tape, q_s, &params.sentiment, params);
            let (o_a, y_a) = classify(tape, q_a, &params.act, params);
            BundleVars { o_s, y_s, o_a, y_a, aux: None }
        }
        Arch::SentimentToAct => {
            let aux_head = params.aux.as_ref().expect("arch b has an auxiliary head");
            let (o_s, y_s) = classify(tape, q_s, &params.sentiment, params);
            let act_in = tape.concat_cols(&[q_a, q_s]);
            let (o_a, y_a) = classify(tape, act_in, &params.act, params);
            let aux_in = tape.concat_cols(&[q_s, q_a]);
            let (_, aux) = classify(tape, aux_in, aux_head, params);
            BundleVars { o_s, y_s, o_a, y_a, aux: Some((Task::Sentiment, aux)) }
        }
        Arch::ActToSentiment => {
            let aux_head = params.aux.as_ref().expect("arch c has an auxiliary head");
            let (o_a, y_a) = classify(tape, q_a, &params.act, params);
            let sent_in = tape.concat_cols(&[q_s, q_a]);
            let (o_s, y_s) = classify(tape, sent_in, &params.sentiment, params);
            let aux_in = tape.concat_cols(&[q_a, q_s]);
            let (_, aux) = classify(tape, aux_in, aux_head, params);
            BundleVars { o_s, y_s, o_a, y_a, aux: Some((Task::Act, aux)) }
        }
    }
}

/// Output distributions of one dialog.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionBundle {
    pub o_s: Mat,
    pub y_s: Mat,
    pub o_a: Mat,
    pub y_a: Mat,
    pub aux_y_s: Option<Mat>,
    pub aux_y_a: Option<Mat>,
}

impl PredictionBundle {
    pub fn from_tape(tape: &Tape, b: &BundleVars) -> Self {
        let (aux_y_s, aux_y_a) = match b.aux {
            Some((Task::Sentiment, v)) => (Some(tape.value(v).clone()), None),
            Some((Task::Act, v)) => (None, Some(tape.value(v).clone())),
            None => (None, None),
        };
        PredictionBundle {
            o_s: tape.value(b.o_s).clone(),
            y_s: tape.value(b.y_s).clone(),
            o_a: tape.value(b.o_a).clone(),
            y_a: tape.value(b.y_a).clone(),
            aux_y_s,
            aux_y_a,
        }
    }

    /// Argmax labels, ties to the lowest id.
    pub fn predicted(&self) -> (Vec<usize>, Vec<usize>) {
        let am = |m: &Mat| (0..m.rows).map(|i| crate::tensor::argmax(m.row(i))).collect();
        (am(&self.y_s), am(&self.y_a))
    }
}

/// `-Σ_i ln max(y[i, gold_i], floor)`, summed over rows.
pub fn cross_entropy(tape: &mut Tape, probs: Var, gold: &[usize]) -> Var {
    let picked = tape.pick(probs, gold);
    let logs = tape.log_floor(picked, PROB_FLOOR);
    let s = tape.sum(logs);
    tape.scale(s, -1.0)
}

/// Supervised contrastive loss over the label table: for every label with
/// at least one positive, the mean over positives of
/// `-ln(exp(e_i·e_p/τ) / (Σ_P exp(e_i·e_p'/τ) + Σ_N exp(e_i·e_n/τ) + ε))`.
pub fn contrastive_loss(tape: &mut Tape, e: Var, sets: &CooccurrenceSets, tau: f64, eps: f64) -> Var {
    let l = tape.value(e).rows;
    assert_eq!(sets.len(), l, "co-occurrence sets do not match the label table");
    let sims = tape.matmul_t(e, e);
    let sims = tape.scale(sims, 1.0 / tau);
    let mut denom_mask = vec![false; l * l];
    let mut pos_weight = Mat::zeros(l, l);
    for i in 0..l {
        let p = &sets.positives[i];
        if p.is_empty() {
            continue;
        }
        let w = 1.0 / p.len() as f64;
        for &j in p {
            denom_mask[i * l + j] = true;
            pos_weight.set(i, j, w);
        }
        for &j in &sets.negatives[i] {
            denom_mask[i * l + j] = true;
        }
    }
    // per positive: ln(D_i / exp(s_ip)), without the cancellation of ln D_i − s_ip
    let rows = tape.masked_log_ratio(sims, denom_mask, pos_weight, eps);
    tape.sum(rows)
}

pub fn contrastive_loss_value(e: &Mat, sets: &CooccurrenceSets, tau: f64, eps: f64) -> f64 {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let ev = tape.constant(e.clone());
    let loss = contrastive_loss(&mut tape, ev, sets, tau, eps);
    tape.scalar(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DualDirection {
    #[serde(rename = "s2a")]
    SentimentToAct,
    #[serde(rename = "a2s")]
    ActToSentiment,
}

impl DualDirection {
    pub fn for_arch(arch: Arch) -> Option<Self> {
        match arch {
            Arch::Parallel => None,
            Arch::SentimentToAct => Some(DualDirection::SentimentToAct),
            Arch::ActToSentiment => Some(DualDirection::ActToSentiment),
        }
    }
}

fn check_marginals(gold_s: &[usize], gold_a: &[usize], m: &Marginals) -> Result<()> {
    for &s in gold_s {
        if m.sentiment.get(s).copied().unwrap_or(0.0) <= 0.0 {
            return Err(BmimError::Data(format!(
                "sentiment label {s} has zero empirical marginal (unseen in training)"
            )));
        }
    }
    for &a in gold_a {
        if m.act.get(a).copied().unwrap_or(0.0) <= 0.0 {
            return Err(BmimError::Data(format!(
                "act label {a} has zero empirical marginal (unseen in training)"
            )));
        }
    }
    Ok(())
}

/// Sum over utterances of the squared duality gap
/// `ln P̂(s) + ln P(a|s) − ln P̂(a) − ln P(s|a)` (s→a; mirrored for a→s).
/// `main` is the pipeline output, `aux` the reverse-direction distribution.
#[allow(clippy::too_many_arguments)]
pub fn dual_loss_sum(
    tape: &mut Tape,
    main: Var,
    aux: Var,
    gold_s: &[usize],
    gold_a: &[usize],
    marginals: &Marginals,
    direction: DualDirection,
) -> Result<Var> {
    check_marginals(gold_s, gold_a, marginals)?;
    let n = gold_s.len();
    let (main_gold, aux_gold) = match direction {
        DualDirection::SentimentToAct => (gold_a, gold_s),
        DualDirection::ActToSentiment => (gold_s, gold_a),
    };
    let offset: Vec<f64> = (0..n)
        .map(|i| {
            let ls = marginals.sentiment[gold_s[i]].ln();
            let la = marginals.act[gold_a[i]].ln();
            match direction {
                DualDirection::SentimentToAct => ls - la,
                DualDirection::ActToSentiment => la - ls,
            }
        })
        .collect();
    let m = tape.pick(main, main_gold);
    let m = tape.log_floor(m, PROB_FLOOR);
    let a = tape.pick(aux, aux_gold);
    let a = tape.log_floor(a, PROB_FLOOR);
    let gap = tape.sub(m, a);
    let offset = tape.constant(Mat::from_vec(n, 1, offset));
    let gap = tape.add(gap, offset);
    let sq = tape.mul(gap, gap);
    Ok(tape.sum(sq))
}

/// Mean squared duality gap of one bundle.
pub fn dual_loss(
    gold_s: &[usize],
    gold_a: &[usize],
    preds: &PredictionBundle,
    marginals: &Marginals,
    direction: DualDirection,
) -> Result<f64> {
    let (main, aux) = match direction {
        DualDirection::SentimentToAct => (&preds.y_a, preds.aux_y_s.as_ref()),
        DualDirection::ActToSentiment => (&preds.y_s, preds.aux_y_a.as_ref()),
    };
    let aux = aux.ok_or_else(|| {
        BmimError::Contract("dual loss needs the auxiliary reverse distribution".into())
    })?;
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let mv = tape.constant(main.clone());
    let av = tape.constant(aux.clone());
    let s = dual_loss_sum(&mut tape, mv, av, gold_s, gold_a, marginals, direction)?;
    Ok(tape.scalar(s) / gold_s.len().max(1) as f64)
}

pub fn cross_entropy_value(probs: &Mat, gold: &[usize]) -> f64 {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let p = tape.constant(probs.clone());
    let l = cross_entropy(&mut tape, p, gold);
    tape.scalar(l)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sentiment: f64,
    pub act: f64,
    pub contrastive: Option<f64>,
    pub dual: Option<f64>,
    pub total: f64,
}

/// Combines the component losses the way each architecture prescribes.
pub fn joint_loss(
    arch: Arch,
    sentiment: f64,
    act: f64,
    contrastive: f64,
    dual: f64,
    lambda_cl: f64,
    lambda_dl: f64,
) -> LossBreakdown {
    match arch {
        Arch::Parallel => LossBreakdown {
            sentiment,
            act,
            contrastive: Some(contrastive),
            dual: None,
            total: sentiment + act + lambda_cl * contrastive,
        },
        Arch::SentimentToAct | Arch::ActToSentiment => LossBreakdown {
            sentiment,
            act,
            contrastive: None,
            dual: Some(dual),
            total: sentiment + act + lambda_dl * dual,
        },
    }
}

/// Tab-separated label embeddings: `label`, `task`, then one column per dimension.
pub fn export_label_embeddings(e: &Mat, labels: &LabelSpace) -> String {
    let mut out = String::from("label\ttask");
    for k in 0..e.cols {
        out.push_str(&format!("\te{k}"));
    }
    out.push('\n');
    for i in 0..e.rows {
        let (name, task) = labels.joint_label(i);
        out.push_str(name);
        out.push('\t');
        out.push_str(task);
        for v in e.row(i) {
            out.push_str(&format!("\t{v:e}"));
        }
        out.push('\n');
    }
    out
}
