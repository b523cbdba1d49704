//! Feature selection network.
//!
//! At each utterance two monotone gates split the neurons of a candidate
//! vector into a sentiment-only region, an act-only region and a shared
//! overlap. The sentiment and act features each combine their own region
//! with the shared one. The hidden state carries the union of the three
//! regions to the next utterance.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::layers::Linear;
use crate::params::ParamStore;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FsnParams {
    pub sentiment_gate: Linear,
    /// Same ids as `sentiment_gate` when the gate transform is shared.
    pub act_gate: Linear,
    pub candidate: Linear,
    pub d: usize,
}

impl FsnParams {
    pub fn new(store: &mut ParamStore, d: usize, shared_gate: bool, rng: &mut ChaCha8Rng) -> Self {
        let sentiment_gate = Linear::new(store, "fsn.sentiment_gate", 2 * d, d, rng);
        let act_gate = if shared_gate {
            sentiment_gate
        } else {
            Linear::new(store, "fsn.act_gate", 2 * d, d, rng)
        };
        let candidate = Linear::new(store, "fsn.candidate", 2 * d, d, rng);
        FsnParams {
            sentiment_gate,
            act_gate,
            candidate,
            d,
        }
    }
}

/// Cumulative softmax along each row: non-decreasing, in `[0, 1]`, ending at 1.
pub fn cummax(tape: &mut Tape, logits: Var) -> Var {
    let p = tape.softmax_rows(logits);
    tape.cumsum_cols(p)
}

/// Everything one step produces.
#[derive(Clone, Copy, Debug)]
pub struct FsnStep {
    pub sentiment_gate: Var,
    pub act_gate: Var,
    pub candidate: Var,
    pub p_sentiment: Var,
    pub p_act: Var,
    pub p_shared: Var,
    pub x_sentiment: Var,
    pub x_act: Var,
    pub hidden: Var,
}

pub fn fsn_step(tape: &mut Tape, u: Var, h_prev: Var, params: &FsnParams) -> FsnStep {
    let z = tape.concat_cols(&[u, h_prev]);
    let s_logits = params.sentiment_gate.apply(tape, z);
    let s = cummax(tape, s_logits);
    let a_logits = params.act_gate.apply(tape, z);
    let a_cum = cummax(tape, a_logits);
    let a = tape.one_minus(a_cum);
    let c_pre = params.candidate.apply(tape, z);
    let c = tape.tanh(c_pre);

    let sa = tape.mul(s, a);
    let s_only = tape.sub(s, sa);
    let a_only = tape.sub(a, sa);
    let p_shared = tape.mul(sa, c);
    let p_sentiment = tape.mul(s_only, c);
    let p_act = tape.mul(a_only, c);

    let t_shared = tape.tanh(p_shared);
    let t_s = tape.tanh(p_sentiment);
    let t_a = tape.tanh(p_act);
    let x_sentiment = tape.add(t_s, t_shared);
    let x_act = tape.add(t_a, t_shared);

    let union = tape.add(p_sentiment, p_act);
    let union = tape.add(union, p_shared);
    let hidden = tape.tanh(union);
    FsnStep {
        sentiment_gate: s,
        act_gate: a,
        candidate: c,
        p_sentiment,
        p_act,
        p_shared,
        x_sentiment,
        x_act,
        hidden,
    }
}

/// Left-to-right recurrence from a zero state. Returns `(X_s, X_a)`.
pub fn fsn_sequence(tape: &mut Tape, u: Var, params: &FsnParams) -> (Var, Var) {
    let n = tape.value(u).rows;
    assert!(n >= 1, "fsn needs at least one utterance");
    let mut h = tape.constant(Mat::zeros(1, params.d));
    let mut xs = Vec::with_capacity(n);
    let mut xa = Vec::with_capacity(n);
    for i in 0..n {
        let ui = tape.slice_rows(u, i, 1);
        let step = fsn_step(tape, ui, h, params);
        xs.push(step.x_sentiment);
        xa.push(step.x_act);
        h = step.hidden;
    }
    let x_s = tape.concat_rows(&xs);
    let x_a = tape.concat_rows(&xa);
    (tape.label(x_s, "fsn.x_sentiment"), tape.label(x_a, "fsn.x_act"))
}
