//! Utterance encoder: word embeddings, a bidirectional LSTM over tokens and
//! elementwise max pooling over token states.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{BmimError, Result};
use crate::layers::LstmCell;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderParams {
    pub embedding: ParamId,
    pub forward: LstmCell,
    pub backward: LstmCell,
    pub vocab_size: usize,
    pub d_w: usize,
    pub d: usize,
}

impl EncoderParams {
    pub fn new(
        store: &mut ParamStore,
        vocab_size: usize,
        d_w: usize,
        d: usize,
        init_scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(d % 2 == 0, "encoder width must be even");
        let embedding = store.add_uniform("encoder.embedding", vocab_size, d_w, init_scale, rng);
        let forward = LstmCell::new(store, "encoder.forward", d_w, d / 2, rng);
        let backward = LstmCell::new(store, "encoder.backward", d_w, d / 2, rng);
        EncoderParams {
            embedding,
            forward,
            backward,
            vocab_size,
            d_w,
            d,
        }
    }
}

/// Runs one direction over all utterances at once. Rows shorter than the
/// longest utterance read padding after their end; those steps never reach
/// the pooled output.
fn run_direction(
    tape: &mut Tape,
    cell: &LstmCell,
    embedding: ParamId,
    sequences: &[Vec<usize>],
) -> Var {
    let n = sequences.len();
    let max_len = sequences.iter().map(Vec::len).max().unwrap_or(0);
    let lens: Vec<usize> = sequences.iter().map(Vec::len).collect();
    let mut h = tape.constant(Mat::zeros(n, cell.hidden));
    let mut c = tape.constant(Mat::zeros(n, cell.hidden));
    let mut states = Vec::with_capacity(max_len);
    for t in 0..max_len {
        let ids: Vec<usize> = sequences
            .iter()
            .map(|s| s.get(t).copied().unwrap_or(0))
            .collect();
        let x = tape.gather(embedding, &ids);
        let (h_next, c_next) = cell.step(tape, x, h, c);
        h = h_next;
        c = c_next;
        states.push(h);
    }
    tape.max_pool(&states, &lens)
}

/// Encodes every utterance of a dialog; row `i` depends only on utterance `i`.
pub fn encode_dialog(
    tape: &mut Tape,
    utterances: &[Vec<usize>],
    params: &EncoderParams,
) -> Result<Var> {
    if utterances.is_empty() {
        return Err(BmimError::Contract("dialog has no utterances".into()));
    }
    for (i, u) in utterances.iter().enumerate() {
        if u.is_empty() {
            return Err(BmimError::Contract(format!("utterance {i} has no tokens")));
        }
        if let Some(&bad) = u.iter().find(|&&t| t >= params.vocab_size) {
            return Err(BmimError::Contract(format!(
                "token id {bad} outside vocabulary of size {}",
                params.vocab_size
            )));
        }
    }
    let fwd = run_direction(tape, &params.forward, params.embedding, utterances);
    let reversed: Vec<Vec<usize>> = utterances
        .iter()
        .map(|u| u.iter().rev().copied().collect())
        .collect();
    let bwd = run_direction(tape, &params.backward, params.embedding, &reversed);
    // max over [fwd_t; bwd_t] splits into the two halves
    let u = tape.concat_cols(&[fwd, bwd]);
    Ok(tape.label(u, "encoder.utterances"))
}

pub fn encode_utterance(tape: &mut Tape, tokens: &[usize], params: &EncoderParams) -> Result<Var> {
    encode_dialog(tape, &[tokens.to_vec()], params)
}
