//! Affine maps and the LSTM cell shared by the encoder and the inference network.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

/// `y = x Wᵀ + b` with `W: [out × in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let scale = 1.0 / (input as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), output, input, scale, rng);
        let bias = store.add(format!("{name}.bias"), Mat::zeros(1, output));
        Linear {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let xw = tape.matmul_t(x, w);
        tape.add_row(xw, b)
    }
}

/// One LSTM step over a batch of rows. Gate order in the fused weight is
/// input, forget, candidate, output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmCell {
    pub gates: Linear,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let gates = Linear::new(store, name, input + hidden, 4 * hidden, rng);
        // forget-gate bias starts at 1
        let bias = store.get_mut(gates.bias);
        for v in &mut bias.data[hidden..2 * hidden] {
            *v = 1.0;
        }
        LstmCell { gates, hidden }
    }

    pub fn input_width(&self) -> usize {
        self.gates.input - self.hidden
    }

    /// Returns `(h', c')`.
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var, c: Var) -> (Var, Var) {
        let hd = self.hidden;
        let z = tape.concat_cols(&[x, h]);
        let g = self.gates.apply(tape, z);
        let i = tape.slice_cols(g, 0, hd);
        let f = tape.slice_cols(g, hd, hd);
        let cand = tape.slice_cols(g, 2 * hd, hd);
        let o = tape.slice_cols(g, 3 * hd, hd);
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let cand = tape.tanh(cand);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, cand);
        let c_next = tape.add(fc, ig);
        let tc = tape.tanh(c_next);
        let h_next = tape.mul(o, tc);
        (h_next, c_next)
    }
}
