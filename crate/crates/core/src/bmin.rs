//! Bi-directional multi-hop inference network.
//!
//! For each task the per-utterance features seed a query. Each hop runs the
//! query through an LSTM cell whose time axis is the hop index (one
//! independent working memory per utterance), attends over the feature rows
//! with the cell output, and concatenates output and readout into the next
//! query. The front-to-back pass may only attend to the current and earlier
//! utterances, the back-to-front pass to the current and later ones.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::layers::{Linear, LstmCell};
use crate::params::ParamStore;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "f2b")]
    FrontToBack,
    #[serde(rename = "b2f")]
    BackToFront,
}

impl Direction {
    /// Row-major `n × n` attention mask.
    pub fn mask(self, n: usize) -> Vec<bool> {
        let mut m = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                m.push(match self {
                    Direction::FrontToBack => j <= i,
                    Direction::BackToFront => j >= i,
                });
            }
        }
        m
    }

    pub fn tag(self) -> &'static str {
        match self {
            Direction::FrontToBack => "f2b",
            Direction::BackToFront => "b2f",
        }
    }
}

/// Query initialisation plus the hop cell of one task and direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DirectionParams {
    /// `d → 2d`
    pub query: Linear,
    /// input `2d`, hidden `d`
    pub cell: LstmCell,
}

impl DirectionParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        DirectionParams {
            query: Linear::new(store, &format!("{name}.query"), d, 2 * d, rng),
            cell: LstmCell::new(store, &format!("{name}.cell"), 2 * d, d, rng),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskParams {
    pub front_to_back: DirectionParams,
    pub back_to_front: DirectionParams,
}

impl TaskParams {
    pub fn get(&self, dir: Direction) -> &DirectionParams {
        match dir {
            Direction::FrontToBack => &self.front_to_back,
            Direction::BackToFront => &self.back_to_front,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BminParams {
    pub sentiment: TaskParams,
    pub act: TaskParams,
    pub hops: usize,
    pub d: usize,
}

impl BminParams {
    pub fn new(
        store: &mut ParamStore,
        d: usize,
        hops: usize,
        tie_directions: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut task = |name: &str| {
            let f2b = DirectionParams::new(store, &format!("bmin.{name}.f2b"), d, rng);
            let b2f = if tie_directions {
                f2b
            } else {
                DirectionParams::new(store, &format!("bmin.{name}.b2f"), d, rng)
            };
            TaskParams {
                front_to_back: f2b,
                back_to_front: b2f,
            }
        };
        let sentiment = task("sentiment");
        let act = task("act");
        BminParams {
            sentiment,
            act,
            hops,
            d,
        }
    }
}

/// `q⁰ = X W_qᵀ + b_q`
pub fn init_query(tape: &mut Tape, x: Var, params: &DirectionParams) -> Var {
    params.query.apply(tape, x)
}

#[derive(Clone, Copy, Debug)]
pub struct Readout {
    /// `N × N` attention weights.
    pub alpha: Var,
    /// `N × d` readouts.
    pub r: Var,
}

/// Dot-product attention of each query row over the feature rows allowed by
/// the direction mask.
pub fn attention_readout(tape: &mut Tape, x: Var, query: Var, dir: Direction) -> Readout {
    let n = tape.value(x).rows;
    let scores = tape.matmul_t(query, x);
    let alpha = tape.masked_softmax_rows(scores, dir.mask(n));
    let r = tape.matmul(alpha, x);
    Readout { alpha, r }
}

/// Attention weights of one hop, kept for analysis dumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HopTrace {
    pub direction: Direction,
    pub hop: usize,
    pub alpha: Vec<Vec<f64>>,
}

/// Runs `hops` refinement steps in one direction; returns `q^(T)` (`N × 2d`).
pub fn multihop_direction(
    tape: &mut Tape,
    x: Var,
    dir: Direction,
    hops: usize,
    params: &DirectionParams,
    mut trace: Option<&mut Vec<HopTrace>>,
) -> Var {
    assert!(hops >= 1, "at least one hop is required");
    let n = tape.value(x).rows;
    let hidden = params.cell.hidden;
    let mut q = init_query(tape, x, params);
    let mut h = tape.constant(Mat::zeros(n, hidden));
    let mut c = tape.constant(Mat::zeros(n, hidden));
    for t in 1..=hops {
        let (q_tilde, c_next) = params.cell.step(tape, q, h, c);
        let read = attention_readout(tape, x, q_tilde, dir);
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(HopTrace {
                direction: dir,
                hop: t,
                alpha: tape.value(read.alpha).to_rows(),
            });
        }
        q = tape.concat_cols(&[q_tilde, read.r]);
        h = q_tilde;
        c = c_next;
    }
    q
}

/// `[q_f2b ; q_b2f]` for one task (`N × 4d`).
pub fn bidirectional(
    tape: &mut Tape,
    x: Var,
    hops: usize,
    params: &TaskParams,
    mut trace: Option<&mut Vec<HopTrace>>,
) -> Var {
    let f = multihop_direction(
        tape,
        x,
        Direction::FrontToBack,
        hops,
        &params.front_to_back,
        trace.as_deref_mut(),
    );
    let b = multihop_direction(tape, x, Direction::BackToFront, hops, &params.back_to_front, trace);
    tape.concat_cols(&[f, b])
}

/// Attention traces of both tasks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub sentiment: Vec<HopTrace>,
    pub act: Vec<HopTrace>,
}

/// `(Q_s, Q_a)`, each `N × 4d`, from disjoint parameter groups.
pub fn bmin_forward(
    tape: &mut Tape,
    x_s: Var,
    x_a: Var,
    params: &BminParams,
    dump: Option<&mut AttentionDump>,
) -> (Var, Var) {
    let (q_s, q_a) = match dump {
        Some(d) => (
            bidirectional(tape, x_s, params.hops, &params.sentiment, Some(&mut d.sentiment)),
            bidirectional(tape, x_a, params.hops, &params.act, Some(&mut d.act)),
        ),
        None => (
            bidirectional(tape, x_s, params.hops, &params.sentiment, None),
            bidirectional(tape, x_a, params.hops, &params.act, None),
        ),
    };
    (tape.label(q_s, "bmin.q_sentiment"), tape.label(q_a, "bmin.q_act"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn init_query_identity_and_zero() {
        let d = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let p = DirectionParams::new(&mut store, "t", d, &mut rng);
        let mut stacked = Mat::zeros(2 * d, d);
        for i in 0..d {
            stacked.set(i, i, 1.0);
            stacked.set(d + i, i, 1.0);
        }
        *store.get_mut(p.query.weight) = stacked;
        let x = Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]);
        let mut t = Tape::new(&store);
        let xv = t.constant(x.clone());
        let q = init_query(&mut t, xv, &p);
        assert_eq!(t.value(q).row(0), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);

        let bias: Vec<f64> = (0..2 * d).map(|k| k as f64 * 0.1).collect();
        store.get_mut(p.query.bias).data = bias.clone();
        let mut t = Tape::new(&store);
        let z = t.constant(Mat::zeros(2, d));
        let q = init_query(&mut t, z, &p);
        assert_eq!(t.value(q).row(1), bias.as_slice());
    }

    #[test]
    fn init_query_matches_direct_evaluation() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let p = DirectionParams::new(&mut store, "t", d, &mut rng);
        store.get_mut(p.query.bias).data = (0..2 * d).map(|_| rng.gen()).collect();
        let x = random_mat(&mut rng, 3, d);
        let mut t = Tape::new(&store);
        let xv = t.constant(x.clone());
        let q = init_query(&mut t, xv, &p);
        let (w, b) = (store.get(p.query.weight), store.get(p.query.bias));
        for i in 0..3 {
            for o in 0..2 * d {
                let mut want = b.data[o];
                for k in 0..d {
                    want += w.get(o, k) * x.get(i, k);
                }
                assert!((t.value(q).get(i, o) - want).abs() < 1e-14);
            }
        }
    }

    fn readout(x: Mat, q: Mat, dir: Direction) -> (Mat, Mat) {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let xv = t.constant(x);
        let qv = t.constant(q);
        let r = attention_readout(&mut t, xv, qv, dir);
        (t.value(r.alpha).clone(), t.value(r.r).clone())
    }

    #[test]
    fn readout_examples() {
        let (a, r) = readout(Mat::row_vector(vec![0.3, -0.7]), Mat::row_vector(vec![5.0, 1.0]), Direction::FrontToBack);
        assert_eq!(a.data, vec![1.0]);
        assert_eq!(r.data, vec![0.3, -0.7]);

        let x = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let q = Mat::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let (a, _) = readout(x.clone(), q, Direction::BackToFront);
        assert_eq!(a.row(0), &[0.5, 0.5]);
        assert_eq!(a.row(1), &[0.0, 1.0]);

        // x = {[1,0],[0,1]}, q₁ = [1,0], full context for row 0 is b2f
        let q = Mat::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let (a, r) = readout(x, q, Direction::BackToFront);
        let e = std::f64::consts::E;
        assert!((a.get(0, 0) - e / (e + 1.0)).abs() < 1e-15);
        assert!((a.get(0, 1) - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((r.get(0, 0) - 0.7311).abs() < 1e-4);
        assert!((r.get(0, 1) - 0.2689).abs() < 1e-4);
    }

    fn setup(d: usize, tie: bool, seed: u64) -> (ParamStore, BminParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = BminParams::new(&mut store, d, 2, tie, &mut rng);
        (store, p)
    }

    fn run_dir(store: &ParamStore, p: &DirectionParams, x: &Mat, dir: Direction, hops: usize) -> Mat {
        let mut t = Tape::new(store);
        let xv = t.constant(x.clone());
        let q = multihop_direction(&mut t, xv, dir, hops, p, None);
        t.value(q).clone()
    }

    #[test]
    fn single_utterance_directions_agree() {
        let (store, p) = setup(3, true, 3);
        let x = Mat::row_vector(vec![0.2, -0.5, 0.9]);
        let f = run_dir(&store, &p.sentiment.front_to_back, &x, Direction::FrontToBack, 3);
        let b = run_dir(&store, &p.sentiment.back_to_front, &x, Direction::BackToFront, 3);
        assert_eq!(f, b);
    }

    #[test]
    fn one_hop_matches_hand_unrolled() {
        let d = 3;
        let (store, p) = setup(d, false, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_mat(&mut rng, 4, d);
        let dp = &p.act.back_to_front;
        let got = run_dir(&store, dp, &x, Direction::BackToFront, 1);

        // manual: query, LSTM gates from [q; 0], then attention over j ≥ i
        let (w, b) = (store.get(dp.query.weight), store.get(dp.query.bias));
        let (gw, gb) = (store.get(dp.cell.gates.weight), store.get(dp.cell.gates.bias));
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for i in 0..4 {
            let q: Vec<f64> = (0..2 * d)
                .map(|o| b.data[o] + (0..d).map(|k| w.get(o, k) * x.get(i, k)).sum::<f64>())
                .collect();
            let gate = |g: usize| gb.data[g] + (0..2 * d).map(|k| gw.get(g, k) * q[k]).sum::<f64>();
            let qt: Vec<f64> = (0..d)
                .map(|k| {
                    let c = sig(gate(k)) * gate(2 * d + k).tanh();
                    sig(gate(3 * d + k)) * c.tanh()
                })
                .collect();
            let scores: Vec<f64> = (i..4)
                .map(|j| (0..d).map(|k| x.get(j, k) * qt[k]).sum())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for k in 0..d {
                assert!((got.get(i, k) - qt[k]).abs() < 1e-12);
                let r: f64 = (i..4).map(|j| scores[j - i].exp() / z * x.get(j, k)).sum();
                assert!((got.get(i, d + k) - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mirror_symmetry_under_tied_directions() {
        let d = 3;
        let (store, p) = setup(d, true, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_mat(&mut rng, 5, d);
        let mut rev = Mat::zeros(5, d);
        for i in 0..5 {
            rev.row_mut(i).copy_from_slice(x.row(4 - i));
        }
        let dp = &p.sentiment.front_to_back;
        let f_rev = run_dir(&store, dp, &rev, Direction::FrontToBack, 2);
        let b_orig = run_dir(&store, dp, &x, Direction::BackToFront, 2);
        for i in 0..5 {
            for (a, b) in f_rev.row(4 - i).iter().zip(b_orig.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_shapes_and_degenerate_case() {
        let d = 4;
        let (store, p) = setup(d, true, 8);
        let mut t = Tape::new(&store);
        let x = t.constant(Mat::row_vector(vec![0.1, 0.2, 0.3, 0.4]));
        let (qs, qa) = bmin_forward(&mut t, x, x, &p, None);
        let (qs, qa) = (t.value(qs), t.value(qa));
        assert_eq!(qs.shape(), (1, 4 * d));
        assert_eq!(qa.shape(), (1, 4 * d));
        assert_eq!(&qs.data[..2 * d], &qs.data[2 * d..]);
    }

    #[test]
    fn attention_dump_records_every_hop() {
        let d = 2;
        let (store, p) = setup(d, false, 9);
        let mut t = Tape::new(&store);
        let x = t.constant(Mat::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, 0.6]]));
        let mut dump = AttentionDump::default();
        bmin_forward(&mut t, x, x, &p, Some(&mut dump));
        assert_eq!(dump.sentiment.len(), 2 * p.hops);
        assert_eq!(dump.act.len(), 2 * p.hops);
        assert_eq!(dump.act[0].alpha[0], vec![1.0, 0.0, 0.0]);
    }
}
