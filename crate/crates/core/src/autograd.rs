//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! through [`Tape::param`] (or [`Tape::gather`] for embedding lookups) and
//! their gradients land in a [`Gradients`] buffer aligned with the store.

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{dot, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    Gather(ParamId, Vec<usize>),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64, f64),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    MaskedSoftmaxRows(Var),
    CumsumCols(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    MaxPool(Vec<Var>, Vec<usize>),
    Pick(Var, Vec<usize>),
    LogFloor(Var, f64),
    Sum(Var),
    /// Input, denominator mask, per-entry weights, denominator guard.
    MaskedLogRatio(Var, Vec<bool>, Mat, f64),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Param(_) => "param",
            Op::Gather(..) => "gather",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Affine(..) => "affine",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::SoftmaxRows(_) => "softmax",
            Op::MaskedSoftmaxRows(..) => "masked_softmax",
            Op::CumsumCols(_) => "cumsum",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::MaxPool(..) => "max_pool",
            Op::Pick(..) => "pick",
            Op::LogFloor(..) => "log_floor",
            Op::Sum(_) => "sum",
            Op::MaskedLogRatio(..) => "masked_log_ratio",
        }
    }
}

struct Node {
    value: Mat,
    op: Op,
    label: Option<String>,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar");
        m.data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Attaches a name used by [`Tape::first_non_finite`].
    pub fn label(&mut self, v: Var, name: impl Into<String>) -> Var {
        self.nodes[v.0].label = Some(name.into());
        v
    }

    /// Every data-dependent branch taken so far: the winning step of each
    /// pooled entry and whether each floored logarithm hit its floor. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::MaxPool(steps, lens) => {
                    let y = &node.value;
                    for (i, &len) in lens.iter().enumerate() {
                        for c in 0..y.cols {
                            sig.push(self.pool_winner(steps, len, i, c, y.get(i, c)));
                        }
                    }
                }
                Op::LogFloor(a, floor) => {
                    sig.extend(self.value(*a).data.iter().map(|&x| usize::from(x < *floor)));
                }
                _ => {}
            }
        }
        sig
    }

    fn pool_winner(&self, steps: &[Var], len: usize, i: usize, c: usize, target: f64) -> usize {
        // first step attaining the max receives the gradient
        (0..len)
            .find(|&s| self.value(steps[s]).get(i, c) == target)
            .expect("pooled value must come from a step")
    }

    /// Splits the sum of `root`'s entries into additive pieces by walking
    /// through sums, differences and affine maps down to the first other
    /// operation. The pieces add up to the root in exact arithmetic.
    pub fn additive_terms(&self, root: Var) -> Vec<f64> {
        let mut out = Vec::new();
        let mut stack = vec![(root, 1.0)];
        while let Some((v, coef)) = stack.pop() {
            let node = &self.nodes[v.0];
            match &node.op {
                Op::Add(a, b) if self.value(*a).shape() == self.value(*b).shape() => {
                    stack.push((*b, coef));
                    stack.push((*a, coef));
                }
                Op::Sub(a, b) if self.value(*a).shape() == self.value(*b).shape() => {
                    stack.push((*b, -coef));
                    stack.push((*a, coef));
                }
                Op::Affine(a, scale, shift) => {
                    if *shift != 0.0 {
                        out.push(coef * shift * node.value.len() as f64);
                    }
                    stack.push((*a, coef * scale));
                }
                Op::Sum(a) => stack.push((*a, coef)),
                _ => out.extend(node.value.data.iter().map(|x| coef * x)),
            }
        }
        out
    }

    /// Describes the first recorded tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        let mut last_label: Option<&str> = None;
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(l) = &node.label {
                last_label = Some(l);
            }
            if !node.value.is_finite() {
                return Some(match (&node.label, last_label) {
                    (Some(l), _) => format!("{l} (node {i}, {})", node.op.kind()),
                    (None, Some(l)) => format!("node {i} ({}) after {l}", node.op.kind()),
                    (None, None) => format!("node {i} ({})", node.op.kind()),
                });
            }
        }
        None
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Const)
    }

    /// Parameter leaf; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = self.push(value, Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Row lookup into a parameter table.
    pub fn gather(&mut self, id: ParamId, rows: &[usize]) -> Var {
        let table = self.params.get(id);
        let mut out = Mat::zeros(rows.len(), table.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(table.row(r));
        }
        self.push(out, Op::Gather(id, rows.to_vec()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Mat {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        Mat::from_vec(
            x.rows,
            x.cols,
            x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds the `1 × cols` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (x, r) = (self.value(a), self.value(b));
        assert_eq!(r.rows, 1, "add_row expects a row vector");
        assert_eq!(x.cols, r.cols, "add_row width mismatch");
        let mut out = x.clone();
        for i in 0..out.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, b))
    }

    /// `scale * a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).map(|x| scale * x + shift);
        self.push(v, Op::Affine(a, scale, shift))
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            out.row_mut(i)
                .copy_from_slice(&crate::tensor::softmax(x.row(i)));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Row softmax restricted to `mask`; masked entries are exactly zero.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: Vec<bool>) -> Var {
        let x = self.value(a);
        assert_eq!(mask.len(), x.len(), "mask shape mismatch");
        let mut out = Mat::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            let row = x.row(i);
            let m = &mask[i * x.cols..(i + 1) * x.cols];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(max > f64::NEG_INFINITY, "masked softmax row {i} is empty");
            let o = out.row_mut(i);
            let mut sum = 0.0;
            for j in 0..row.len() {
                if m[j] {
                    o[j] = (row[j] - max).exp();
                    sum += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::MaskedSoftmaxRows(a))
    }

    /// Cumulative sum along each row.
    pub fn cumsum_cols(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows {
            let mut acc = 0.0;
            for v in out.row_mut(i) {
                acc += *v;
                *v = acc;
            }
        }
        self.push(out, Op::CumsumCols(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for p in parts {
                let m = self.value(*p);
                assert_eq!(m.rows, rows, "concat_cols row mismatch");
                out.row_mut(i)[offset..offset + m.cols].copy_from_slice(m.row(i));
                offset += m.cols;
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols, "slice_cols out of range");
        let mut out = Mat::zeros(x.rows, len);
        for i in 0..x.rows {
            out.row_mut(i).copy_from_slice(&x.row(i)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows, "slice_rows out of range");
        let data = x.data[start * x.cols..(start + len) * x.cols].to_vec();
        self.push(Mat::from_vec(len, x.cols, data), Op::SliceRows(a, start))
    }

    /// Elementwise max over `steps[0..lens[i]]` for each row `i`.
    pub fn max_pool(&mut self, steps: &[Var], lens: &[usize]) -> Var {
        let (rows, cols) = self.value(steps[0]).shape();
        assert_eq!(lens.len(), rows, "one length per row");
        let mut out = Mat::filled(rows, cols, f64::NEG_INFINITY);
        for (i, &len) in lens.iter().enumerate() {
            assert!(len >= 1 && len <= steps.len(), "invalid pooling length");
            for s in &steps[..len] {
                let row = self.value(*s).row(i);
                for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                    if v > *o {
                        *o = v;
                    }
                }
            }
        }
        self.push(out, Op::MaxPool(steps.to_vec(), lens.to_vec()))
    }

    /// Selects entry `(i, cols[i])` of every row into an `N × 1` column.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Var {
        let x = self.value(a);
        assert_eq!(cols.len(), x.rows, "one index per row");
        let data = cols.iter().enumerate().map(|(i, &c)| x.get(i, c)).collect();
        self.push(Mat::from_vec(x.rows, 1, data), Op::Pick(a, cols.to_vec()))
    }

    /// `ln(max(a, floor))`
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).map(|x| x.max(floor).ln());
        self.push(v, Op::LogFloor(a, floor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Mat::from_vec(1, 1, vec![s]), Op::Sum(a))
    }

    /// Per row: `Σ_k w_ik · ln(D_i / exp(a_ik))` with
    /// `D_i = Σ_{j ∈ mask} exp(a_ij) + eps`, as an `N × 1` column.
    ///
    /// Each log term is evaluated as `ln_1p` of the other entries relative to
    /// `a_ik`, so a term near zero keeps its relative precision. Entries with
    /// non-zero weight must be inside the mask.
    pub fn masked_log_ratio(&mut self, a: Var, mask: Vec<bool>, weights: Mat, eps: f64) -> Var {
        let x = self.value(a);
        assert_eq!(mask.len(), x.len(), "mask shape mismatch");
        assert_eq!(weights.shape(), x.shape(), "weight shape mismatch");
        let mut out = Mat::zeros(x.rows, 1);
        for i in 0..x.rows {
            let row = x.row(i);
            let m = &mask[i * x.cols..(i + 1) * x.cols];
            let mut total = 0.0;
            for (k, &w) in weights.row(i).iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                assert!(m[k], "weighted entry ({i}, {k}) lies outside the mask");
                let rest: f64 = row
                    .iter()
                    .zip(m)
                    .enumerate()
                    .filter(|&(j, (_, &keep))| keep && j != k)
                    .map(|(_, (v, _))| (v - row[k]).exp())
                    .sum();
                total += w * (rest + eps * (-row[k]).exp()).ln_1p();
            }
            out.data[i] = total;
        }
        self.push(out, Op::MaskedLogRatio(a, mask, weights, eps))
    }

    /// Backpropagates from the scalar `root`, returning parameter gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads = Gradients::zeros_like(self.params);
        self.backward_into(root, 1.0, &mut grads);
        grads
    }

    /// Accumulates `seed · ∂root/∂θ` into `out`.
    pub fn backward_into(&self, root: Var, seed: f64, out: &mut Gradients) {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        let mut adj: Vec<Option<Mat>> = Vec::with_capacity(root.0 + 1);
        adj.resize_with(root.0 + 1, || None);
        adj[root.0] = Some(Mat::from_vec(1, 1, vec![seed]));

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => out.get_mut(*id).add_assign(&g),
                Op::Gather(id, rows) => {
                    let table = out.get_mut(*id);
                    for (i, &r) in rows.iter().enumerate() {
                        for (t, d) in table.row_mut(r).iter_mut().zip(g.row(i)) {
                            *t += d;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&g);
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::MatMulT(a, b) => {
                    // y = a bᵀ: da = g b, db = gᵀ a
                    let da = g.matmul(self.value(*b));
                    let db = g.t_matmul(self.value(*a));
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *b, g.map(|v| -v));
                    acc(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let da = elementwise(&g, y, |g, y| g * y);
                    let db = elementwise(&g, x, |g, x| g * x);
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::AddRow(a, b) => {
                    let mut db = Mat::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for (d, v) in db.data.iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    acc(&mut adj, *b, db);
                    acc(&mut adj, *a, g);
                }
                Op::Affine(a, s, _) => {
                    let s = *s;
                    acc(&mut adj, *a, g.map(|v| v * s));
                }
                Op::Tanh(a) => {
                    let da = elementwise(&g, &node.value, |g, y| g * (1.0 - y * y));
                    acc(&mut adj, *a, da);
                }
                Op::Sigmoid(a) => {
                    let da = elementwise(&g, &node.value, |g, y| g * y * (1.0 - y));
                    acc(&mut adj, *a, da);
                }
                Op::SoftmaxRows(a) | Op::MaskedSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = Mat::zeros(y.rows, y.cols);
                    for i in 0..y.rows {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let inner = dot(yr, gr);
                        for (d, (&yv, &gv)) in da.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                            *d = yv * (gv - inner);
                        }
                    }
                    acc(&mut adj, *a, da);
                }
                Op::CumsumCols(a) => {
                    // reverse cumulative sum
                    let mut da = g;
                    for i in 0..da.rows {
                        let mut run = 0.0;
                        for v in da.row_mut(i).iter_mut().rev() {
                            run += *v;
                            *v = run;
                        }
                    }
                    acc(&mut adj, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols;
                        let mut dp = Mat::zeros(g.rows, w);
                        for i in 0..g.rows {
                            dp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        offset += w;
                        acc(&mut adj, *p, dp);
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut da = Mat::zeros(src.rows, src.cols);
                    for i in 0..g.rows {
                        da.row_mut(i)[*start..*start + g.cols].copy_from_slice(g.row(i));
                    }
                    acc(&mut adj, *a, da);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let r = self.value(*p).rows;
                        let data = g.data[offset * g.cols..(offset + r) * g.cols].to_vec();
                        offset += r;
                        acc(&mut adj, *p, Mat::from_vec(r, g.cols, data));
                    }
                }
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let mut da = Mat::zeros(src.rows, src.cols);
                    da.data[start * g.cols..(start + g.rows) * g.cols].copy_from_slice(&g.data);
                    acc(&mut adj, *a, da);
                }
                Op::MaxPool(steps, lens) => {
                    let y = &node.value;
                    let mut per_step: Vec<Option<Mat>> = vec![None; steps.len()];
                    for (i, &len) in lens.iter().enumerate() {
                        for c in 0..y.cols {
                            let target = y.get(i, c);
                            let winner = self.pool_winner(steps, len, i, c, target);
                            let slot = per_step[winner]
                                .get_or_insert_with(|| Mat::zeros(y.rows, y.cols));
                            let cur = slot.get(i, c);
                            slot.set(i, c, cur + g.get(i, c));
                        }
                    }
                    for (s, d) in steps.iter().zip(per_step) {
                        if let Some(d) = d {
                            acc(&mut adj, *s, d);
                        }
                    }
                }
                Op::Pick(a, cols) => {
                    let src = self.value(*a);
                    let mut da = Mat::zeros(src.rows, src.cols);
                    for (i, &c) in cols.iter().enumerate() {
                        da.set(i, c, g.data[i]);
                    }
                    acc(&mut adj, *a, da);
                }
                Op::LogFloor(a, floor) => {
                    let floor = *floor;
                    let da = elementwise(&g, self.value(*a), |g, x| {
                        if x > floor {
                            g / x
                        } else {
                            0.0
                        }
                    });
                    acc(&mut adj, *a, da);
                }
                Op::Sum(a) => {
                    let src = self.value(*a);
                    acc(&mut adj, *a, Mat::filled(src.rows, src.cols, g.data[0]));
                }
                Op::MaskedLogRatio(a, mask, weights, eps) => {
                    // ∂/∂a_ij = g_i (W_i · exp(a_ij) / D_i − w_ij), W_i = Σ_k w_ik
                    let x = self.value(*a);
                    let mut da = Mat::zeros(x.rows, x.cols);
                    for i in 0..x.rows {
                        let w_row = weights.row(i);
                        let w_total: f64 = w_row.iter().sum();
                        if w_total == 0.0 {
                            continue;
                        }
                        let m = &mask[i * x.cols..(i + 1) * x.cols];
                        let row = x.row(i);
                        let max = row
                            .iter()
                            .zip(m)
                            .filter(|(_, &keep)| keep)
                            .map(|(v, _)| *v)
                            .fold(f64::NEG_INFINITY, f64::max);
                        let scaled: Vec<f64> = row
                            .iter()
                            .zip(m)
                            .map(|(v, &keep)| if keep { (v - max).exp() } else { 0.0 })
                            .collect();
                        let denom = scaled.iter().sum::<f64>() + eps * (-max).exp();
                        let gi = g.data[i];
                        for j in 0..x.cols {
                            da.set(i, j, gi * (w_total * scaled[j] / denom - w_row[j]));
                        }
                    }
                    acc(&mut adj, *a, da);
                }
            }
        }
    }
}

fn acc(adj: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn elementwise(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    Mat::from_vec(
        a.rows,
        a.cols,
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    )
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
