use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Pow(Var, f64),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    SumCols(Var),
    SquaredNorm(Var),
    Reverse(Var, f64),
    Detach,
    SelectCol(Var, usize),
    ConcatCols(Var, Var),
    GatherRows(Var, Vec<usize>),
    BceWithLogits(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Log(..) => "log",
            Op::Pow(..) => "pow",
            Op::Clamp(..) => "clamp",
            Op::SoftmaxRows(..) => "softmax",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::SumCols(..) => "sum_cols",
            Op::SquaredNorm(..) => "squared_l2",
            Op::Reverse(..) => "gradient_reversal",
            Op::Detach => "detach",
            Op::SelectCol(..) => "select_col",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::BceWithLogits(..) => "bce_with_logits",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// How detach and gradient-reversal nodes evaluate their forward pass.
///
/// `Record` stores each such node's input; `Replay` substitutes the recorded
/// input so that a perturbed re-evaluation sees detached subgraphs as frozen
/// and reversed subgraphs as `-λ`-scaled. This makes central differences of
/// the replayed graph equal to what backward computes on the recorded one.
enum Mode {
    Normal,
    Record(Vec<Tensor>),
    Replay { frozen: Vec<Tensor>, cursor: usize },
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is already topologically sorted.
pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, zeros if nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

#[inline]
fn bidx(t: &Tensor, r: usize, c: usize) -> usize {
    let rr = if t.rows() == 1 { 0 } else { r };
    let cc = if t.cols() == 1 { 0 } else { c };
    rr * t.cols() + cc
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            mode: Mode::Normal,
        }
    }

    pub(crate) fn recording() -> Self {
        Self {
            nodes: Vec::new(),
            mode: Mode::Record(Vec::new()),
        }
    }

    pub(crate) fn replaying(frozen: Vec<Tensor>) -> Self {
        Self {
            nodes: Vec::new(),
            mode: Mode::Replay { frozen, cursor: 0 },
        }
    }

    pub(crate) fn into_recorded(self) -> Vec<Tensor> {
        match self.mode {
            Mode::Record(v) => v,
            _ => Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} produced a non-finite value (node {})",
                op.name(),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.clone(), Op::Leaf, true)
    }

    pub fn scalar(&mut self, v: f64) -> Result<Var> {
        self.constant(Tensor::scalar(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    /// `x · w + b` with `b` a `1 × n` row broadcast over the rows of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let rows = broadcast_dim(ta.rows(), tb.rows());
        let cols = broadcast_dim(ta.cols(), tb.cols());
        let (Some(rows), Some(cols)) = (rows, cols) else {
            return Err(Error::Shape(format!(
                "{} of {}x{} and {}x{}",
                op.name(),
                ta.rows(),
                ta.cols(),
                tb.rows(),
                tb.cols()
            )));
        };
        let mut out = Tensor::zeros(rows, cols);
        {
            let (da, db) = (ta.data(), tb.data());
            let o = out.data_mut();
            for r in 0..rows {
                for c in 0..cols {
                    o[r * cols + c] = f(da[bidx(ta, r, c)], db[bidx(tb, r, c)]);
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    /// Elementwise sum; either operand may broadcast along a unit dimension.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(value, Op::Offset(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(bad) = t.data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let value = t.map(f64::ln);
        let rg = self.rg(a);
        self.push(value, Op::Log(a), rg)
    }

    /// `a^p` elementwise. At `a = 0` with `p < 1` the derivative is taken as
    /// zero (subgradient convention) instead of infinity.
    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x.powf(p));
        let rg = self.rg(a);
        self.push(value, Op::Pow(a, p), rg)
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut out = t.clone();
        let cols = t.cols();
        for row in out.data_mut().chunks_mut(cols.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().fold(0.0, |acc, &x| acc + x);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Shape("mean of an empty tensor".into()));
        }
        let s = t.data().iter().fold(0.0, |acc, &x| acc + x) / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    /// Sum over columns: `r × c → r × 1`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let sums: Vec<f64> = (0..t.rows())
            .map(|r| t.row_slice(r).iter().fold(0.0, |acc, &x| acc + x))
            .collect();
        let rg = self.rg(a);
        self.push(Tensor::column(&sums), Op::SumRows(a), rg)
    }

    /// Sum over rows: `r × c → 1 × c`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut sums = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            for (s, &x) in sums.iter_mut().zip(t.row_slice(r)) {
                *s += x;
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::row(&sums), Op::SumCols(a), rg)
    }

    pub fn squared_l2(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().fold(0.0, |acc, &x| acc + x * x);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SquaredNorm(a), rg)
    }

    /// Identity forward; backward multiplies the incoming gradient by `-λ`.
    pub fn reverse_grad(&mut self, a: Var, lambda: f64) -> Result<Var> {
        let value = match &mut self.mode {
            Mode::Normal => self.nodes[a.0].value.clone(),
            Mode::Record(rec) => {
                rec.push(self.nodes[a.0].value.clone());
                self.nodes[a.0].value.clone()
            }
            Mode::Replay { frozen, cursor } => {
                let base = frozen
                    .get(*cursor)
                    .ok_or_else(|| Error::Internal("replay ran past the recording".into()))?
                    .clone();
                *cursor += 1;
                let live = &self.nodes[a.0].value;
                if base.shape() != live.shape() {
                    return Err(Error::Internal("replay shape drift".into()));
                }
                let data = base
                    .data()
                    .iter()
                    .zip(live.data())
                    .map(|(&b, &x)| (1.0 + lambda) * b - lambda * x)
                    .collect();
                Tensor::from_vec(base.rows(), base.cols(), data)?
            }
        };
        let rg = self.rg(a);
        self.push(value, Op::Reverse(a, lambda), rg)
    }

    /// Identity forward; no gradient flows back.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let value = match &mut self.mode {
            Mode::Normal => self.nodes[a.0].value.clone(),
            Mode::Record(rec) => {
                rec.push(self.nodes[a.0].value.clone());
                self.nodes[a.0].value.clone()
            }
            Mode::Replay { frozen, cursor } => {
                let base = frozen
                    .get(*cursor)
                    .ok_or_else(|| Error::Internal("replay ran past the recording".into()))?
                    .clone();
                *cursor += 1;
                base
            }
        };
        self.push(value, Op::Detach, false)
    }

    /// Column `j` as an `r × 1` tensor.
    pub fn select_col(&mut self, a: Var, j: usize) -> Result<Var> {
        let t = self.value(a);
        if j >= t.cols() {
            return Err(Error::Shape(format!("column {j} of {} columns", t.cols())));
        }
        let col: Vec<f64> = (0..t.rows()).map(|r| t.get(r, j)).collect();
        let rg = self.rg(a);
        self.push(Tensor::column(&col), Op::SelectCol(a, j), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(Error::Shape(format!(
                "concat of {} and {} rows",
                ta.rows(),
                tb.rows()
            )));
        }
        let cols = ta.cols() + tb.cols();
        let mut data = Vec::with_capacity(ta.rows() * cols);
        for r in 0..ta.rows() {
            data.extend_from_slice(ta.row_slice(r));
            data.extend_from_slice(tb.row_slice(r));
        }
        let value = Tensor::from_vec(ta.rows(), cols, data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::ConcatCols(a, b), rg)
    }

    /// Row `i` of the output is row `idx[i]` of the input.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * t.cols());
        for &i in idx {
            if i >= t.rows() {
                return Err(Error::Shape(format!("row {i} of {} rows", t.rows())));
            }
            data.extend_from_slice(t.row_slice(i));
        }
        let value = Tensor::from_vec(idx.len(), t.cols(), data)?;
        let rg = self.rg(a);
        self.push(value, Op::GatherRows(a, idx.to_vec()), rg)
    }

    /// Elementwise binary cross-entropy of logits `z` against targets `t` in
    /// `[0, 1]`, in the stable form `max(z,0) - z·t + ln(1 + e^{-|z|})`.
    pub fn bce_with_logits(&mut self, z: Var, t: Var) -> Result<Var> {
        let (tz, tt) = (self.value(z), self.value(t));
        if tz.shape() != tt.shape() {
            return Err(Error::Shape(format!(
                "bce logits {:?} vs targets {:?}",
                tz.shape(),
                tt.shape()
            )));
        }
        let data = tz
            .data()
            .iter()
            .zip(tt.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .collect();
        let value = Tensor::from_vec(tz.rows(), tz.cols(), data)?;
        let rg = self.rg(z) || self.rg(t);
        self.push(value, Op::BceWithLogits(z, t), rg)
    }

    /// Backpropagates from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape(format!(
                "backward from non-scalar {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(g) = &grads[i] {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient at {} node {i}",
                        node.op.name()
                    )));
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    /// Reduces a broadcast gradient back onto the shape of `target`.
    fn unbroadcast(g: &Tensor, target: &Tensor, scale: impl Fn(usize, usize) -> f64) -> Tensor {
        let mut out = Tensor::zeros(target.rows(), target.cols());
        let cols = g.cols();
        for r in 0..g.rows() {
            for c in 0..cols {
                let k = bidx(target, r, c);
                out.data_mut()[k] += g.get(r, c) * scale(r, c);
            }
        }
        out
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let d = g.matmul(&val(*b).transpose()).expect("matmul shapes");
                    self.accumulate(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = val(*a).transpose().matmul(g).expect("matmul shapes");
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let da = Self::unbroadcast(g, ta, |_, _| 1.0);
                let db = Self::unbroadcast(g, tb, |_, _| 1.0);
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Sub(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let da = Self::unbroadcast(g, ta, |_, _| 1.0);
                let db = Self::unbroadcast(g, tb, |_, _| -1.0);
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if self.rg(*a) {
                    let da = Self::unbroadcast(g, ta, |r, c| tb.data()[bidx(tb, r, c)]);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let db = Self::unbroadcast(g, tb, |r, c| ta.data()[bidx(ta, r, c)]);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let x = val(*a);
                let d = zip_map(g, x, |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = zip_map(g, y, |gi, yi| gi * yi * (1.0 - yi));
                self.accumulate(grads, *a, d);
            }
            Op::Log(a) => {
                let d = zip_map(g, val(*a), |gi, xi| gi / xi);
                self.accumulate(grads, *a, d);
            }
            Op::Pow(a, p) => {
                let p = *p;
                let d = zip_map(g, val(*a), |gi, xi| {
                    if xi == 0.0 {
                        if p == 1.0 {
                            gi
                        } else {
                            0.0
                        }
                    } else {
                        gi * p * xi.powf(p - 1.0)
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let d = zip_map(
                    g,
                    val(*a),
                    |gi, xi| {
                        if xi >= *lo && xi <= *hi {
                            gi
                        } else {
                            0.0
                        }
                    },
                );
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let cols = y.cols();
                let mut d = Tensor::zeros(y.rows(), cols);
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot = yr.iter().zip(gr).fold(0.0, |acc, (a, b)| acc + a * b);
                    for c in 0..cols {
                        d.set(r, c, yr[c] * (gr[c] - dot));
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                self.accumulate(grads, *a, Tensor::filled(r, c, g.item()));
            }
            Op::MeanAll(a) => {
                let t = val(*a);
                let k = g.item() / t.len() as f64;
                self.accumulate(grads, *a, Tensor::filled(t.rows(), t.cols(), k));
            }
            Op::SumRows(a) => {
                let t = val(*a);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                for r in 0..t.rows() {
                    for c in 0..t.cols() {
                        d.set(r, c, g.get(r, 0));
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::SumCols(a) => {
                let t = val(*a);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                for r in 0..t.rows() {
                    for c in 0..t.cols() {
                        d.set(r, c, g.get(0, c));
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::SquaredNorm(a) => {
                let k = 2.0 * g.item();
                self.accumulate(grads, *a, val(*a).map(|x| k * x));
            }
            Op::Reverse(a, lambda) => {
                let l = *lambda;
                self.accumulate(grads, *a, g.map(|x| -l * x));
            }
            Op::SelectCol(a, j) => {
                let t = val(*a);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                for r in 0..t.rows() {
                    d.set(r, *j, g.get(r, 0));
                }
                self.accumulate(grads, *a, d);
            }
            Op::ConcatCols(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let mut da = Tensor::zeros(ta.rows(), ta.cols());
                let mut db = Tensor::zeros(tb.rows(), tb.cols());
                for r in 0..ta.rows() {
                    for c in 0..ta.cols() {
                        da.set(r, c, g.get(r, c));
                    }
                    for c in 0..tb.cols() {
                        db.set(r, c, g.get(r, ta.cols() + c));
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::GatherRows(a, idx) => {
                let t = val(*a);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                for (out_row, &src) in idx.iter().enumerate() {
                    for c in 0..t.cols() {
                        let cur = d.get(src, c);
                        d.set(src, c, cur + g.get(out_row, c));
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::BceWithLogits(z, t) => {
                let (tz, tt) = (val(*z), val(*t));
                if self.rg(*z) {
                    let d = Tensor::from_vec(
                        tz.rows(),
                        tz.cols(),
                        g.data()
                            .iter()
                            .zip(tz.data().iter().zip(tt.data()))
                            .map(|(&gi, (&zi, &ti))| gi * (sigmoid(zi) - ti))
                            .collect(),
                    )
                    .expect("bce shapes");
                    self.accumulate(grads, *z, d);
                }
                if self.rg(*t) {
                    let d = zip_map(g, tz, |gi, zi| -gi * zi);
                    self.accumulate(grads, *t, d);
                }
            }
        }
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(x.data())
        .map(|(&a, &b)| f(a, b))
        .collect();
    Tensor::from_vec(g.rows(), g.cols(), data).expect("same shape")
}
