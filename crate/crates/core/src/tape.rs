//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] with one or more seed gradients walks the record in
//! reverse and returns the gradient of every node. Row vectors are `1 × n`
//! matrices; scalars are `1 × 1`.
//!
//! Leaves may borrow their storage (parameters are never copied into a tape)
//! or own it (inputs, constants).

use std::borrow::Cow;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

pub const NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Array2<f64>),
    Sigmoid(Var),
    Tanh(Var),
    Swish(Var),
    Square(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Array2<f64>, rstd: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Array2<f64>, rstd: Vec<f64>, batch_stats: bool },
    DepthwiseConv { x: Var, w: Var, b: Var },
    Unfold { x: Var, kernel: usize, stride: usize, pad: usize },
    Sum(Var),
}

struct Node<'a> {
    value: Cow<'a, Array2<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Operation record.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads[v.0].take()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean/variance normalisation of each row of `x`. Returns (xhat, 1/std).
fn normalize_rows(x: ArrayView2<f64>, eps: f64) -> (Array2<f64>, Vec<f64>) {
    let n = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut rstd = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let r = 1.0 / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * r);
        rstd.push(r);
    }
    (xhat, rstd)
}

/// Backward of row normalisation given dL/dxhat.
fn normalize_rows_backward(dxhat: ArrayView2<f64>, xhat: &Array2<f64>, rstd: &[f64]) -> Array2<f64> {
    let n = xhat.ncols() as f64;
    let mut dx = Array2::zeros(xhat.raw_dim());
    for (i, mut out) in dx.rows_mut().into_iter().enumerate() {
        let g = dxhat.row(i);
        let h = xhat.row(i);
        let sum_g = g.sum();
        let sum_gh = g.dot(&h);
        let r = rstd[i];
        Zip::from(&mut out).and(&g).and(&h).for_each(|o, &gv, &hv| {
            *o = r / n * (n * gv - sum_g - hv * sum_gh);
        });
    }
    dx
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let a = self.value(v);
        (a.nrows(), a.ncols())
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf that borrows its storage.
    pub fn param(&mut self, value: &'a Array2<f64>) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(value), op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf with owned storage.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let av = if ta { av.t() } else { av.view() };
        let bv = if tb { bv.t() } else { bv.view() };
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dimensions");
        let out = av.dot(&bv);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Adds the `1 × n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        assert_eq!(self.value(bias).nrows(), 1);
        let out = self.value(a) + self.value(bias);
        let rg = self.rg(a) || self.rg(bias);
        self.push(out, Op::AddRow(a, bias), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_const(&mut self, a: Var, c: &Array2<f64>) -> Var {
        let out = self.value(a) + c;
        let rg = self.rg(a);
        self.push(out, Op::AddConst(a), rg)
    }

    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        let out = self.value(a) * &c;
        let rg = self.rg(a);
        self.push(out, Op::MulConst(a, c), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(out, Op::Swish(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        let rg = self.rg(a);
        self.push(out, Op::Square(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::sqrt);
        let rg = self.rg(a);
        self.push(out, Op::Sqrt(a), rg)
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).mapv(|x| x.max(floor));
        let rg = self.rg(a);
        self.push(out, Op::ClampMin(a, floor), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(x);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let views: Vec<_> = xs.iter().map(|&v| self.value(v).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(out, Op::ConcatCols(xs.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let views: Vec<_> = xs.iter().map(|&v| self.value(v).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(out, Op::ConcatRows(xs.to_vec()), rg)
    }

    /// Softmax along `axis` (1: within each row, 0: within each column).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let mut out = self.value(x).clone();
        for mut lane in out.lanes_mut(Axis(axis)) {
            let m = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            lane.mapv_inplace(|v| (v - m).exp());
            let z = lane.sum();
            lane.mapv_inplace(|v| v / z);
        }
        let rg = self.rg(x);
        self.push(out, Op::Softmax { x, axis }, rg)
    }

    /// Per-row layer normalisation with `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (xhat, rstd) = normalize_rows(self.value(x).view(), NORM_EPS);
        let out = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// Batch normalisation over rows using the batch statistics.
    /// Returns the output together with the batch mean and biased variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, Vec<f64>, Vec<f64>) {
        let xv = self.value(x);
        let n = xv.nrows() as f64;
        let mean: Vec<f64> = xv.mean_axis(Axis(0)).unwrap().to_vec();
        let var: Vec<f64> =
            xv.columns().into_iter().zip(&mean).map(|(c, &m)| c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).collect();
        let (xhat_t, rstd) = normalize_rows(xv.t(), NORM_EPS);
        let xhat = xhat_t.reversed_axes().as_standard_layout().to_owned();
        let out = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, rstd, batch_stats: true }, rg);
        (v, mean, var)
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Var {
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut xhat = self.value(x).clone();
        for mut row in xhat.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[j]) * rstd[j];
            }
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::BatchNorm { x, gamma, beta, xhat, rstd, batch_stats: false }, rg)
    }

    /// Per-channel convolution along time with "same" zero padding.
    /// `x` is T × C, `w` is K × C (K odd), `b` is 1 × C.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (t, c) = (xv.nrows(), xv.ncols());
        let k = wv.nrows();
        assert_eq!(wv.ncols(), c);
        let pad = k / 2;
        let mut out = Array2::zeros((t, c));
        for ti in 0..t {
            let mut orow = out.row_mut(ti);
            orow.assign(&self.value(b).row(0));
            for ki in 0..k {
                let src = ti + ki;
                if src < pad || src - pad >= t {
                    continue;
                }
                let xr = xv.row(src - pad);
                let wr = wv.row(ki);
                Zip::from(&mut orow).and(&xr).and(&wr).for_each(|o, &a, &b| *o += a * b);
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::DepthwiseConv { x, w, b }, rg)
    }

    /// Sliding-window unfold along time: row `t'` of the result is the
    /// concatenation of rows `t'·stride − pad .. t'·stride − pad + kernel` of
    /// `x` (zeros outside). Output height is `(T + 2·pad − kernel) / stride + 1`.
    pub fn unfold(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let (t, f) = (xv.nrows(), xv.ncols());
        let t_out = (t + 2 * pad - kernel) / stride + 1;
        let mut out = Array2::zeros((t_out, kernel * f));
        for to in 0..t_out {
            for ki in 0..kernel {
                let src = to * stride + ki;
                if src < pad || src - pad >= t {
                    continue;
                }
                out.slice_mut(s![to, ki * f..(ki + 1) * f]).assign(&xv.row(src - pad));
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Unfold { x, kernel, stride, pad }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    /// Reverse sweep from the given seeds (`dL/dvar` for each var).
    pub fn backward(&self, seeds: &[(Var, &Array2<f64>)]) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for &(v, g) in seeds {
            assert_eq!(g.shape(), self.value(v).shape(), "seed shape");
            accumulate(&mut grads, v, g.clone());
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |v: Var, d: Array2<f64>| {
            if self.rg(v) {
                accumulate(grads, v, d);
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let av = self.value(a);
                let bv = self.value(b);
                let opa = if ta { av.t() } else { av.view() };
                let opb = if tb { bv.t() } else { bv.view() };
                if self.rg(a) {
                    let d = if ta { opb.dot(&g.t()) } else { g.dot(&opb.t()) };
                    acc(a, d);
                }
                if self.rg(b) {
                    let d = if tb { g.t().dot(&opa) } else { opa.t().dot(g) };
                    acc(b, d);
                }
            }
            &Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            &Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, -g);
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    acc(a, g * self.value(b));
                }
                if self.rg(b) {
                    acc(b, g * self.value(a));
                }
            }
            &Op::AddRow(a, bias) => {
                acc(a, g.clone());
                if self.rg(bias) {
                    acc(bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            &Op::Scale(a, c) => acc(a, g * c),
            &Op::AddConst(a) => acc(a, g.clone()),
            Op::MulConst(a, c) => acc(*a, g * c),
            &Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(&**out).for_each(|d, &y| *d *= y * (1.0 - y));
                acc(a, d);
            }
            &Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(&**out).for_each(|d, &y| *d *= 1.0 - y * y);
                acc(a, d);
            }
            &Op::Swish(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(a)).for_each(|d, &x| {
                    let s = sigmoid(x);
                    *d *= s * (1.0 + x * (1.0 - s));
                });
                acc(a, d);
            }
            &Op::Square(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(a)).for_each(|d, &x| *d *= 2.0 * x);
                acc(a, d);
            }
            &Op::Sqrt(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(&**out).for_each(|d, &y| *d *= 0.5 / y);
                acc(a, d);
            }
            &Op::ClampMin(a, floor) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(a)).for_each(|d, &x| {
                    if x < floor {
                        *d = 0.0;
                    }
                });
                acc(a, d);
            }
            &Op::SliceCols { x, start } => {
                let mut d = Array2::zeros(self.value(x).raw_dim());
                d.slice_mut(s![.., start..start + g.ncols()]).assign(g);
                acc(x, d);
            }
            Op::ConcatCols(xs) => {
                let mut off = 0;
                for &x in xs {
                    let w = self.value(x).ncols();
                    acc(x, g.slice(s![.., off..off + w]).to_owned());
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let h = self.value(x).nrows();
                    acc(x, g.slice(s![off..off + h, ..]).to_owned());
                    off += h;
                }
            }
            &Op::Softmax { x, axis } => {
                let mut d = g * &**out;
                let sums = d.sum_axis(Axis(axis));
                for (mut lane, (ylane, s)) in d.lanes_mut(Axis(axis)).into_iter().zip(out.lanes(Axis(axis)).into_iter().zip(sums.iter())) {
                    Zip::from(&mut lane).and(&ylane).for_each(|dv, &y| *dv -= y * s);
                }
                acc(x, d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                if self.rg(*gamma) {
                    acc(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*beta) {
                    acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*x) {
                    let dxhat = g * self.value(*gamma);
                    acc(*x, normalize_rows_backward(dxhat.view(), xhat, rstd));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd, batch_stats } => {
                if self.rg(*gamma) {
                    acc(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*beta) {
                    acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*x) {
                    let dxhat = g * self.value(*gamma);
                    let d = if *batch_stats {
                        let xhat_t = xhat.t().to_owned();
                        normalize_rows_backward(dxhat.t(), &xhat_t, rstd).reversed_axes().as_standard_layout().to_owned()
                    } else {
                        let mut d = dxhat;
                        for mut row in d.rows_mut() {
                            for (j, v) in row.iter_mut().enumerate() {
                                *v *= rstd[j];
                            }
                        }
                        d
                    };
                    acc(*x, d);
                }
            }
            &Op::DepthwiseConv { x, w, b } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let (t, k) = (xv.nrows(), wv.nrows());
                let pad = k / 2;
                let mut dx = Array2::zeros(xv.raw_dim());
                let mut dw = Array2::zeros(wv.raw_dim());
                for ti in 0..t {
                    let gr = g.row(ti);
                    for ki in 0..k {
                        let src = ti + ki;
                        if src < pad || src - pad >= t {
                            continue;
                        }
                        let xi = src - pad;
                        Zip::from(dx.row_mut(xi)).and(&gr).and(wv.row(ki)).for_each(|d, &gv, &wk| *d += gv * wk);
                        Zip::from(dw.row_mut(ki)).and(&gr).and(xv.row(xi)).for_each(|d, &gv, &xk| *d += gv * xk);
                    }
                }
                acc(x, dx);
                acc(w, dw);
                acc(b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            &Op::Unfold { x, kernel, stride, pad } => {
                let xv = self.value(x);
                let (t, f) = (xv.nrows(), xv.ncols());
                let mut dx = Array2::zeros((t, f));
                for to in 0..g.nrows() {
                    for ki in 0..kernel {
                        let src = to * stride + ki;
                        if src < pad || src - pad >= t {
                            continue;
                        }
                        let mut r = dx.row_mut(src - pad);
                        r += &g.slice(s![to, ki * f..(ki + 1) * f]);
                    }
                }
                acc(x, dx);
            }
            &Op::Sum(x) => {
                acc(x, Array2::from_elem(self.value(x).raw_dim(), g[[0, 0]]));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, d: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &d,
        slot @ None => *slot = Some(d),
    }
}
