//! A small reverse-mode tape over dense `f64` matrices.
//!
//! Every forward pass records its operations on a [`Tape`]; calling
//! [`Tape::backward`] on a scalar node returns gradients for every parameter
//! that was read through [`Tape::param`]. All values are 2-D; row vectors
//! are `[1 × n]`.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Named, ordered parameter matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }

    pub fn set(&mut self, id: ParamId, g: Mat) {
        self.grads[id.0] = Some(g);
    }

    fn accumulate(&mut self, id: ParamId, g: ArrayView2<f64>) {
        match &mut self.grads[id.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g.to_owned()),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g.view());
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * k);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Min(Var, Var),
    Max(Var, Var),
    MinScalar(Var, f64),
    MaxScalar(Var, f64),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Abs(Var),
    MulConst(Var, Mat),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SumAll(Var),
}

struct Node {
    value: Option<Mat>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation against a borrowed parameter store.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(512),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m.view(),
            (None, Op::Param(id)) => self.params.get(*id).view(),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Const,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.value(a) + &self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    /// Adds a `[1 × n]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a row vector");
        let v = &self.value(a) + &self.value(row);
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.value(a) - &self.value(b);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.value(a) * &self.value(b);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = &self.value(a) / &self.value(b);
        self.push(v, Op::Div(a, b), &[a, b])
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let v = Zip::from(&self.value(a))
            .and(&self.value(b))
            .map_collect(|&x, &y| x.min(y));
        self.push(v, Op::Min(a, b), &[a, b])
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let v = Zip::from(&self.value(a))
            .and(&self.value(b))
            .map_collect(|&x, &y| x.max(y));
        self.push(v, Op::Max(a, b), &[a, b])
    }

    pub fn min_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x.min(c));
        self.push(v, Op::MinScalar(a, c), &[a])
    }

    pub fn max_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x.max(c));
        self.push(v, Op::MaxScalar(a, c), &[a])
    }

    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let m = self.max_scalar(a, lo);
        self.min_scalar(m, hi)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).mapv(|x| x * k);
        self.push(v, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a), &[a])
    }

    /// Elementwise product with a constant matrix (dropout masks).
    pub fn mul_const(&mut self, a: Var, m: Mat) -> Var {
        let v = &self.value(a) * &m;
        self.push(v, Op::MulConst(a, m), &[a])
    }

    /// Row-wise softmax. Columns with `mask[j] == false` get probability 0.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros(x.dim());
        for (row_in, mut row_out) in x.outer_iter().zip(out.outer_iter_mut()) {
            let keep = |j: usize| mask.is_none_or(|m| m[j]);
            let mx = row_in
                .iter()
                .enumerate()
                .filter(|(j, _)| keep(*j))
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, (o, &v)) in row_out.iter_mut().zip(row_in.iter()).enumerate() {
                if keep(j) {
                    *o = (v - mx).exp();
                    sum += *o;
                }
            }
            row_out.mapv_inplace(|o| o / sum);
        }
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    /// Per-row layer normalization with `[1 × d]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = Mat::zeros(xv.dim());
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for (row, mut out) in xv.outer_iter().zip(xhat.outer_iter_mut()) {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            Zip::from(&mut out).and(&row).for_each(|o, &v| *o = (v - mean) * is);
            inv_std.push(is);
        }
        let y = &(&xhat * &self.value(gain)) + &self.value(bias);
        self.push(
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows column mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Reverse sweep from a `[1 × 1]` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads = Gradients::zeros_like(self.params);
        let mut adj: Vec<Option<Mat>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Mat::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, i, g, &mut adj, &mut grads);
        }
        grads
    }

    fn propagate(
        &self,
        op: &Op,
        idx: usize,
        g: Mat,
        adj: &mut [Option<Mat>],
        grads: &mut Gradients,
    ) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let send = |adj: &mut [Option<Mat>], v: Var, d: Mat| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => *acc += &d,
                slot @ None => *slot = Some(d),
            }
        };
        match op {
            Op::Const => {}
            Op::Param(id) => grads.accumulate(*id, g.view()),
            Op::MatMul(a, b) => {
                if needs(*a) {
                    send(adj, *a, g.dot(&self.value(*b).t()));
                }
                if needs(*b) {
                    send(adj, *b, self.value(*a).t().dot(&g));
                }
            }
            Op::MatMulT(a, b) => {
                if needs(*a) {
                    send(adj, *a, g.dot(&self.value(*b)));
                }
                if needs(*b) {
                    send(adj, *b, g.t().dot(&self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if needs(*b) {
                    send(adj, *b, g.clone());
                }
                send(adj, *a, g);
            }
            Op::AddRow(a, row) => {
                if needs(*row) {
                    send(adj, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                send(adj, *a, g);
            }
            Op::Sub(a, b) => {
                if needs(*b) {
                    send(adj, *b, g.mapv(|x| -x));
                }
                send(adj, *a, g);
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    send(adj, *a, &g * &self.value(*b));
                }
                if needs(*b) {
                    send(adj, *b, &g * &self.value(*a));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if needs(*a) {
                    send(adj, *a, &g / &bv);
                }
                if needs(*b) {
                    let out = self.value(Var(idx));
                    let d = Zip::from(&g)
                        .and(&out)
                        .and(&bv)
                        .map_collect(|&g, &o, &b| -g * o / b);
                    send(adj, *b, d);
                }
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let is_min = matches!(op, Op::Min(..));
                let (av, bv) = (self.value(*a), self.value(*b));
                let pick_a = Zip::from(&av).and(&bv).map_collect(|&x, &y| {
                    if is_min {
                        x <= y
                    } else {
                        x >= y
                    }
                });
                if needs(*a) {
                    let d = Zip::from(&g)
                        .and(&pick_a)
                        .map_collect(|&g, &p| if p { g } else { 0.0 });
                    send(adj, *a, d);
                }
                if needs(*b) {
                    let d = Zip::from(&g)
                        .and(&pick_a)
                        .map_collect(|&g, &p| if p { 0.0 } else { g });
                    send(adj, *b, d);
                }
            }
            Op::MinScalar(a, c) | Op::MaxScalar(a, c) => {
                let is_min = matches!(op, Op::MinScalar(..));
                let d = Zip::from(&g).and(&self.value(*a)).map_collect(|&g, &x| {
                    let pass = if is_min { x <= *c } else { x >= *c };
                    if pass {
                        g
                    } else {
                        0.0
                    }
                });
                send(adj, *a, d);
            }
            Op::Scale(a, k) => send(adj, *a, g.mapv(|x| x * k)),
            Op::AddScalar(a) => send(adj, *a, g),
            Op::Relu(a) => {
                let d = Zip::from(&g)
                    .and(&self.value(*a))
                    .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                send(adj, *a, d);
            }
            Op::Abs(a) => {
                let d = Zip::from(&g)
                    .and(&self.value(*a))
                    .map_collect(|&g, &x| g * x.signum() * (x != 0.0) as u8 as f64);
                send(adj, *a, d);
            }
            Op::MulConst(a, m) => send(adj, *a, &g * m),
            Op::SoftmaxRows(a) => {
                let y = self.value(Var(idx));
                let mut d = &g * &y;
                for (mut row, yr) in d.outer_iter_mut().zip(y.outer_iter()) {
                    let s = row.sum();
                    Zip::from(&mut row).and(&yr).for_each(|r, &y| *r -= y * s);
                }
                send(adj, *a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if needs(*bias) {
                    send(adj, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if needs(*gain) {
                    send(adj, *gain, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if needs(*x) {
                    let gh = &g * &self.value(*gain);
                    let n = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let ghr = gh.row(r);
                        let xr = xhat.row(r);
                        let s1 = ghr.sum();
                        let s2 = ghr.dot(&xr);
                        let k = inv_std[r] / n;
                        Zip::from(dx.row_mut(r))
                            .and(&ghr)
                            .and(&xr)
                            .for_each(|o, &gv, &xv| *o = k * (n * gv - s1 - xv * s2));
                    }
                    send(adj, *x, dx);
                }
            }
            Op::Transpose(a) => send(adj, *a, g.t().to_owned()),
            Op::SliceRows(a, start) => {
                let mut d = Mat::zeros(self.value(*a).dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                send(adj, *a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Mat::zeros(self.value(*a).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                send(adj, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).nrows();
                    if needs(p) {
                        send(adj, p, g.slice(s![off..off + n, ..]).to_owned());
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).ncols();
                    if needs(p) {
                        send(adj, p, g.slice(s![.., off..off + n]).to_owned());
                    }
                    off += n;
                }
            }
            Op::SumAll(a) => {
                let dim = self.value(*a).dim();
                send(adj, *a, Mat::from_elem(dim, g[[0, 0]]));
            }
        }
    }
}
