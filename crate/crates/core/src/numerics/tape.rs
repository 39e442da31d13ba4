//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation as it is evaluated. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! accumulates adjoints into every registered parameter leaf. The tape is
//! not consumed, so the backward pass can be replayed.

use std::collections::BTreeMap;

use super::tensor::{log_sum_exp, sigmoid, Tensor};
use super::ParamStore;
use crate::error::{Result, SsnnError};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a * x + b`; only the scale matters for the adjoint.
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    MatVec(Var, Var),
    MatVecT(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    LogSoftmaxRows(Var, usize),
    RowSums(Var, usize),
    Sum(Var),
    Dot(Var, Var),
    AddN(Vec<Var>),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Mixture(Var, Var),
    OuterSum(Var, Var),
    StraightThrough(Var),
    ScaleBy(Var, Var),
    ShiftRows(Var, usize),
    Column(Var, usize, usize),
    GaussianLogProb { x: Vec<f64>, mu: Var, logvar: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of a scalar loss keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.grads.insert(name, grad);
    }

    /// Euclidean norm over every entry whose name satisfies `filter`.
    pub fn norm_where(&self, filter: impl Fn(&str) -> bool) -> f64 {
        self.grads
            .iter()
            .filter(|(n, _)| filter(n))
            .map(|(_, g)| g.sq_norm())
            .sum::<f64>()
            .sqrt()
    }

    pub fn norm(&self) -> f64 {
        self.norm_where(|_| true)
    }

    /// Drops every gradient whose name fails `keep`.
    pub fn retain(&mut self, keep: impl Fn(&str) -> bool) {
        self.grads.retain(|name, _| keep(name));
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// `self += other`, inserting names that are missing here.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(acc) => {
                    assert_eq!(acc.shape(), g.shape(), "gradient shape mismatch for {name}");
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
    }

    /// First entry that is not finite, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.grads
            .iter()
            .find(|(_, g)| !g.is_finite())
            .map(|(n, _)| n.as_str())
    }
}

/// Operation record for one forward evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

fn shape_panic(op: &str, a: &[usize], b: &[usize]) -> ! {
    panic!("contract violation: shape mismatch in {op}: {a:?} vs {b:?}")
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.params.retain(|(_, v)| v.0 < len);
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf whose gradient is reported under `name`.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        let v = self.push(value.clone(), Op::Leaf);
        self.params.push((name.to_string(), v));
        v
    }

    /// Registers every tensor of `store` and returns the handles by name.
    pub fn bind_store(&mut self, store: &ParamStore) -> BTreeMap<String, Var> {
        store
            .iter()
            .map(|(name, t)| (name.clone(), self.param(name, t)))
            .collect()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_vec(&mut self, data: &[f64]) -> Var {
        self.push(Tensor::vector(data.to_vec()), Op::Leaf)
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if self.data(a).len() != self.data(b).len() {
            shape_panic(name, sa, sb);
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::from_parts(sa.to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, "add", |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, "sub", |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, "mul", |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.map(a, |x| scale * x + shift);
        self.push(v, Op::Affine(a, scale))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::ln);
        self.push(v, Op::Log(a))
    }

    fn rows_cols(&self, w: Var) -> (usize, usize) {
        let s = self.shape(w);
        if s.len() < 2 {
            panic!("contract violation: matrix operand has shape {s:?}");
        }
        let cols = *s.last().unwrap();
        (self.data(w).len() / cols, cols)
    }

    /// `W x` for `W` of shape `[rows, cols]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let (rows, cols) = self.rows_cols(w);
        if self.data(x).len() != cols {
            shape_panic("matvec", self.shape(w), self.shape(x));
        }
        let (wd, xd) = (self.data(w), self.data(x));
        let out: Vec<f64> = (0..rows)
            .map(|r| {
                wd[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(xd)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        self.push(Tensor::vector(out), Op::MatVec(w, x))
    }

    /// `Wᵀ x` for `W` of shape `[rows, cols]`.
    pub fn matvec_t(&mut self, w: Var, x: Var) -> Var {
        let (rows, cols) = self.rows_cols(w);
        if self.data(x).len() != rows {
            shape_panic("matvec_t", self.shape(w), self.shape(x));
        }
        let (wd, xd) = (self.data(w), self.data(x));
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            let xr = xd[r];
            for (o, a) in out.iter_mut().zip(&wd[r * cols..(r + 1) * cols]) {
                *o += a * xr;
            }
        }
        self.push(Tensor::vector(out), Op::MatVecT(w, x))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = super::tensor::softmax(self.data(a));
        self.push(Tensor::vector(v), Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = super::tensor::log_softmax(self.data(a));
        self.push(Tensor::vector(v), Op::LogSoftmax(a))
    }

    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let v = log_sum_exp(self.data(a));
        self.push(Tensor::scalar(v), Op::LogSumExp(a))
    }

    /// Row-wise log-softmax of a tensor viewed as `[len / cols, cols]`.
    pub fn log_softmax_rows(&mut self, a: Var, cols: usize) -> Var {
        let t = self.value(a);
        assert!(
            cols > 0 && t.len() % cols == 0,
            "contract violation: log_softmax_rows with {cols} columns on shape {:?}",
            t.shape()
        );
        let data: Vec<f64> = t
            .data()
            .chunks(cols)
            .flat_map(super::tensor::log_softmax)
            .collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::LogSoftmaxRows(a, cols))
    }

    /// Sums of consecutive groups of `cols` entries.
    pub fn row_sums(&mut self, a: Var, cols: usize) -> Var {
        let t = self.value(a);
        assert!(
            cols > 0 && t.len() % cols == 0,
            "contract violation: row_sums with {cols} columns on shape {:?}",
            t.shape()
        );
        let data: Vec<f64> = t.data().chunks(cols).map(|c| c.iter().sum()).collect();
        self.push(Tensor::vector(data), Op::RowSums(a, cols))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        if self.data(a).len() != self.data(b).len() {
            shape_panic("dot", self.shape(a), self.shape(b));
        }
        let s = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .sum();
        self.push(Tensor::scalar(s), Op::Dot(a, b))
    }

    /// Sum of same-shaped tensors, accumulated left to right.
    pub fn add_n(&mut self, terms: &[Var]) -> Var {
        assert!(!terms.is_empty(), "contract violation: add_n of nothing");
        let mut acc = self.value(terms[0]).clone();
        for &t in &terms[1..] {
            if self.data(t).len() != acc.len() {
                shape_panic("add_n", acc.shape(), self.shape(t));
            }
            for (a, b) in acc.data_mut().iter_mut().zip(self.data(t)) {
                *a += b;
            }
        }
        self.push(acc, Op::AddN(terms.to_vec()))
    }

    /// Flattened concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let data: Vec<f64> = parts.iter().flat_map(|&p| self.data(p).to_vec()).collect();
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()))
    }

    /// Contiguous range of the flattened tensor.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let d = self.data(a);
        assert!(
            start + len <= d.len() && len > 0,
            "contract violation: slice {start}..{} of length {}",
            start + len,
            d.len()
        );
        let v = d[start..start + len].to_vec();
        self.push(Tensor::vector(v), Op::Slice(a, start))
    }

    /// `Σ_k w_k · bank[k]` over the leading axis of `bank`.
    ///
    /// Entries of `w` that are exactly zero are skipped, so a one-hot `w`
    /// reproduces the selected slice bit for bit.
    pub fn mixture(&mut self, bank: Var, weights: Var) -> Var {
        let b = self.value(bank);
        let w = self.data(weights);
        if b.shape().is_empty() || b.shape()[0] != w.len() {
            shape_panic("mixture", b.shape(), self.shape(weights));
        }
        let n = b.slice_len();
        let mut out = vec![0.0; n];
        for (k, &wk) in w.iter().enumerate() {
            if wk == 0.0 {
                continue;
            }
            let s = b.slice(k);
            if wk == 1.0 {
                out.iter_mut().zip(s).for_each(|(o, x)| *o += x);
            } else {
                out.iter_mut().zip(s).for_each(|(o, x)| *o += wk * x);
            }
        }
        let shape = if b.shape().len() == 1 {
            Vec::new()
        } else {
            b.shape()[1..].to_vec()
        };
        self.push(Tensor::from_parts(shape, out), Op::Mixture(bank, weights))
    }

    /// `out[i * len(b) + j] = a[i] + b[j]`.
    pub fn outer_sum(&mut self, a: Var, b: Var) -> Var {
        let (ad, bd) = (self.data(a), self.data(b));
        let data: Vec<f64> = ad
            .iter()
            .flat_map(|x| bd.iter().map(move |y| x + y))
            .collect();
        self.push(Tensor::vector(data), Op::OuterSum(a, b))
    }

    /// `s · v` for a scalar `s`.
    pub fn scale_by(&mut self, s: Var, v: Var) -> Var {
        if self.data(s).len() != 1 {
            shape_panic("scale_by", self.shape(s), self.shape(v));
        }
        let k = self.data(s)[0];
        let out = self.map(v, |x| k * x);
        self.push(out, Op::ScaleBy(s, v))
    }

    /// Treats `a` as rows of `cols` entries and moves every entry one column
    /// left; the last column becomes zero.
    pub fn shift_rows(&mut self, a: Var, cols: usize) -> Var {
        let d = self.data(a);
        if cols == 0 || d.len() % cols != 0 {
            shape_panic("shift_rows", self.shape(a), &[cols]);
        }
        let mut out = vec![0.0; d.len()];
        for (o, r) in out.chunks_exact_mut(cols).zip(d.chunks_exact(cols)) {
            o[..cols - 1].copy_from_slice(&r[1..]);
        }
        self.push(Tensor::vector(out), Op::ShiftRows(a, cols))
    }

    /// Column `j` of `a` viewed as rows of `cols` entries.
    pub fn column(&mut self, a: Var, cols: usize, j: usize) -> Var {
        let d = self.data(a);
        if cols == 0 || j >= cols || d.len() % cols != 0 {
            shape_panic("column", self.shape(a), &[cols, j]);
        }
        let out = d.chunks_exact(cols).map(|r| r[j]).collect();
        self.push(Tensor::vector(out), Op::Column(a, cols, j))
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Var {
        if hard.len() != self.data(soft).len() {
            shape_panic("straight_through", self.shape(soft), hard.shape());
        }
        self.push(hard, Op::StraightThrough(soft))
    }

    /// Diagonal Gaussian log-density of the constant `x` under `(mu, logvar)`.
    pub fn gaussian_log_prob(&mut self, x: &[f64], mu: Var, logvar: Var) -> Var {
        let (md, lv) = (self.data(mu), self.data(logvar));
        if md.len() != x.len() || lv.len() != x.len() {
            shape_panic("gaussian_log_prob", self.shape(mu), self.shape(logvar));
        }
        let mut s = 0.0;
        for j in 0..x.len() {
            let diff = x[j] - md[j];
            s += -HALF_LN_2PI - 0.5 * lv[j] - 0.5 * diff * diff * (-lv[j]).exp();
        }
        self.push(
            Tensor::scalar(s),
            Op::GaussianLogProb {
                x: x.to_vec(),
                mu,
                logvar,
            },
        )
    }

    /// Reverse accumulation from a scalar `loss`.
    ///
    /// Every registered parameter receives an entry; parameters that do not
    /// influence `loss` get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(SsnnError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }

        let mut out = Gradients::default();
        for (name, v) in &self.params {
            let shape = self.shape(*v).to_vec();
            let data = match adj.get(v.0).and_then(|a| a.clone()) {
                Some(d) => d,
                None => vec![0.0; self.data(*v).len()],
            };
            let t = Tensor::from_parts(shape, data);
            match out.grads.get_mut(name) {
                // the same name bound twice: gradients add
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(t.data())
                    .for_each(|(a, b)| *a += b),
                None => {
                    out.grads.insert(name.clone(), t);
                }
            }
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(adj, *a, self.data(*a).len(), |d| add_into(d, g));
                acc(adj, *b, self.data(*b).len(), |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(adj, *a, g.len(), |d| add_into(d, g));
                acc(adj, *b, g.len(), |d| {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(adj, *a, g.len(), |d| {
                    for j in 0..g.len() {
                        d[j] += g[j] * bd[j];
                    }
                });
                acc(adj, *b, g.len(), |d| {
                    for j in 0..g.len() {
                        d[j] += g[j] * ad[j];
                    }
                });
            }
            Op::Affine(a, scale) => {
                acc(adj, *a, g.len(), |d| {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += scale * y)
                });
            }
            Op::Tanh(a) => acc(adj, *a, g.len(), |d| {
                for j in 0..g.len() {
                    d[j] += g[j] * (1.0 - out[j] * out[j]);
                }
            }),
            Op::Sigmoid(a) => acc(adj, *a, g.len(), |d| {
                for j in 0..g.len() {
                    d[j] += g[j] * out[j] * (1.0 - out[j]);
                }
            }),
            Op::Exp(a) => acc(adj, *a, g.len(), |d| {
                for j in 0..g.len() {
                    d[j] += g[j] * out[j];
                }
            }),
            Op::Log(a) => {
                let ad = self.data(*a);
                acc(adj, *a, g.len(), |d| {
                    for j in 0..g.len() {
                        d[j] += g[j] / ad[j];
                    }
                })
            }
            Op::MatVec(w, x) => {
                let (rows, cols) = self.rows_cols(*w);
                let (wd, xd) = (self.data(*w), self.data(*x));
                acc(adj, *w, rows * cols, |d| {
                    for r in 0..rows {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        for (dv, xv) in d[r * cols..(r + 1) * cols].iter_mut().zip(xd) {
                            *dv += gr * xv;
                        }
                    }
                });
                acc(adj, *x, cols, |d| {
                    for r in 0..rows {
                        let gr = g[r];
                        for (dv, wv) in d.iter_mut().zip(&wd[r * cols..(r + 1) * cols]) {
                            *dv += gr * wv;
                        }
                    }
                });
            }
            Op::MatVecT(w, x) => {
                let (rows, cols) = self.rows_cols(*w);
                let (wd, xd) = (self.data(*w), self.data(*x));
                acc(adj, *w, rows * cols, |d| {
                    for r in 0..rows {
                        let xr = xd[r];
                        for (dv, gv) in d[r * cols..(r + 1) * cols].iter_mut().zip(g) {
                            *dv += xr * gv;
                        }
                    }
                });
                acc(adj, *x, rows, |d| {
                    for r in 0..rows {
                        d[r] += wd[r * cols..(r + 1) * cols]
                            .iter()
                            .zip(g)
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                });
            }
            Op::Softmax(a) => {
                let inner: f64 = g.iter().zip(out).map(|(x, y)| x * y).sum();
                acc(adj, *a, g.len(), |d| {
                    for j in 0..g.len() {
                        d[j] += out[j] * (g[j] - inner);
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let total: f64 = g.iter().sum();
                acc(adj, *a, g.len(), |d| {
                    for j in 0..g.len() {
                        d[j] += g[j] - out[j].exp() * total;
                    }
                });
            }
            Op::LogSumExp(a) => {
                let ad = self.data(*a);
                let lse = out[0];
                acc(adj, *a, ad.len(), |d| {
                    for j in 0..ad.len() {
                        d[j] += g[0] * (ad[j] - lse).exp();
                    }
                });
            }
            Op::LogSoftmaxRows(a, cols) => {
                acc(adj, *a, g.len(), |d| {
                    for (r, (gr, or)) in g.chunks(*cols).zip(out.chunks(*cols)).enumerate() {
                        let total: f64 = gr.iter().sum();
                        for j in 0..*cols {
                            d[r * cols + j] += gr[j] - or[j].exp() * total;
                        }
                    }
                });
            }
            Op::RowSums(a, cols) => {
                let n = self.data(*a).len();
                acc(adj, *a, n, |d| {
                    for (j, dv) in d.iter_mut().enumerate() {
                        *dv += g[j / cols];
                    }
                });
            }
            Op::Sum(a) => {
                let n = self.data(*a).len();
                acc(adj, *a, n, |d| d.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Dot(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(adj, *a, ad.len(), |d| {
                    d.iter_mut().zip(bd).for_each(|(x, y)| *x += g[0] * y)
                });
                acc(adj, *b, bd.len(), |d| {
                    d.iter_mut().zip(ad).for_each(|(x, y)| *x += g[0] * y)
                });
            }
            Op::AddN(terms) => {
                for t in terms {
                    acc(adj, *t, g.len(), |d| add_into(d, g));
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.data(*p).len();
                    acc(adj, *p, n, |d| add_into(d, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Slice(a, start) => {
                let n = self.data(*a).len();
                acc(adj, *a, n, |d| add_into(&mut d[*start..*start + g.len()], g));
            }
            Op::Mixture(bank, weights) => {
                let b = self.value(*bank);
                let w = self.data(*weights);
                let n = b.slice_len();
                acc(adj, *bank, b.len(), |d| {
                    for (k, &wk) in w.iter().enumerate() {
                        if wk == 0.0 {
                            continue;
                        }
                        for (dv, gv) in d[k * n..(k + 1) * n].iter_mut().zip(g) {
                            *dv += wk * gv;
                        }
                    }
                });
                acc(adj, *weights, w.len(), |d| {
                    for (k, dv) in d.iter_mut().enumerate() {
                        *dv += b.slice(k).iter().zip(g).map(|(x, y)| x * y).sum::<f64>();
                    }
                });
            }
            Op::ScaleBy(sv, v) => {
                let k = self.data(*sv)[0];
                let vd = self.data(*v);
                let ds: f64 = g.iter().zip(vd).map(|(a, b)| a * b).sum();
                acc(adj, *sv, 1, |d| d[0] += ds);
                acc(adj, *v, g.len(), |d| {
                    for j in 0..g.len() {
                        d[j] += k * g[j];
                    }
                });
            }
            Op::ShiftRows(a, cols) => {
                let cols = *cols;
                acc(adj, *a, g.len(), |d| {
                    for (dr, gr) in d.chunks_exact_mut(cols).zip(g.chunks_exact(cols)) {
                        add_into(&mut dr[1..], &gr[..cols - 1]);
                    }
                });
            }
            Op::Column(a, cols, j) => {
                let n = self.data(*a).len();
                let (cols, j) = (*cols, *j);
                acc(adj, *a, n, |d| {
                    for (r, gv) in g.iter().enumerate() {
                        d[r * cols + j] += gv;
                    }
                });
            }
            Op::OuterSum(a, b) => {
                let (na, nb) = (self.data(*a).len(), self.data(*b).len());
                acc(adj, *a, na, |d| {
                    for i in 0..na {
                        d[i] += g[i * nb..(i + 1) * nb].iter().sum::<f64>();
                    }
                });
                acc(adj, *b, nb, |d| {
                    for i in 0..na {
                        for j in 0..nb {
                            d[j] += g[i * nb + j];
                        }
                    }
                });
            }
            Op::StraightThrough(soft) => acc(adj, *soft, g.len(), |d| add_into(d, g)),
            Op::GaussianLogProb { x, mu, logvar } => {
                let (md, lv) = (self.data(*mu), self.data(*logvar));
                let g0 = g[0];
                acc(adj, *mu, x.len(), |d| {
                    for j in 0..x.len() {
                        d[j] += g0 * (x[j] - md[j]) * (-lv[j]).exp();
                    }
                });
                acc(adj, *logvar, x.len(), |d| {
                    for j in 0..x.len() {
                        let diff = x[j] - md[j];
                        d[j] += g0 * (-0.5 + 0.5 * diff * diff * (-lv[j]).exp());
                    }
                });
            }
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
}

fn acc(adj: &mut [Option<Vec<f64>>], v: Var, n: usize, f: impl FnOnce(&mut [f64])) {
    let slot = adj[v.0].get_or_insert_with(|| vec![0.0; n]);
    f(slot);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(
        inputs: &[Tensor],
        build: impl Fn(&mut Tape, &[Var]) -> Var,
    ) -> f64 {
        let eval = |vals: &[Tensor]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = vals
                .iter()
                .enumerate()
                .map(|(i, v)| t.param(&format!("p{i}"), v))
                .collect();
            let out = build(&mut t, &vars);
            let g = t.backward(out).unwrap();
            (t.scalar(out), g)
        };
        let (_, grads) = eval(inputs);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (i, inp) in inputs.iter().enumerate() {
            for j in 0..inp.len() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let an = grads.get(&format!("p{i}")).unwrap().data()[j];
                worst = worst.max((an - fd).abs() / fd.abs().max(1.0));
            }
        }
        worst
    }

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec())
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let p = t.param("p", &Tensor::scalar(3.0));
        let sq = t.mul(p, p);
        let g = t.backward(sq).unwrap();
        assert_eq!(g.get("p").unwrap().item(), 6.0);
    }

    #[test]
    fn lse_gradient_is_softmax() {
        let mut t = Tape::new();
        let p = t.param("p", &v(&[0.0, 0.0]));
        let l = t.log_sum_exp(p);
        assert!((t.scalar(l) - std::f64::consts::LN_2).abs() < 1e-15);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get("p").unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn unused_param_gets_zero() {
        let mut t = Tape::new();
        let a = t.param("a", &v(&[1.0, 2.0]));
        let _b = t.param("b", &v(&[3.0]));
        let s = t.sum(a);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get("b").unwrap().data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let a = t.param("a", &v(&[1.0, 2.0]));
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn backward_replays_identically() {
        let mut t = Tape::new();
        let a = t.param("a", &v(&[0.3, -0.2]));
        let th = t.tanh(a);
        let s = t.log_sum_exp(th);
        assert_eq!(t.backward(s).unwrap(), t.backward(s).unwrap());
    }

    #[test]
    fn mixture_one_hot_selects_exactly() {
        let mut t = Tape::new();
        let bank = t.constant(Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, 1.1, 1.2, 1.3]));
        let w = t.constant_vec(&[1.0, 0.0]);
        let m = t.mixture(bank, w);
        assert_eq!(t.value(m).data(), &[0.1, 0.2, 0.3]);
    }

    #[test]
    #[should_panic(expected = "shape mismatch in add")]
    fn shape_mismatch_names_shapes() {
        let mut t = Tape::new();
        let a = t.constant_vec(&[1.0, 2.0]);
        let b = t.constant_vec(&[1.0]);
        t.add(a, b);
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let x = v(&[0.3, -0.7, 1.1]);
        let y = v(&[0.5, 0.9, -0.4]);
        let err = fd_check(&[x.clone(), y.clone()], |t, p| {
            let a = t.add(p[0], p[1]);
            let b = t.mul(a, p[1]);
            let c = t.sub(b, p[0]);
            let d = t.tanh(c);
            let e = t.sigmoid(d);
            let f = t.exp(e);
            let g = t.log(f);
            let h = t.affine(g, -1.5, 0.2);
            let s = t.softmax(h);
            let ls = t.log_softmax(s);
            t.dot(ls, p[0])
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn structured_ops_match_finite_differences() {
        let w = Tensor::matrix(3, 2, vec![0.2, -0.1, 0.4, 0.3, -0.5, 0.6]);
        let x = v(&[0.7, -0.3]);
        let bank = Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 0.5, 0.4, -0.6]).unwrap();
        let wts = v(&[0.3, 0.7]);
        let err = fd_check(&[w, x, bank, wts], |t, p| {
            let a = t.matvec(p[0], p[1]);
            let b = t.matvec_t(p[0], a);
            let m = t.mixture(p[2], p[3]);
            let c = t.concat(&[a, b, m]);
            let s = t.slice(c, 1, 6);
            let rs = t.row_sums(s, 2);
            let lsr = t.log_softmax_rows(s, 3);
            let os = t.outer_sum(rs, p[3]);
            let st = {
                let hard = t.value(os).clone();
                t.straight_through(os, hard)
            };
            let e = t.add_n(&[st, os]);
            let l1 = t.log_sum_exp(e);
            let l2 = t.sum(lsr);
            let mu = t.slice(c, 0, 2);
            let lv = t.slice(c, 2, 2);
            let gl = t.gaussian_log_prob(&[0.1, -0.4], mu, lv);
            let parts = t.concat(&[l1, l2, gl]);
            t.sum(parts)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn countdown_ops_match_finite_differences() {
        let a = v(&[0.3, -0.2, 0.9, 0.4, 0.1, -0.7]);
        let s = Tensor::scalar(0.6);
        let w = v(&[0.5, -1.1, 0.2, 0.8, -0.3, 0.25]);
        let err = fd_check(&[a, s, w], |t, p| {
            let sh = t.shift_rows(p[0], 3);
            let sc = t.scale_by(p[1], sh);
            let col = t.column(sc, 3, 0);
            let c2 = t.column(p[0], 2, 1);
            let all = t.concat(&[sc, col, c2]);
            let ws = t.concat(&[p[2], p[2]]);
            let head = t.slice(ws, 0, 11);
            t.dot(all, head)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn shift_rows_moves_each_row_left() {
        let mut t = Tape::new();
        let a = t.constant_vec(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = t.shift_rows(a, 3);
        assert_eq!(t.value(s).data(), &[2.0, 3.0, 0.0, 5.0, 6.0, 0.0]);
        let c = t.column(a, 3, 0);
        assert_eq!(t.value(c).data(), &[1.0, 4.0]);
    }
}
