//! Reverse-mode automatic differentiation over a tape of tensor operations.
//!
//! Values are computed eagerly when an operation is recorded. [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients for every node that
//! depends on a differentiable leaf.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, AttnGeom, ConvGeom, SparseMap};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Powf(Var, T),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, Vec<T>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Reshape(Var),
    Sum(Var),
    Im2col(Var, ConvGeom),
    Sparse(Var, Arc<SparseMap<T>>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        scale: T,
        lse: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn shape_err(msg: alloc::string::String) -> Error {
    Error::Shape(msg)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (parameter or checked input).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let x = &self.nodes[a.0].value;
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.shape(), data).expect("same size");
        self.push(value, op, &[a])
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, what: &str, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(x.shape(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rc(a);
        let (k2, n) = self.rc(b);
        if k != k2 || self.shape(b).len() != 2 {
            return Err(shape_err(format!(
                "matmul: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |p, q| p * q)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), "div", |p, q| p / q)
    }

    /// Adds a length-`n` vector to every row of `[m, n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, n) = self.rc(a);
        if self.value(b).len() != n {
            return Err(shape_err(format!(
                "add_row: {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let bv = self.value(b).data().to_vec();
        let x = self.value(a);
        let data = x
            .data()
            .chunks(n)
            .flat_map(|r| r.iter().zip(&bv).map(|(&p, &q)| p + q))
            .collect();
        let value = Tensor::new(x.shape(), data)?;
        Ok(self.push(value, Op::AddRow(a, b), &[a, b]))
    }

    /// Multiplies every row of `[m, n]` elementwise by a length-`n` vector.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, n) = self.rc(a);
        if self.value(b).len() != n {
            return Err(shape_err(format!(
                "mul_row: {:?} * {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let bv = self.value(b).data().to_vec();
        let x = self.value(a);
        let data = x
            .data()
            .chunks(n)
            .flat_map(|r| r.iter().zip(&bv).map(|(&p, &q)| p * q))
            .collect();
        let value = Tensor::new(x.shape(), data)?;
        Ok(self.push(value, Op::MulRow(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::Scale(a, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::AddScalar(a), |v| v + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |v| v.libm_exp())
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), |v| v.libm_ln())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |v| v.abs())
    }

    pub fn powf(&mut self, a: Var, e: T) -> Var {
        self.unary(a, Op::Powf(a, e), |v| v.libm_powf(e))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut data = x.data().to_vec();
        let c = x.cols();
        for row in data.chunks_mut(c) {
            kernels::softmax_in_place(row);
        }
        let value = Tensor::new(x.shape(), data).expect("same size");
        self.push(value, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut data = x.data().to_vec();
        let c = x.cols();
        for row in data.chunks_mut(c) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let s: T = row.iter().map(|&v| (v - mx).libm_exp()).sum();
            let lse = mx + s.libm_ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(x.shape(), data).expect("same size");
        self.push(value, Op::LogSoftmax(a), &[a])
    }

    /// Normalizes each row to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let n = T::of(c as f64);
        let mut data = x.data().to_vec();
        let mut inv_std = Vec::with_capacity(x.rows());
        for row in data.chunks_mut(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let value = Tensor::new(x.shape(), data).expect("same size");
        self.push(value, Op::LayerNorm(a, inv_std), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.rc(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.rc(p);
            if r != rows {
                return Err(shape_err(format!("concat_cols: row counts {rows} and {r}")));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(&[rows, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.rc(a);
        if start >= end || end > cols {
            return Err(shape_err(format!("slice_cols: [{start}, {end}) of {cols}")));
        }
        let data = kernels::slice_cols(self.value(a).data(), rows, cols, start, end - start);
        let value = Tensor::new(&[rows, end - start], data)?;
        Ok(self.push(value, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.rc(parts[0]).1;
        let mut data = Vec::new();
        for &p in parts {
            if self.rc(p).1 != cols {
                return Err(shape_err(format!(
                    "concat_rows: column counts {cols} and {}",
                    self.rc(p).1
                )));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols;
        let value = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.rc(a);
        if start >= end || end > rows {
            return Err(shape_err(format!("slice_rows: [{start}, {end}) of {rows}")));
        }
        let data = self.value(a).data()[start * cols..end * cols].to_vec();
        let value = Tensor::new(&[end - start, cols], data)?;
        Ok(self.push(value, Op::SliceRows(a, start), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Patch extraction for convolution over a channel-last map with
    /// `geom.n * geom.h * geom.w` rows and `geom.c` columns.
    pub fn im2col(&mut self, a: Var, geom: ConvGeom) -> Result<Var> {
        let (rows, cols) = self.rc(a);
        if rows != geom.n * geom.h * geom.w || cols != geom.c {
            return Err(shape_err(format!(
                "im2col: input [{rows}, {cols}] does not match {geom:?}"
            )));
        }
        let data = kernels::im2col(self.value(a).data(), &geom);
        let value = Tensor::new(&[geom.n * geom.out_h() * geom.out_w(), geom.patch()], data)?;
        Ok(self.push(value, Op::Im2col(a, geom), &[a]))
    }

    /// Applies a sparse row-mixing operator.
    pub fn sparse(&mut self, a: Var, map: Arc<SparseMap<T>>) -> Result<Var> {
        let (rows, cols) = self.rc(a);
        if rows != map.n_in {
            return Err(shape_err(format!(
                "sparse: operator expects {} rows, got {rows}",
                map.n_in
            )));
        }
        let data = map.apply(self.value(a).data(), cols);
        let value = Tensor::new(&[map.n_out, cols], data)?;
        Ok(self.push(value, Op::Sparse(a, map), &[a]))
    }

    /// Multi-head scaled dot-product attention. `q: [L, heads*d_k]`,
    /// `k: [M, heads*d_k]`, `v: [M, heads*d_v]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, scale: T) -> Result<Var> {
        let (l, qc) = self.rc(q);
        let (m, kc) = self.rc(k);
        let (m2, vc) = self.rc(v);
        if qc != kc || m != m2 || qc % heads != 0 || vc % heads != 0 {
            return Err(shape_err(format!(
                "attention: q [{l}, {qc}], k [{m}, {kc}], v [{m2}, {vc}], heads {heads}"
            )));
        }
        let geom = AttnGeom {
            n_query: l,
            n_key: m,
            heads,
            d_k: qc / heads,
            d_v: vc / heads,
        };
        let (out, lse) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            &geom,
            scale,
        );
        let value = Tensor::new(&[l, vc], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                geom,
                scale,
                lse,
            },
            &[q, k, v],
        ))
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let rs = self.shape(root);
        grads[root.0] = Some(Tensor::full(rs, T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut [T]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.rc(*a);
                let n = self.rc(*b).1;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.acc(grads, *a) {
                    kernels::matmul_nt_acc(gd, bv, da, m, n, k);
                }
                if let Some(db) = self.acc(grads, *b) {
                    kernels::matmul_tn_acc(av, gd, db, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        d.iter_mut().zip(gd).for_each(|(x, &gv)| *x += gv);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(gd).for_each(|(x, &gv)| *x += gv);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(gd).for_each(|(x, &gv)| *x -= gv);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    for ((x, &gv), &o) in d.iter_mut().zip(gd).zip(bv) {
                        *x += gv * o;
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for ((x, &gv), &o) in d.iter_mut().zip(gd).zip(av) {
                        *x += gv * o;
                    }
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b).data();
                if let Some(d) = self.acc(grads, *a) {
                    for ((x, &gv), &q) in d.iter_mut().zip(gd).zip(bv) {
                        *x += gv / q;
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for (((x, &gv), &q), &out) in d.iter_mut().zip(gd).zip(bv).zip(y) {
                        *x -= gv * out / q;
                    }
                }
            }
            Op::AddRow(a, b) => {
                let n = self.rc(*a).1;
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(gd).for_each(|(x, &gv)| *x += gv);
                }
                if let Some(d) = self.acc(grads, *b) {
                    for row in gd.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(x, &gv)| *x += gv);
                    }
                }
            }
            Op::MulRow(a, b) => {
                let n = self.rc(*a).1;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    for (drow, grow) in d.chunks_mut(n).zip(gd.chunks(n)) {
                        for ((x, &gv), &s) in drow.iter_mut().zip(grow).zip(bv) {
                            *x += gv * s;
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for (arow, grow) in av.chunks(n).zip(gd.chunks(n)) {
                        for ((x, &gv), &s) in d.iter_mut().zip(grow).zip(arow) {
                            *x += gv * s;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(gd).for_each(|(x, &gv)| *x += gv * *c);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(gd).for_each(|(x, &gv)| *x += gv);
                }
            }
            Op::Relu(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    for ((x, &gv), &out) in d.iter_mut().zip(gd).zip(y) {
                        if out > T::zero() {
                            *x += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    for ((x, &gv), &s) in d.iter_mut().zip(gd).zip(y) {
                        *x += gv * s * (T::one() - s);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    for ((x, &gv), &e) in d.iter_mut().zip(gd).zip(y) {
                        *x += gv * e;
                    }
                }
            }
            Op::Ln(a) => {
                let av = self.value(*a).data();
                if let Some(d) = self.acc(grads, *a) {
                    for ((x, &gv), &v) in d.iter_mut().zip(gd).zip(av) {
                        *x += gv / v;
                    }
                }
            }
            Op::Abs(a) => {
                let av = self.value(*a).data();
                if let Some(d) = self.acc(grads, *a) {
                    for ((x, &gv), &v) in d.iter_mut().zip(gd).zip(av) {
                        if v > T::zero() {
                            *x += gv;
                        } else if v < T::zero() {
                            *x -= gv;
                        }
                    }
                }
            }
            Op::Powf(a, e) => {
                let av = self.value(*a).data();
                if let Some(d) = self.acc(grads, *a) {
                    for ((x, &gv), &v) in d.iter_mut().zip(gd).zip(av) {
                        *x += gv * *e * v.libm_powf(*e - T::one());
                    }
                }
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                if let Some(d) = self.acc(grads, *a) {
                    for ((drow, grow), prow) in d.chunks_mut(c).zip(gd.chunks(c)).zip(y.chunks(c)) {
                        let dotv: T = grow.iter().zip(prow).map(|(&gv, &p)| gv * p).sum();
                        for ((x, &gv), &p) in drow.iter_mut().zip(grow).zip(prow) {
                            *x += p * (gv - dotv);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                if let Some(d) = self.acc(grads, *a) {
                    for ((drow, grow), lrow) in d.chunks_mut(c).zip(gd.chunks(c)).zip(y.chunks(c)) {
                        let gs: T = grow.iter().copied().sum();
                        for ((x, &gv), &l) in drow.iter_mut().zip(grow).zip(lrow) {
                            *x += gv - l.libm_exp() * gs;
                        }
                    }
                }
            }
            Op::LayerNorm(a, inv_std) => {
                let c = node.value.cols();
                let n = T::of(c as f64);
                if let Some(d) = self.acc(grads, *a) {
                    for (((drow, grow), yrow), &is) in d
                        .chunks_mut(c)
                        .zip(gd.chunks(c))
                        .zip(y.chunks(c))
                        .zip(inv_std)
                    {
                        let gm = grow.iter().copied().sum::<T>() / n;
                        let gy = grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum::<T>() / n;
                        for ((x, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *x += is * (gv - gm - yv * gy);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let (rows, c) = self.rc(p);
                    if let Some(d) = self.acc(grads, p) {
                        for i in 0..rows {
                            let src = &gd[i * total + off..i * total + off + c];
                            d[i * c..(i + 1) * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, &gv)| *x += gv);
                        }
                    }
                    off += c;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.rc(*a);
                let w = node.value.cols();
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..rows {
                        d[i * cols + start..i * cols + start + w]
                            .iter_mut()
                            .zip(&gd[i * w..(i + 1) * w])
                            .for_each(|(x, &gv)| *x += gv);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(d) = self.acc(grads, p) {
                        d.iter_mut()
                            .zip(&gd[off..off + n])
                            .for_each(|(x, &gv)| *x += gv);
                    }
                    off += n;
                }
            }
            Op::SliceRows(a, start) => {
                let cols = self.rc(*a).1;
                if let Some(d) = self.acc(grads, *a) {
                    d[start * cols..start * cols + gd.len()]
                        .iter_mut()
                        .zip(gd)
                        .for_each(|(x, &gv)| *x += gv);
                }
            }
            Op::Sum(a) => {
                let gv = gd[0];
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().for_each(|x| *x += gv);
                }
            }
            Op::Im2col(a, geom) => {
                if let Some(d) = self.acc(grads, *a) {
                    kernels::col2im_acc(gd, geom, d);
                }
            }
            Op::Sparse(a, map) => {
                let cols = node.value.cols();
                if let Some(d) = self.acc(grads, *a) {
                    map.apply_transpose_acc(gd, cols, d);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                geom,
                scale,
                lse,
            } => {
                let r = kernels::attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    y,
                    lse,
                    gd,
                    geom,
                    *scale,
                );
                for (var, dg) in [(*q, r.dq), (*k, r.dk), (*v, r.dv)] {
                    if let Some(d) = self.acc(grads, var) {
                        d.iter_mut().zip(&dg).for_each(|(x, &gv)| *x += gv);
                    }
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).libm_exp())
    } else {
        let e = v.libm_exp();
        e / (T::one() + e)
    }
}
