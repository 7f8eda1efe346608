//! Reverse-mode differentiation over a recorded computation graph.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles along
//! with the forward value. [`Graph::grad`] walks the record backwards from a
//! scalar output. Methods take `&self` so expressions can nest freely.

use std::cell::{Ref, RefCell};

use super::dft::{dft2, dft2_adjoint_real, Spectrum};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Recip(Var),
    Abs(Var),
    Square(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm(Var, f64),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    Dft2Mag(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(c) {
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
    out
}

fn log_softmax_rows(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

fn layer_norm(t: &Tensor, eps: f64) -> Tensor {
    let c = t.cols();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

fn spectra(t: &Tensor) -> Vec<Spectrum> {
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    (0..c)
        .map(|ch| dft2(&super::dft::channel_plane(t, ch), h, w))
        .collect()
}

fn shape_err(what: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value from {op:?}");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Differentiable input.
    pub fn param(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var {
        let out = f(&self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    fn binary_same(&self, a: Var, b: Var, op: Op, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            if ta.shape() != tb.shape() {
                return Err(shape_err(what, &ta, &tb));
            }
            ta.zip_map(&tb, f)?
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// `a (r×c) + row (1×c)` broadcast over rows.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let out = {
            let (ta, tr) = (self.value(a), self.value(row));
            if tr.len() != ta.cols() {
                return Err(shape_err("add_row", &ta, &tr));
            }
            let c = ta.cols();
            let mut out = ta.clone();
            for chunk in out.data_mut().chunks_mut(c) {
                for (o, r) in chunk.iter_mut().zip(tr.data()) {
                    *o += r;
                }
            }
            out
        };
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// `a (r×c) ⊙ row (1×c)` broadcast over rows.
    pub fn mul_row(&self, a: Var, row: Var) -> Result<Var> {
        let out = {
            let (ta, tr) = (self.value(a), self.value(row));
            if tr.len() != ta.cols() {
                return Err(shape_err("mul_row", &ta, &tr));
            }
            let c = ta.cols();
            let mut out = ta.clone();
            for chunk in out.data_mut().chunks_mut(c) {
                for (o, r) in chunk.iter_mut().zip(tr.data()) {
                    *o *= r;
                }
            }
            out
        };
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::MulRow(a, row), rg))
    }

    /// `a (r×c) ⊙ col (r×1)` broadcast over columns.
    pub fn mul_col(&self, a: Var, col: Var) -> Result<Var> {
        let out = {
            let (ta, tc) = (self.value(a), self.value(col));
            if tc.len() != ta.rows() {
                return Err(shape_err("mul_col", &ta, &tc));
            }
            let c = ta.cols();
            let mut out = ta.clone();
            for (chunk, s) in out.data_mut().chunks_mut(c).zip(tc.data()) {
                for o in chunk.iter_mut() {
                    *o *= s;
                }
            }
            out
        };
        let rg = self.rg(&[a, col]);
        Ok(self.push(out, Op::MulCol(a, col), rg))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |t| t.scale(s))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |t| t.map(|v| v + s))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(&self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(false, &self.value(b), true)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&self, a: Var) -> Var {
        self.unary(a, Op::Transpose(a), Tensor::transpose)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |t| t.map(f64::exp))
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |t| t.map(f64::ln))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), |t| t.map(f64::sqrt))
    }

    pub fn recip(&self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), |t| t.map(|v| 1.0 / v))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |t| t.map(f64::abs))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |t| t.map(|v| v * v))
    }

    pub fn gelu(&self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), |t| t.map(gelu))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        self.unary(a, Op::SoftmaxRows(a), softmax_rows)
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        self.unary(a, Op::LogSoftmaxRows(a), log_softmax_rows)
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&self, a: Var, eps: f64) -> Var {
        self.unary(a, Op::LayerNorm(a, eps), |t| layer_norm(t, eps))
    }

    pub fn sum(&self, a: Var) -> Var {
        self.unary(a, Op::SumAll(a), |t| Tensor::scalar(t.sum()))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over rows: `r×c → 1×c`.
    pub fn sum_rows(&self, a: Var) -> Var {
        self.unary(a, Op::SumRows(a), |t| {
            let c = t.cols();
            let mut out = vec![0.0; c];
            for chunk in t.data().chunks(c) {
                for (o, v) in out.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            Tensor::new(vec![1, c], out).expect("row sum shape")
        })
    }

    pub fn mean_rows(&self, a: Var) -> Var {
        let r = self.value(a).rows().max(1) as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / r)
    }

    /// Sum over columns: `r×c → r×1`.
    pub fn sum_cols(&self, a: Var) -> Var {
        self.unary(a, Op::SumCols(a), |t| {
            let c = t.cols();
            let out: Vec<f64> = t.data().chunks(c).map(|ch| ch.iter().sum()).collect();
            Tensor::new(vec![out.len(), 1], out).expect("col sum shape")
        })
    }

    /// Flat gather: `out.flat[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let out = {
            let ta = self.value(a);
            if let Some(&bad) = index.iter().find(|&&i| i >= ta.len()) {
                return Err(Error::Shape(format!(
                    "gather index {bad} out of range for {} values",
                    ta.len()
                )));
            }
            let data = index.iter().map(|&i| ta.data()[i]).collect();
            Tensor::new(shape.to_vec(), data)?
        };
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Gather(a, index), rg))
    }

    /// Select whole rows of a 2-D node.
    pub fn gather_rows(&self, a: Var, rows: &[usize]) -> Result<Var> {
        let c = self.value(a).cols();
        let index = rows
            .iter()
            .flat_map(|&r| (r * c)..(r * c + c))
            .collect();
        self.gather(a, index, &[rows.len(), c])
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let c = nodes[parts[0].0].value.cols();
            let mut data = Vec::new();
            let mut r = 0;
            for p in parts {
                let t = &nodes[p.0].value;
                if t.cols() != c {
                    return Err(Error::Shape(format!("concat_rows: {} vs {c} columns", t.cols())));
                }
                r += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::new(vec![r, c], data)?
        };
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let r = nodes[parts[0].0].value.rows();
            if parts.iter().any(|p| nodes[p.0].value.rows() != r) {
                return Err(Error::Shape("concat_cols: row counts differ".into()));
            }
            let total: usize = parts.iter().map(|p| nodes[p.0].value.cols()).sum();
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for p in parts {
                    data.extend_from_slice(nodes[p.0].value.row(i));
                }
            }
            Tensor::new(vec![r, total], data)?
        };
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let t = self.value(a);
            if start + len > t.cols() {
                return Err(Error::Shape(format!(
                    "slice_cols {start}+{len} of {} columns",
                    t.cols()
                )));
            }
            Tensor::from_fn(t.rows(), len, |i, j| t.at(i, start + j))
        };
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Magnitude of the per-channel 2-D DFT of an `H × W × C` node.
    pub fn dft2_magnitude(&self, a: Var) -> Result<Var> {
        let out = {
            let t = self.value(a);
            if t.shape().len() != 3 {
                return Err(Error::Shape(format!(
                    "dft2_magnitude expects H x W x C, got {:?}",
                    t.shape()
                )));
            }
            let c = t.shape()[2];
            let mags: Vec<Vec<f64>> = spectra(&t).iter().map(Spectrum::magnitude).collect();
            let mut data = vec![0.0; t.len()];
            for (ch, m) in mags.iter().enumerate() {
                for (k, v) in m.iter().enumerate() {
                    data[k * c + ch] = *v;
                }
            }
            Tensor::new(t.shape().to_vec(), data)?
        };
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Dft2Mag(a), rg))
    }

    /// Reverse-mode gradients of scalar `out` with respect to each of `wrt`.
    pub fn grad(&self, out: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let nodes = self.nodes.borrow();
        let shape = nodes[out.0].value.shape().to_vec();
        if nodes[out.0].value.len() != 1 {
            return Err(Error::NonScalarOutput(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Tensor::full(&shape, 1.0));

        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            let mut acc = |v: Var, t: Tensor| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(e) => e.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.scale(-1.0));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y)?);
                    acc(*b, g.zip_map(val(*a), |x, y| x * y)?);
                }
                Op::AddRow(a, row) => {
                    let c = g.cols();
                    let mut gr = vec![0.0; c];
                    for chunk in g.data().chunks(c) {
                        for (o, v) in gr.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    acc(*row, Tensor::new(val(*row).shape().to_vec(), gr)?);
                    acc(*a, g);
                }
                Op::MulRow(a, row) => {
                    let (ta, tr) = (val(*a), val(*row));
                    let c = g.cols();
                    let mut gr = vec![0.0; c];
                    let mut ga = g.clone();
                    for (i, chunk) in ga.data_mut().chunks_mut(c).enumerate() {
                        for j in 0..c {
                            gr[j] += chunk[j] * ta.at(i, j);
                            chunk[j] *= tr.data()[j];
                        }
                    }
                    acc(*row, Tensor::new(tr.shape().to_vec(), gr)?);
                    acc(*a, ga);
                }
                Op::MulCol(a, col) => {
                    let (ta, tc) = (val(*a), val(*col));
                    let c = g.cols();
                    let mut gc = vec![0.0; tc.len()];
                    let mut ga = g.clone();
                    for (i, chunk) in ga.data_mut().chunks_mut(c).enumerate() {
                        let s = tc.data()[i];
                        for j in 0..c {
                            gc[i] += chunk[j] * ta.at(i, j);
                            chunk[j] *= s;
                        }
                    }
                    acc(*col, Tensor::new(tc.shape().to_vec(), gc)?);
                    acc(*a, ga);
                }
                Op::Scale(a, s) => acc(*a, g.scale(*s)),
                Op::AddScalar(a) => acc(*a, g),
                Op::MatMul(a, b) => {
                    if nodes[a.0].requires_grad {
                        acc(*a, g.matmul_t(false, val(*b), true)?);
                    }
                    if nodes[b.0].requires_grad {
                        acc(*b, val(*a).matmul_t(true, &g, false)?);
                    }
                }
                Op::MatMulNT(a, b) => {
                    // out = a bᵀ ; da = g b ; db = gᵀ a
                    if nodes[a.0].requires_grad {
                        acc(*a, g.matmul(val(*b))?);
                    }
                    if nodes[b.0].requires_grad {
                        acc(*b, g.matmul_t(true, val(*a), false)?);
                    }
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::Exp(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y)?),
                Op::Log(a) => acc(*a, g.zip_map(val(*a), |x, y| x / y)?),
                Op::Sqrt(a) => acc(*a, g.zip_map(&node.value, |x, y| 0.5 * x / y)?),
                Op::Recip(a) => acc(*a, g.zip_map(&node.value, |x, y| -x * y * y)?),
                Op::Abs(a) => acc(*a, g.zip_map(val(*a), |x, y| x * y.signum() * (y != 0.0) as u8 as f64)?),
                Op::Square(a) => acc(*a, g.zip_map(val(*a), |x, y| 2.0 * x * y)?),
                Op::Gelu(a) => acc(*a, g.zip_map(val(*a), |x, y| x * gelu_grad(y))?),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut gx = g.clone();
                    for (gr, yr) in gx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    acc(*a, gx);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut gx = g.clone();
                    for (gr, yr) in gx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                        let s: f64 = gr.iter().sum();
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv -= yv.exp() * s;
                        }
                    }
                    acc(*a, gx);
                }
                Op::LayerNorm(a, eps) => {
                    let (x, y) = (val(*a), &node.value);
                    let c = y.cols();
                    let mut gx = g.clone();
                    for (i, gr) in gx.data_mut().chunks_mut(c).enumerate() {
                        let xr = x.row(i);
                        let yr = y.row(i);
                        let mean = xr.iter().sum::<f64>() / c as f64;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mg = gr.iter().sum::<f64>() / c as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = inv * (*gv - mg - yv * mgy);
                        }
                    }
                    acc(*a, gx);
                }
                Op::SumAll(a) => {
                    let s = g.data()[0];
                    acc(*a, Tensor::full(val(*a).shape(), s));
                }
                Op::SumRows(a) => {
                    let ta = val(*a);
                    let c = ta.cols();
                    let gx = Tensor::from_fn(ta.rows(), c, |_, j| g.data()[j]);
                    acc(*a, gx.reshape(ta.shape())?);
                }
                Op::SumCols(a) => {
                    let ta = val(*a);
                    let gx = Tensor::from_fn(ta.rows(), ta.cols(), |i, _| g.data()[i]);
                    acc(*a, gx.reshape(ta.shape())?);
                }
                Op::Gather(a, index) => {
                    let mut gx = Tensor::zeros(val(*a).shape());
                    let d = gx.data_mut();
                    for (gv, &i) in g.data().iter().zip(index) {
                        d[i] += gv;
                    }
                    acc(*a, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = val(*p).len();
                        let piece = Tensor::new(val(*p).shape().to_vec(), g.data()[off..off + n].to_vec())?;
                        off += n;
                        acc(*p, piece);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let t = val(*p);
                        let w = t.cols();
                        let piece = Tensor::from_fn(t.rows(), w, |i, j| g.at(i, off + j));
                        off += w;
                        acc(*p, piece.reshape(t.shape())?);
                    }
                }
                Op::SliceCols(a, start) => {
                    let ta = val(*a);
                    let w = g.cols();
                    let gx = Tensor::from_fn(ta.rows(), ta.cols(), |i, j| {
                        if j >= *start && j < start + w {
                            g.at(i, j - start)
                        } else {
                            0.0
                        }
                    });
                    acc(*a, gx.reshape(ta.shape())?);
                }
                Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape())?),
                Op::Dft2Mag(a) => {
                    let x = val(*a);
                    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                    let mut gx = Tensor::zeros(x.shape());
                    for (ch, spec) in spectra(x).into_iter().enumerate() {
                        let mut weighted = spec.clone();
                        for k in 0..h * w {
                            let mag = spec.re[k].hypot(spec.im[k]);
                            let gk = g.data()[k * c + ch];
                            let s = if mag > 1e-300 { gk / mag } else { 0.0 };
                            weighted.re[k] = spec.re[k] * s;
                            weighted.im[k] = spec.im[k] * s;
                        }
                        let back = dft2_adjoint_real(&weighted);
                        let d = gx.data_mut();
                        for (k, v) in back.into_iter().enumerate() {
                            d[k * c + ch] = v;
                        }
                    }
                    acc(*a, gx);
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|v| {
                grads
                    .get(v.0)
                    .and_then(Option::clone)
                    .unwrap_or_else(|| Tensor::zeros(nodes[v.0].value.shape()))
            })
            .collect())
    }
}

/// Central finite-difference derivative of `f` with respect to every entry
/// of `x`.
pub fn numerical_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    out
}

/// Relative error used by every gradient check in this crate. Values whose
/// magnitudes are both below `floor` are compared absolutely against it.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
