//! Tape of tensor operations with reverse-mode gradients.
//!
//! Every forward primitive appends one node holding its output value. The
//! primitive set is closed: matrix products, elementwise arithmetic with row
//! broadcasting, GELU, row softmax, row layer-norm, guarded row L2
//! normalisation, concatenation, gathers/slices, transpose and reductions.
//! Attention, MLPs and all pipeline stages are compositions of these.

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::numerics::tensor::{gemm, gemm_view, View};
use crate::numerics::{ParamId, ParamStore, Tensor};

/// Layer-norm variance epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// Keeps the inner tanh for the backward pass.
    Gelu {
        x: Var,
        tanh: Vec<f64>,
    },
    RowSoftmax(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<f64>,
    },
    RowNormalize {
        x: Var,
        norms: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    Transpose(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    /// `xhat` is the standardised input, `rstd` one entry per row.
    LayerNormAffine {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    /// Row-major `heads × s × s` probabilities.
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to any node that required gradients.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Parameter gradients in parameter-id order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.nodes[v.0].as_ref().map(|g| (*id, g)))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_tanh(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    // one exp instead of libm tanh; saturates to ±1 without NaN
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_tanh(x))
}

fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Reference GELU (tanh form) for oracles.
pub fn gelu_scalar(x: f64) -> f64 {
    gelu(x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Free input that receives a gradient (used by tests and grad checks).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf. Repeated requests for the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, p.trainable);
        self.param_vars.insert(id, v);
        v
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn check_matrix(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).rank() != 2 {
            return Err(shape_err!("{what} expects a matrix, got {:?}", self.value(v).shape()));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_matrix(a, "matmul")?;
        self.check_matrix(b, "matmul")?;
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(shape_err!(
                "matmul {:?} x {:?}: inner extents differ",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_matrix(a, "matmul_nt")?;
        self.check_matrix(b, "matmul_nt")?;
        let ((m, k), (n, k2)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(shape_err!(
                "matmul_nt {:?} x {:?}ᵀ: inner extents differ",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNT(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err!(
                "{what} {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn row_broadcast(&self, a: Var, row: Var, what: &str) -> Result<()> {
        let r = self.value(row);
        if r.rank() != 2 || r.rows() != 1 || r.cols() != self.value(a).cols() || self.value(a).rank() != 2 {
            return Err(shape_err!(
                "{what}: cannot broadcast {:?} over {:?}",
                r.shape(),
                self.value(a).shape()
            ));
        }
        Ok(())
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, "add_row")?;
        let mut t = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        let n = r.len();
        for chunk in t.data_mut().chunks_mut(n) {
            for (x, y) in chunk.iter_mut().zip(&r) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    /// Multiplies every row of `a` elementwise by a `1×n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, "mul_row")?;
        let mut t = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        let n = r.len();
        for chunk in t.data_mut().chunks_mut(n) {
            for (x, y) in chunk.iter_mut().zip(&r) {
                *x *= y;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(t, Op::MulRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x *= c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x += c);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        let tanh: Vec<f64> = t.data().iter().map(|&x| gelu_tanh(x)).collect();
        for (x, th) in t.data_mut().iter_mut().zip(&tanh) {
            *x = 0.5 * *x * (1.0 + th);
        }
        let rg = self.rg(a);
        self.push(t, Op::Gelu { x: a, tanh }, rg)
    }

    /// Softmax along each row, with row-max subtraction.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        self.check_matrix(a, "row_softmax")?;
        let mut t = self.value(a).clone();
        let n = t.cols();
        if n > 0 {
            for row in t.data_mut().chunks_mut(n) {
                let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(t, Op::RowSoftmax(a), rg))
    }

    /// Per-row standardisation (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        self.check_matrix(a, "layer_norm")?;
        let mut t = self.value(a).clone();
        let n = t.cols();
        let mut rstd = Vec::with_capacity(t.rows());
        for row in t.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        let rg = self.rg(a);
        Ok(self.push(t, Op::LayerNorm { x: a, rstd }, rg))
    }

    /// `x·w + b` with an optional `1×n` bias row.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check_matrix(x, "affine")?;
        self.check_matrix(w, "affine")?;
        let ((m, k), (k2, n)) = (self.dims(x), self.dims(w));
        if k != k2 {
            return Err(shape_err!(
                "affine {:?} x {:?}: inner extents differ",
                self.value(x).shape(),
                self.value(w).shape()
            ));
        }
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let r = self.value(b);
            if r.rank() != 2 || r.rows() != 1 || r.cols() != n {
                return Err(shape_err!("affine bias {:?} does not match width {n}", r.shape()));
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(r.data());
            }
        }
        gemm(
            m,
            k,
            n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            1.0,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Affine { x, w, b }, rg))
    }

    /// Row layer-norm followed by `gain ⊙ x̂ + bias` (both `1×n`).
    pub fn layer_norm_affine(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.check_matrix(x, "layer_norm_affine")?;
        self.row_broadcast(x, gain, "layer_norm_affine gain")?;
        self.row_broadcast(x, bias, "layer_norm_affine bias")?;
        let t = self.value(x);
        let n = t.cols();
        let mut xhat = t.data().to_vec();
        let mut rstd = Vec::with_capacity(t.rows());
        let mut out = vec![0.0; xhat.len()];
        let (ga, be) = (self.value(gain).data(), self.value(bias).data());
        if n > 0 {
            for (row, o) in xhat.chunks_mut(n).zip(out.chunks_mut(n)) {
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + LN_EPS).sqrt();
                for (((v, o), g), b) in row.iter_mut().zip(o.iter_mut()).zip(ga).zip(be) {
                    *v = (*v - mean) * r;
                    *o = *v * g + b;
                }
                rstd.push(r);
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNormAffine {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over `s×d` projections:
    /// head `h` uses columns `h·d/heads..`; outputs are concatenated in head order.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        for x in [q, k, v] {
            self.check_matrix(x, "attention")?;
        }
        let (s, d) = self.dims(q);
        if self.dims(k) != (s, d) || self.dims(v) != (s, d) {
            return Err(shape_err!(
                "attention projections differ: {:?}, {:?}, {:?}",
                self.value(q).shape(),
                self.value(k).shape(),
                self.value(v).shape()
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err!("width {d} not divisible by {heads} heads"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * s * s];
        let mut out = vec![0.0; s * d];
        let (tq, tk, tv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for h in 0..heads {
            let p = &mut probs[h * s * s..(h + 1) * s * s];
            let (qh, kh) = (View::cols(tq, d, h * dh), View::cols(tk, d, h * dh));
            gemm_view(s, dh, s, qh, kh.t(), p, 0, s, 0.0);
            if s > 0 {
                for row in p.chunks_mut(s) {
                    let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * scale));
                    let mut z = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x * scale - m).exp();
                        z += *x;
                    }
                    row.iter_mut().for_each(|x| *x /= z);
                }
            }
            let pv = View::cols(p, s, 0);
            gemm_view(s, s, dh, pv, View::cols(tv, d, h * dh), &mut out, h * dh, d, 0.0);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::matrix(s, d, out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            },
            rg,
        ))
    }

    /// Head `h` probabilities of an [`Graph::attention`] node.
    pub fn attention_probs(&self, a: Var, h: usize) -> Option<Tensor> {
        match &self.nodes[a.0].op {
            Op::Attention { heads, probs, .. } if h < *heads => {
                let s = self.value(a).rows();
                Tensor::matrix(s, s, probs[h * s * s..(h + 1) * s * s].to_vec()).ok()
            }
            _ => None,
        }
    }

    /// Scales each row to unit L2 norm. Zero rows map to zero; the second
    /// value is the number of such rows.
    pub fn row_normalize(&mut self, a: Var) -> Result<(Var, usize)> {
        self.check_matrix(a, "row_normalize")?;
        let mut t = self.value(a).clone();
        let n = t.cols();
        let mut norms = Vec::with_capacity(t.rows());
        let mut zero = 0;
        for row in t.data_mut().chunks_mut(n.max(1)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            } else {
                zero += 1;
                row.iter_mut().for_each(|v| *v = 0.0);
            }
            norms.push(norm);
        }
        let rg = self.rg(a);
        Ok((self.push(t, Op::RowNormalize { x: a, norms }, rg), zero))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err!("concat_rows of nothing"))?;
        let cols = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            self.check_matrix(p, "concat_rows")?;
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err!(
                    "concat_rows width {:?} vs {:?}",
                    self.value(first).shape(),
                    t.shape()
                ));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(rows, cols, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err!("concat_cols of nothing"))?;
        let rows = self.value(first).rows();
        for &p in parts {
            self.check_matrix(p, "concat_cols")?;
            if self.value(p).rows() != rows {
                return Err(shape_err!(
                    "concat_cols rows {:?} vs {:?}",
                    self.value(first).shape(),
                    self.value(p).shape()
                ));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(rows, cols, data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Rows of `a` at `idx`, in that order (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.check_matrix(a, "gather_rows")?;
        let rows = self.value(a).rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(shape_err!("gather_rows index {bad} out of {rows} rows"));
        }
        let t = self.value(a).select_rows(idx);
        let rg = self.rg(a);
        Ok(self.push(t, Op::GatherRows(a, idx.to_vec()), rg))
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.check_matrix(a, "gather_cols")?;
        let (rows, cols) = self.dims(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(shape_err!("gather_cols index {bad} out of {cols} columns"));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(rows * idx.len());
        for r in 0..rows {
            let row = src.row(r);
            data.extend(idx.iter().map(|&c| row[c]));
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::matrix(rows, idx.len(), data)?,
            Op::GatherCols(a, idx.to_vec()),
            rg,
        ))
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check_matrix(a, "slice_cols")?;
        let (rows, cols) = self.dims(a);
        if start + len > cols {
            return Err(shape_err!("slice_cols {start}+{len} exceeds {cols} columns"));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(rows, len, data)?, Op::SliceCols(a, start, len), rg))
    }

    /// Rows `start..start+len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let rows = self.value(a).rows();
        if start + len > rows {
            return Err(shape_err!("slice_rows {start}+{len} exceeds {rows} rows"));
        }
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &idx)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check_matrix(a, "transpose")?;
        let t = self.value(a).transpose();
        let rg = self.rg(a);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    /// Column-wise mean over rows, giving a `1×n` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.check_matrix(a, "mean_rows")?;
        let t = self.value(a);
        let rows = t.rows() as f64;
        let mut sums = t.column_sums();
        sums.iter_mut().for_each(|v| *v /= rows);
        let rg = self.rg(a);
        Ok(self.push(Tensor::row_vector(&sums), Op::MeanRows(a), rg))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 || lt.rank() > 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![1.0])?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params: Vec<(ParamId, Var)> = self.param_vars.iter().map(|(&k, &v)| (k, v)).collect();
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients { nodes: grads, params })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn accum_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().expect("initialised").data_mut());
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                self.accum_with(grads, *a, |da| gemm(m, n, k, g.data(), false, tb.data(), true, da, 1.0));
                self.accum_with(grads, *b, |db| gemm(k, m, n, ta.data(), true, g.data(), false, db, 1.0));
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                self.accum_with(grads, *a, |da| {
                    gemm(m, n, k, g.data(), false, tb.data(), false, da, 1.0)
                });
                self.accum_with(grads, *b, |db| gemm(n, m, k, g.data(), true, ta.data(), false, db, 1.0));
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum_with(grads, *b, |db| db.iter_mut().zip(g.data()).for_each(|(d, x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accum_with(grads, *a, |da| {
                    for ((d, x), o) in da.iter_mut().zip(g.data()).zip(tb.data()) {
                        *d += x * o;
                    }
                });
                self.accum_with(grads, *b, |db| {
                    for ((d, x), o) in db.iter_mut().zip(g.data()).zip(ta.data()) {
                        *d += x * o;
                    }
                });
            }
            Op::AddRow(a, r) => {
                self.accum(grads, *a, g.clone());
                let n = self.value(*r).cols();
                self.accum_with(grads, *r, |dr| {
                    for chunk in g.data().chunks(n) {
                        dr.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                    }
                });
            }
            Op::MulRow(a, r) => {
                let (ta, tr) = (self.value(*a), self.value(*r));
                let n = tr.cols();
                self.accum_with(grads, *a, |da| {
                    for (dchunk, gchunk) in da.chunks_mut(n).zip(g.data().chunks(n)) {
                        for ((d, x), s) in dchunk.iter_mut().zip(gchunk).zip(tr.data()) {
                            *d += x * s;
                        }
                    }
                });
                self.accum_with(grads, *r, |dr| {
                    for (gchunk, achunk) in g.data().chunks(n).zip(ta.data().chunks(n)) {
                        for ((d, x), v) in dr.iter_mut().zip(gchunk).zip(achunk) {
                            *d += x * v;
                        }
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accum_with(grads, *a, |da| {
                    da.iter_mut().zip(g.data()).for_each(|(d, x)| *d += c * x)
                });
            }
            Op::AddScalar(a) => self.accum(grads, *a, g.clone()),
            Op::Gelu { x, tanh } => {
                let tx = self.value(*x);
                self.accum_with(grads, *x, |dx| {
                    for (((d, gv), v), t) in dx.iter_mut().zip(g.data()).zip(tx.data()).zip(tanh) {
                        *d += gv * gelu_grad(*v, *t);
                    }
                });
            }
            Op::RowSoftmax(a) => {
                let n = y.cols();
                self.accum_with(grads, *a, |da| {
                    for ((dr, gr), yr) in da.chunks_mut(n).zip(g.data().chunks(n)).zip(y.data().chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, s)| x * s).sum();
                        for ((d, x), s) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += s * (x - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, rstd } => {
                let n = y.cols();
                self.accum_with(grads, *x, |dx| {
                    for (((dr, gr), yr), r) in dx
                        .chunks_mut(n)
                        .zip(g.data().chunks(n))
                        .zip(y.data().chunks(n))
                        .zip(rstd)
                    {
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += r * (gv - mg - yv * mgy);
                        }
                    }
                });
            }
            Op::RowNormalize { x, norms } => {
                let n = y.cols();
                self.accum_with(grads, *x, |dx| {
                    for (((dr, gr), yr), norm) in dx
                        .chunks_mut(n)
                        .zip(g.data().chunks(n))
                        .zip(y.data().chunks(n))
                        .zip(norms)
                    {
                        if *norm <= 0.0 {
                            continue;
                        }
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += (gv - yv * dot) / norm;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let slice = &g.data()[offset..offset + len];
                    self.accum_with(grads, p, |dp| dp.iter_mut().zip(slice).for_each(|(d, x)| *d += x));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accum_with(grads, p, |dp| {
                        for (dr, gr) in dp.chunks_mut(w.max(1)).zip(g.data().chunks(total)) {
                            dr.iter_mut().zip(&gr[start..start + w]).for_each(|(d, x)| *d += x);
                        }
                    });
                    start += w;
                }
            }
            Op::GatherRows(a, idx) => {
                let n = y.cols();
                self.accum_with(grads, *a, |da| {
                    for (k, &i) in idx.iter().enumerate() {
                        let src = &g.data()[k * n..(k + 1) * n];
                        da[i * n..(i + 1) * n].iter_mut().zip(src).for_each(|(d, x)| *d += x);
                    }
                });
            }
            Op::GatherCols(a, idx) => {
                let cols = self.value(*a).cols();
                let w = idx.len();
                self.accum_with(grads, *a, |da| {
                    for (dr, gr) in da.chunks_mut(cols).zip(g.data().chunks(w.max(1))) {
                        for (&c, x) in idx.iter().zip(gr) {
                            dr[c] += x;
                        }
                    }
                });
            }
            Op::SliceCols(a, start, len) => {
                let cols = self.value(*a).cols();
                self.accum_with(grads, *a, |da| {
                    for (dr, gr) in da.chunks_mut(cols).zip(g.data().chunks((*len).max(1))) {
                        dr[*start..start + len].iter_mut().zip(gr).for_each(|(d, x)| *d += x);
                    }
                });
            }
            Op::Transpose(a) => self.accum(grads, *a, g.transpose()),
            Op::SumAll(a) => {
                let s = g.item();
                self.accum_with(grads, *a, |da| da.iter_mut().for_each(|d| *d += s));
            }
            Op::MeanAll(a) => {
                let s = g.item() / self.value(*a).len().max(1) as f64;
                self.accum_with(grads, *a, |da| da.iter_mut().for_each(|d| *d += s));
            }
            Op::Affine { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (m, k, n) = (tx.rows(), tx.cols(), tw.cols());
                if self.rg(*x) {
                    let mut dx = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tw.data(), true, &mut dx, 0.0);
                    self.accum(grads, *x, Tensor::matrix(m, k, dx).expect("extents"));
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(k, m, n, tx.data(), true, g.data(), false, &mut dw, 0.0);
                    self.accum(grads, *w, Tensor::matrix(k, n, dw).expect("extents"));
                }
                if let Some(b) = b {
                    self.accum(grads, *b, Tensor::row_vector(&g.column_sums()));
                }
            }
            Op::LayerNormAffine {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = y.cols();
                let ga = self.value(*gain).data();
                if self.rg(*gain) {
                    let mut dg = vec![0.0; n];
                    for (gr, xr) in g.data().chunks(n).zip(xhat.chunks(n)) {
                        dg.iter_mut().zip(gr).zip(xr).for_each(|((d, a), b)| *d += a * b);
                    }
                    self.accum(grads, *gain, Tensor::row_vector(&dg));
                }
                if self.rg(*bias) {
                    self.accum(grads, *bias, Tensor::row_vector(&g.column_sums()));
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let mut gh = vec![0.0; n];
                    for (((dr, gr), xr), r) in dx.chunks_mut(n).zip(g.data().chunks(n)).zip(xhat.chunks(n)).zip(rstd) {
                        gh.iter_mut().zip(gr).zip(ga).for_each(|((o, a), b)| *o = a * b);
                        let mg = gh.iter().sum::<f64>() / n as f64;
                        let mgy = gh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((d, gv), yv) in dr.iter_mut().zip(&gh).zip(xr) {
                            *d = r * (gv - mg - yv * mgy);
                        }
                    }
                    self.accum(grads, *x, Tensor::new(y.shape().to_vec(), dx).expect("extents"));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            } => {
                let (s, d) = (y.rows(), y.cols());
                let dh = d / heads;
                let (tq, tk, tv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let (mut dq, mut dk, mut dv) = (vec![0.0; s * d], vec![0.0; s * d], vec![0.0; s * d]);
                let mut dp = vec![0.0; s * s];
                for h in 0..*heads {
                    let p = &probs[h * s * s..(h + 1) * s * s];
                    let go = View::cols(g.data(), d, h * dh);
                    gemm_view(s, s, dh, View::cols(p, s, 0).t(), go, &mut dv, h * dh, d, 0.0);
                    gemm_view(s, dh, s, go, View::cols(tv, d, h * dh).t(), &mut dp, 0, s, 0.0);
                    if s > 0 {
                        for (dr, pr) in dp.chunks_mut(s).zip(p.chunks(s)) {
                            let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                            for (x, pv) in dr.iter_mut().zip(pr) {
                                *x = pv * (*x - dot) * scale;
                            }
                        }
                    }
                    let ds = View::cols(&dp, s, 0);
                    gemm_view(s, s, dh, ds, View::cols(tk, d, h * dh), &mut dq, h * dh, d, 0.0);
                    gemm_view(s, s, dh, ds.t(), View::cols(tq, d, h * dh), &mut dk, h * dh, d, 0.0);
                }
                for (var, data) in [(*q, dq), (*k, dk), (*v, dv)] {
                    self.accum(grads, var, Tensor::matrix(s, d, data).expect("extents"));
                }
            }
            Op::MeanRows(a) => {
                let ta = self.value(*a);
                let (rows, n) = (ta.rows() as f64, ta.cols());
                self.accum_with(grads, *a, |da| {
                    for dr in da.chunks_mut(n) {
                        dr.iter_mut().zip(g.data()).for_each(|(d, x)| *d += x / rows);
                    }
                });
            }
        }
    }
}
