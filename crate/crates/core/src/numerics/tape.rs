//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape from the loss node towards the leaves and accumulates
//! gradients into the [`ParamStore`] for every parameter leaf it reaches.

use std::collections::HashMap;

use super::param::{ParamId, ParamStore};
use super::tensor::{dot, matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    Gelu(Var),
    Abs(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Tensor,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    RowSums(Var),
    Sum(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    /// Scalar output whose local gradient w.r.t. its input was computed
    /// by the caller.
    ScalarFn(Var, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant, "constant")
    }

    /// Leaf for a parameter. Repeated calls with the same id on one tape
    /// return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.get(id).value.clone(), Op::Param(id), "param")?;
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`, the layout used for `x · Wᵀ` projections.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        self.push(out, Op::MatMulT(a, b), "matmul_t")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), "scale")
    }

    /// Mean of equally shaped nodes.
    pub fn mean_of(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Usage("mean of zero nodes".into()))?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        if vars.len() == 1 {
            return Ok(acc);
        }
        self.scale(acc, 1.0 / vars.len() as f64)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = x.expect_matrix("softmax_rows")?;
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push(Tensor::from_parts(vec![m, n], out), Op::SoftmaxRows(a), "softmax_rows")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), "gelu")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a), "abs")
    }

    /// Row-wise layer normalisation with per-column `gain` and `bias` vectors.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.expect_matrix("layer_norm")?;
        let (g, b) = (self.value(gain), self.value(bias));
        if g.len() != n || b.len() != n {
            return Err(Error::shape(
                "layer_norm",
                format!("{n} columns, gain {:?}, bias {:?}", g.shape(), b.shape()),
            ));
        }
        let mut normed = vec![0.0; m * n];
        let mut out = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                normed[i * n + j] = h;
                out[i * n + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let normed = Tensor::from_parts(vec![m, n], normed);
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            "layer_norm",
        )
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(a).select_rows(idx)?;
        self.push(out, Op::GatherRows(a, idx.to_vec()), "gather_rows")
    }

    /// `[m×n] -> [m]`
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (m, _) = x.expect_matrix("row_sums")?;
        let out = (0..m).map(|i| x.row(i).iter().sum()).collect();
        self.push(Tensor::vector(out), Op::RowSums(a), "row_sums")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = x.expect_matrix("slice_cols")?;
        if start > end || end > n {
            return Err(Error::shape(
                "slice_cols",
                format!("range {start}..{end} of {n} columns"),
            ));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&x.row(i)[start..end]);
        }
        self.push(
            Tensor::from_parts(vec![m, w], out),
            Op::SliceCols(a, start, end),
            "slice_cols",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero nodes".into()))?;
        let m = self.value(*first).expect_matrix("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).expect_matrix("concat_cols")?;
            if pm != m {
                return Err(Error::shape("concat_cols", format!("{pm} vs {m} rows")));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(
            Tensor::from_parts(vec![m, total], out),
            Op::ConcatCols(parts.to_vec()),
            "concat_cols",
        )
    }

    /// Records a scalar function of `input` whose value and gradient the
    /// caller has already evaluated.
    pub fn scalar_fn(&mut self, input: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.value(input).shape() {
            return Err(Error::shape(
                "scalar_fn",
                format!(
                    "gradient {:?} vs input {:?}",
                    grad.shape(),
                    self.value(input).shape()
                ),
            ));
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite("scalar_fn gradient"));
        }
        self.push(Tensor::scalar(value), Op::ScalarFn(input, grad), "scalar_fn")
    }

    /// Accumulates `d loss / d p` into the gradient slot of every parameter
    /// reachable from `loss`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    p.grad.add_assign(&g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = g.row(i);
                        for p in 0..k {
                            da[i * k + p] = dot(grow, bv.row(p));
                        }
                    }
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    let at = av.transpose()?;
                    matmul_into(at.data(), g.data(), &mut db, k, m, n);
                    accumulate(&mut grads, *a, Tensor::from_parts(vec![m, k], da));
                    accumulate(&mut grads, *b, Tensor::from_parts(vec![k, n], db));
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[0];
                    // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                    let mut da = vec![0.0; m * k];
                    matmul_into(g.data(), bv.data(), &mut da, m, n, k);
                    let mut db = vec![0.0; n * k];
                    let gt = g.transpose()?;
                    matmul_into(gt.data(), av.data(), &mut db, n, m, k);
                    accumulate(&mut grads, *a, Tensor::from_parts(vec![m, k], da));
                    accumulate(&mut grads, *b, Tensor::from_parts(vec![n, k], db));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), "mul", |x, y| x * y)?;
                    let db = g.zip_map(self.value(*a), "mul", |x, y| x * y)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|v| v * c));
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let n = y.cols();
                    let mut dx = vec![0.0; y.len()];
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let s = dot(yr, gr);
                        for j in 0..n {
                            dx[i * n + j] = yr[j] * (gr[j] - s);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::from_parts(y.shape().to_vec(), dx));
                }
                Op::Gelu(a) => {
                    let dx = g.zip_map(self.value(*a), "gelu", |gv, x| gv * gelu_grad(x))?;
                    accumulate(&mut grads, *a, dx);
                }
                Op::Abs(a) => {
                    let dx = g.zip_map(self.value(*a), "abs", |gv, x| {
                        if x > 0.0 {
                            gv
                        } else if x < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut grads, *a, dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normed,
                    inv_std,
                } => {
                    let (m, n) = (normed.rows(), normed.cols());
                    let gv = self.value(*gain).data();
                    let mut dgain = vec![0.0; n];
                    let mut dbias = vec![0.0; n];
                    let mut dx = vec![0.0; m * n];
                    let mut dh = vec![0.0; n];
                    for i in 0..m {
                        let (gr, hr) = (g.row(i), normed.row(i));
                        for j in 0..n {
                            dgain[j] += gr[j] * hr[j];
                            dbias[j] += gr[j];
                            dh[j] = gr[j] * gv[j];
                        }
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h = dot(&dh, hr);
                        let scale = inv_std[i] / n as f64;
                        for j in 0..n {
                            dx[i * n + j] =
                                scale * (n as f64 * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    let gshape = self.value(*gain).shape().to_vec();
                    let bshape = self.value(*bias).shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::from_parts(vec![m, n], dx));
                    accumulate(&mut grads, *gain, Tensor::from_parts(gshape, dgain));
                    accumulate(&mut grads, *bias, Tensor::from_parts(bshape, dbias));
                }
                Op::GatherRows(a, idx) => {
                    let src = self.value(*a);
                    let n = src.cols();
                    let mut dx = Tensor::zeros(src.shape());
                    for (r, &i) in idx.iter().enumerate() {
                        let grow = g.row(r);
                        for (d, gv) in dx.data_mut()[i * n..(i + 1) * n].iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::RowSums(a) => {
                    let src = self.value(*a);
                    let n = src.cols();
                    let dx = (0..src.len()).map(|k| g.data()[k / n]).collect();
                    accumulate(&mut grads, *a, Tensor::from_parts(src.shape().to_vec(), dx));
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    accumulate(&mut grads, *a, Tensor::full(self.value(*a).shape(), gv));
                }
                Op::SliceCols(a, start, end) => {
                    let src = self.value(*a);
                    let (m, n) = (src.rows(), src.cols());
                    let mut dx = Tensor::zeros(src.shape());
                    for i in 0..m {
                        dx.data_mut()[i * n + start..i * n + end].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::ConcatCols(parts) => {
                    let m = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut dp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dp.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        accumulate(&mut grads, p, Tensor::from_parts(vec![m, w], dp));
                        offset += w;
                    }
                }
                Op::ScalarFn(a, local) => {
                    let gv = g.item();
                    accumulate(&mut grads, *a, local.map(|v| v * gv));
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Numerically stable in-place softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
