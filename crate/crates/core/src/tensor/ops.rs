use std::rc::Rc;

use super::counter;
use super::kernels::{self, sum_f64};
use super::tape::{Tape, Var};
use super::value::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.9;

/// Backward rule for an op defined outside this module.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// One entry per parent; `None` where `needs[i]` is false.
    fn backward(
        &self,
        grad: &Tensor,
        out: &Tensor,
        inputs: &[Rc<Tensor>],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>>;
}

pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    AddRowBias,
    Scale(f32),
    Exp,
    Sigmoid,
    Silu,
    Gelu,
    Softplus,
    Sum,
    Mean,
    Reshape,
    Transpose,
    MatMul,
    GatherRows(Vec<usize>),
    ScatterRows(Vec<usize>),
    NarrowCols { start: usize },
    Softmax { axis: usize },
    Conv2d { padding: usize },
    BatchNorm {
        mean: Vec<f32>,
        inv_std: Vec<f32>,
        train: bool,
    },
    CausalConv1d,
    CrossEntropy { targets: Vec<usize> },
    ConcatRows { sizes: Vec<usize> },
    Custom(Box<dyn CustomOp>),
}

/// Per-channel statistics of one train-mode batchnorm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Stable ascending argsort; ties keep their original order.
pub fn argsort(values: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    idx
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let rows = shape[0];
    (rows, shape[1..].iter().product())
}

impl Tape {
    pub(crate) fn custom<'t>(
        &'t self,
        value: Tensor,
        parents: &[Var<'t>],
        op: Box<dyn CustomOp>,
    ) -> Var<'t> {
        self.push(value, parents.iter().map(Var::id).collect(), Op::Custom(op))
    }

    /// Concatenates along the first axis; trailing extents must agree.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return Err(Error::Contract("concat_rows of nothing".into()));
        };
        let tail = first.shape()[1..].to_vec();
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            assert!(std::ptr::eq(p.tape(), self), "operand recorded on another tape");
            let v = p.value();
            if v.shape()[1..] != tail[..] {
                return Err(Error::dim("concat_rows", &first.shape(), v.shape()));
            }
            sizes.push(v.shape()[0]);
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![sizes.iter().sum()];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, parts.iter().map(Var::id).collect(), Op::ConcatRows { sizes }))
    }
}

// Fallible by design, so not the std operator traits.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        self.tape().push(value, vec![self.id()], op)
    }

    fn map(self, op: Op, f: impl Fn(f32) -> f32) -> Var<'t> {
        let x = self.value();
        let data = x.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(x.shape(), data).expect("same shape");
        self.unary(out, op)
    }

    fn zip(self, other: Var<'t>, name: &'static str, op: Op, f: impl Fn(f32, f32) -> f32) -> Result<Var<'t>> {
        assert!(self.same_tape(&other), "operands recorded on different tapes");
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::dim(name, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(a.shape(), data)?;
        Ok(self.tape().push(out, vec![self.id(), other.id()], op))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip(other, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip(other, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip(other, "mul", Op::Mul, |x, y| x * y)
    }

    /// Adds a vector along the last axis.
    pub fn add_row_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        let n = *x.shape().last().unwrap();
        if b.numel() != n {
            return Err(Error::dim("add_row_bias", x.shape(), b.shape()));
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b.data()[i % n])
            .collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.tape().push(out, vec![self.id(), bias.id()], Op::AddRowBias))
    }

    pub fn scale(self, factor: f32) -> Var<'t> {
        self.map(Op::Scale(factor), |v| v * factor)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Var<'t> {
        self.map(Op::Exp, f32::exp)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map(Op::Sigmoid, kernels::sigmoid)
    }

    pub fn silu(self) -> Var<'t> {
        self.map(Op::Silu, |v| v * kernels::sigmoid(v))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t> {
        self.map(Op::Gelu, kernels::gelu)
    }

    pub fn softplus(self) -> Var<'t> {
        self.map(Op::Softplus, kernels::softplus)
    }

    pub fn sum(self) -> Var<'t> {
        let s = sum_f64(self.value().data()) as f32;
        self.unary(Tensor::scalar(s), Op::Sum)
    }

    pub fn mean(self) -> Var<'t> {
        let x = self.value();
        let s = sum_f64(x.data()) / x.numel() as f64;
        self.unary(Tensor::scalar(s as f32), Op::Mean)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let out = Tensor::new(shape, x.data().to_vec())
            .map_err(|_| Error::dim("reshape", x.shape(), shape))?;
        Ok(self.unary(out, Op::Reshape))
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(self) -> Result<Var<'t>> {
        let x = self.value();
        let &[r, c] = x.shape() else {
            return Err(Error::dim("transpose", x.shape(), &[0, 0]));
        };
        let out = Tensor::new(&[c, r], kernels::transpose(x.data(), r, c))?;
        Ok(self.unary(out, Op::Transpose))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        assert!(self.same_tape(&other), "operands recorded on different tapes");
        let (a, b) = (self.value(), other.value());
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            return Err(Error::dim("matmul", a.shape(), b.shape()));
        };
        if k != k2 {
            return Err(Error::dim("matmul", a.shape(), b.shape()));
        }
        counter::record((m * k * n) as u64);
        let out = Tensor::new(&[m, n], kernels::matmul(a.data(), b.data(), m, k, n))?;
        Ok(self.tape().push(out, vec![self.id(), other.id()], Op::MatMul))
    }

    /// Selects rows (first-axis slices) in the given order.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, width) = rows_of(x.shape());
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    extent: rows,
                });
            }
            data.extend_from_slice(x.row(i));
        }
        let mut shape = x.shape().to_vec();
        shape[0] = idx.len();
        let out = Tensor::new(&shape, data)?;
        Ok(self.unary(out, Op::GatherRows(idx.to_vec())))
    }

    /// Copy of `self` with rows `idx[j]` replaced by row `j` of `rows`.
    /// Indices must be distinct.
    pub fn scatter_rows(self, idx: &[usize], rows: Var<'t>) -> Result<Var<'t>> {
        assert!(self.same_tape(&rows), "operands recorded on different tapes");
        let (base, src) = (self.value(), rows.value());
        let (n_rows, width) = rows_of(base.shape());
        if src.shape()[0] != idx.len() || src.shape()[1..] != base.shape()[1..] {
            return Err(Error::dim("scatter_rows", base.shape(), src.shape()));
        }
        let mut seen = vec![false; n_rows];
        let mut data = base.data().to_vec();
        for (j, &i) in idx.iter().enumerate() {
            if i >= n_rows {
                return Err(Error::Index {
                    op: "scatter_rows",
                    index: i,
                    extent: n_rows,
                });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Contract(format!("scatter_rows: duplicate index {i}")));
            }
            data[i * width..(i + 1) * width].copy_from_slice(src.row(j));
        }
        let out = Tensor::new(base.shape(), data)?;
        Ok(self
            .tape()
            .push(out, vec![self.id(), rows.id()], Op::ScatterRows(idx.to_vec())))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn narrow_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let &[m, n] = x.shape() else {
            return Err(Error::dim("narrow_cols", x.shape(), &[start, len]));
        };
        if len == 0 || start + len > n {
            return Err(Error::Index {
                op: "narrow_cols",
                index: start + len,
                extent: n,
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&x.data()[i * n + start..i * n + start + len]);
        }
        let out = Tensor::new(&[m, len], data)?;
        Ok(self.unary(out, Op::NarrowCols { start }))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::Index {
                op: "softmax",
                index: axis,
                extent: shape.len(),
            });
        }
        let (outer, len, inner) = axis_split(shape, axis);
        let mut data = x.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| data[at(j)]).fold(f32::NEG_INFINITY, f32::max);
                let mut total = 0.0f64;
                for j in 0..len {
                    let e = (data[at(j)] - max).exp();
                    data[at(j)] = e;
                    total += e as f64;
                }
                for j in 0..len {
                    data[at(j)] = (data[at(j)] as f64 / total) as f32;
                }
            }
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.unary(out, Op::Softmax { axis }))
    }

    /// Zero-padded 2-D cross-correlation. `x: [B, C_in, H, W]`,
    /// `weight: [C_out, C_in, k, k]` with odd `k`, `padding = (k - 1) / 2`.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>, padding: usize) -> Result<Var<'t>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (&[batch, c_in, h, wd], &[c_out, wc_in, k, k2]) = (x.shape(), w.shape()) else {
            return Err(Error::dim("conv2d", x.shape(), w.shape()));
        };
        if c_in != wc_in || k != k2 || b.numel() != c_out {
            return Err(Error::dim("conv2d", x.shape(), w.shape()));
        }
        if k % 2 == 0 || padding != (k - 1) / 2 {
            return Err(Error::Contract(format!(
                "conv2d needs an odd kernel with padding (k-1)/2, got k={k} padding={padding}"
            )));
        }
        let ckk = c_in * k * k;
        let plane = h * wd;
        let mut out = vec![0.0f32; batch * c_out * plane];
        for bi in 0..batch {
            let img = &x.data()[bi * c_in * plane..(bi + 1) * c_in * plane];
            let (cols, _, _) = kernels::im2col(img, c_in, h, wd, k, padding);
            let y = kernels::matmul(w.data(), &cols, c_out, ckk, plane);
            let dst = &mut out[bi * c_out * plane..(bi + 1) * c_out * plane];
            for co in 0..c_out {
                for p in 0..plane {
                    dst[co * plane + p] = y[co * plane + p] + b.data()[co];
                }
            }
        }
        counter::record((batch * c_out * plane * ckk) as u64);
        let out = Tensor::new(&[batch, c_out, h, wd], out)?;
        Ok(self.tape().push(
            out,
            vec![self.id(), weight.id(), bias.id()],
            Op::Conv2d { padding },
        ))
    }

    /// Train-mode batchnorm over `(B, H, W)` for `x: [B, C, H, W]`.
    /// Returns the batch statistics for the caller's running averages.
    pub fn batchnorm_train(self, gamma: Var<'t>, beta: Var<'t>) -> Result<(Var<'t>, BatchStats)> {
        let x = self.value();
        let (batch, c, plane) = bn_dims(&x, &gamma.value(), &beta.value())?;
        let n = batch * plane;
        if n < 2 {
            return Err(Error::DegenerateVariance(n));
        }
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        for ch in 0..c {
            let vals = channel_values(x.data(), batch, c, plane, ch);
            let m = vals.clone().map(|v| v as f64).sum::<f64>() / n as f64;
            let v = vals.map(|v| (v as f64 - m).powi(2)).sum::<f64>() / n as f64;
            mean[ch] = m as f32;
            var[ch] = v as f32;
        }
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let out = bn_apply(self, gamma, beta, mean.clone(), inv_std, true)?;
        Ok((out, BatchStats { mean, var }))
    }

    /// Eval-mode batchnorm with fixed running statistics.
    pub fn batchnorm_eval(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        running_mean: &[f32],
        running_var: &[f32],
    ) -> Result<Var<'t>> {
        let x = self.value();
        let (_, c, _) = bn_dims(&x, &gamma.value(), &beta.value())?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("batchnorm", x.shape(), &[running_mean.len()]));
        }
        let inv_std = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        bn_apply(self, gamma, beta, running_mean.to_vec(), inv_std, false)
    }

    /// Depthwise causal convolution along the sequence axis.
    /// `x: [L, C]`, `weight: [C, width]`, `bias: [C]`;
    /// `y[t, c] = bias[c] + Σ_j weight[c, j] · x[t - width + 1 + j, c]`.
    pub fn causal_conv1d(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (&[len, c], &[wc, width]) = (x.shape(), w.shape()) else {
            return Err(Error::dim("causal_conv1d", x.shape(), w.shape()));
        };
        if wc != c || b.numel() != c {
            return Err(Error::dim("causal_conv1d", x.shape(), w.shape()));
        }
        let mut out = vec![0.0f32; len * c];
        for t in 0..len {
            for ch in 0..c {
                let mut acc = b.data()[ch];
                for j in 0..width {
                    let s = t as isize - (width - 1 - j) as isize;
                    if s >= 0 {
                        acc += w.data()[ch * width + j] * x.data()[s as usize * c + ch];
                    }
                }
                out[t * c + ch] = acc;
            }
        }
        counter::record((len * c * width) as u64);
        let out = Tensor::new(&[len, c], out)?;
        Ok(self
            .tape()
            .push(out, vec![self.id(), weight.id(), bias.id()], Op::CausalConv1d))
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class ids.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let &[batch, k] = x.shape() else {
            return Err(Error::dim("cross_entropy", x.shape(), &[targets.len()]));
        };
        if targets.len() != batch {
            return Err(Error::dim("cross_entropy", x.shape(), &[targets.len()]));
        }
        let mut total = 0.0f64;
        for (b, &t) in targets.iter().enumerate() {
            if t >= k {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: t,
                    extent: k,
                });
            }
            let row = x.row(b);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            total += lse - row[t] as f64;
        }
        let loss = Tensor::scalar((total / batch as f64) as f32);
        Ok(self.unary(
            loss,
            Op::CrossEntropy {
                targets: targets.to_vec(),
            },
        ))
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn bn_dims(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    let &[batch, c, h, w] = x.shape() else {
        return Err(Error::dim("batchnorm", x.shape(), gamma.shape()));
    };
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::dim("batchnorm", x.shape(), gamma.shape()));
    }
    Ok((batch, c, h * w))
}

fn channel_values(
    data: &[f32],
    batch: usize,
    c: usize,
    plane: usize,
    ch: usize,
) -> impl Iterator<Item = f32> + Clone + '_ {
    (0..batch).flat_map(move |b| {
        let start = (b * c + ch) * plane;
        data[start..start + plane].iter().copied()
    })
}

fn bn_apply<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    mean: Vec<f32>,
    inv_std: Vec<f32>,
    train: bool,
) -> Result<Var<'t>> {
    let xv = x.value();
    let (g, b) = (gamma.value(), beta.value());
    let &[_, c, h, w] = xv.shape() else {
        unreachable!()
    };
    let plane = h * w;
    let data = xv
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / plane) % c;
            g.data()[ch] * (v - mean[ch]) * inv_std[ch] + b.data()[ch]
        })
        .collect();
    let out = Tensor::new(xv.shape(), data)?;
    Ok(x.tape().push(
        out,
        vec![x.id(), gamma.id(), beta.id()],
        Op::BatchNorm {
            mean,
            inv_std,
            train,
        },
    ))
}

impl Op {
    pub(crate) fn backward(
        &self,
        grad: &Tensor,
        out: &Tensor,
        inputs: &[Rc<Tensor>],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        let g = grad.data();
        let elementwise = |f: &dyn Fn(usize) -> f32| -> Vec<Option<Vec<f32>>> {
            vec![Some((0..g.len()).map(|i| g[i] * f(i)).collect())]
        };
        match self {
            Op::Leaf => Vec::new(),
            Op::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
            Op::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
            Op::Mul => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                vec![
                    needs[0].then(|| g.iter().zip(b).map(|(g, b)| g * b).collect()),
                    needs[1].then(|| g.iter().zip(a).map(|(g, a)| g * a).collect()),
                ]
            }
            Op::AddRowBias => {
                let n = inputs[1].numel();
                let db = needs[1].then(|| {
                    let mut acc = vec![0.0f64; n];
                    g.iter().enumerate().for_each(|(i, &v)| acc[i % n] += v as f64);
                    acc.into_iter().map(|v| v as f32).collect()
                });
                vec![Some(g.to_vec()), db]
            }
            Op::Scale(f) => vec![Some(g.iter().map(|v| v * f).collect())],
            Op::Exp => elementwise(&|i| out.data()[i]),
            Op::Sigmoid => elementwise(&|i| {
                let s = out.data()[i];
                s * (1.0 - s)
            }),
            Op::Silu => elementwise(&|i| {
                let x = inputs[0].data()[i];
                let s = kernels::sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }),
            Op::Gelu => elementwise(&|i| kernels::gelu_grad(inputs[0].data()[i])),
            Op::Softplus => elementwise(&|i| kernels::sigmoid(inputs[0].data()[i])),
            Op::Sum => vec![Some(vec![g[0]; inputs[0].numel()])],
            Op::Mean => {
                let n = inputs[0].numel();
                vec![Some(vec![g[0] / n as f32; n])]
            }
            Op::Reshape => vec![Some(g.to_vec())],
            Op::Transpose => {
                let s = out.shape();
                vec![Some(kernels::transpose(g, s[0], s[1]))]
            }
            Op::MatMul => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let da = needs[0].then(|| {
                    let bt = kernels::transpose(b.data(), k, n);
                    kernels::matmul(g, &bt, m, n, k)
                });
                let db = needs[1].then(|| {
                    let at = kernels::transpose(a.data(), m, k);
                    kernels::matmul(&at, g, k, m, n)
                });
                vec![da, db]
            }
            Op::GatherRows(idx) => {
                let x = &inputs[0];
                let width = x.numel() / x.shape()[0];
                let mut dx = vec![0.0f32; x.numel()];
                for (j, &i) in idx.iter().enumerate() {
                    dx[i * width..(i + 1) * width]
                        .iter_mut()
                        .zip(&g[j * width..(j + 1) * width])
                        .for_each(|(d, v)| *d += v);
                }
                vec![Some(dx)]
            }
            Op::ScatterRows(idx) => {
                let width = inputs[0].numel() / inputs[0].shape()[0];
                let dbase = needs[0].then(|| {
                    let mut d = g.to_vec();
                    for &i in idx {
                        d[i * width..(i + 1) * width].iter_mut().for_each(|v| *v = 0.0);
                    }
                    d
                });
                let drows = needs[1].then(|| {
                    idx.iter()
                        .flat_map(|&i| g[i * width..(i + 1) * width].iter().copied())
                        .collect()
                });
                vec![dbase, drows]
            }
            Op::NarrowCols { start } => {
                let (m, n) = (inputs[0].shape()[0], inputs[0].shape()[1]);
                let len = out.shape()[1];
                let mut dx = vec![0.0f32; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                vec![Some(dx)]
            }
            Op::Softmax { axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut dx = vec![0.0f32; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| (g[at(j)] * y[at(j)]) as f64).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot as f32);
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::Conv2d { padding } => conv2d_backward(g, inputs, needs, *padding),
            Op::BatchNorm {
                mean,
                inv_std,
                train,
            } => bn_backward(g, inputs, needs, mean, inv_std, *train),
            Op::CausalConv1d => {
                let (x, w) = (&inputs[0], &inputs[1]);
                let (len, c) = (x.shape()[0], x.shape()[1]);
                let width = w.shape()[1];
                let mut dx = vec![0.0f32; len * c];
                let mut dw = vec![0.0f32; c * width];
                let mut db = vec![0.0f32; c];
                for t in 0..len {
                    for ch in 0..c {
                        let gv = g[t * c + ch];
                        db[ch] += gv;
                        for j in 0..width {
                            let s = t as isize - (width - 1 - j) as isize;
                            if s >= 0 {
                                let s = s as usize;
                                dx[s * c + ch] += gv * w.data()[ch * width + j];
                                dw[ch * width + j] += gv * x.data()[s * c + ch];
                            }
                        }
                    }
                }
                vec![Some(dx), Some(dw), Some(db)]
            }
            Op::CrossEntropy { targets } => {
                let x = &inputs[0];
                let (batch, k) = (x.shape()[0], x.shape()[1]);
                let mut dx = vec![0.0f32; batch * k];
                for (b, &t) in targets.iter().enumerate() {
                    let row = x.row(b);
                    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
                    let total: f64 = exps.iter().sum();
                    for j in 0..k {
                        let p = exps[j] / total - if j == t { 1.0 } else { 0.0 };
                        dx[b * k + j] = (p / batch as f64) as f32 * g[0];
                    }
                }
                vec![Some(dx)]
            }
            Op::ConcatRows { sizes } => {
                let width = out.numel() / out.shape()[0];
                let mut offset = 0;
                sizes
                    .iter()
                    .map(|&rows| {
                        let part = g[offset * width..(offset + rows) * width].to_vec();
                        offset += rows;
                        Some(part)
                    })
                    .collect()
            }
            Op::Custom(op) => op.backward(grad, out, inputs, needs),
        }
    }
}

fn conv2d_backward(
    g: &[f32],
    inputs: &[Rc<Tensor>],
    needs: &[bool],
    padding: usize,
) -> Vec<Option<Vec<f32>>> {
    let (x, w) = (&inputs[0], &inputs[1]);
    let &[batch, c_in, h, wd] = x.shape() else {
        unreachable!()
    };
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let ckk = c_in * k * k;
    let plane = h * wd;
    let wt = kernels::transpose(w.data(), c_out, ckk);
    let mut dx = needs[0].then(|| vec![0.0f32; x.numel()]);
    let mut dw = needs[1].then(|| vec![0.0f32; w.numel()]);
    for bi in 0..batch {
        let gb = &g[bi * c_out * plane..(bi + 1) * c_out * plane];
        if let Some(dw) = dw.as_mut() {
            let img = &x.data()[bi * c_in * plane..(bi + 1) * c_in * plane];
            let (cols, _, _) = kernels::im2col(img, c_in, h, wd, k, padding);
            let cols_t = kernels::transpose(&cols, ckk, plane);
            let part = kernels::matmul(gb, &cols_t, c_out, plane, ckk);
            dw.iter_mut().zip(&part).for_each(|(d, p)| *d += p);
        }
        if let Some(dx) = dx.as_mut() {
            let dcols = kernels::matmul(&wt, gb, ckk, c_out, plane);
            let dst = &mut dx[bi * c_in * plane..(bi + 1) * c_in * plane];
            kernels::col2im_add(&dcols, dst, c_in, h, wd, k, padding, h, wd);
        }
    }
    let db = needs[2].then(|| {
        (0..c_out)
            .map(|co| {
                (0..batch)
                    .map(|bi| sum_f64(&g[(bi * c_out + co) * plane..(bi * c_out + co + 1) * plane]))
                    .sum::<f64>() as f32
            })
            .collect()
    });
    vec![dx, dw, db]
}

fn bn_backward(
    g: &[f32],
    inputs: &[Rc<Tensor>],
    needs: &[bool],
    mean: &[f32],
    inv_std: &[f32],
    train: bool,
) -> Vec<Option<Vec<f32>>> {
    let (x, gamma) = (&inputs[0], &inputs[1]);
    let &[batch, c, h, w] = x.shape() else {
        unreachable!()
    };
    let plane = h * w;
    let n = (batch * plane) as f64;
    let mut dx = vec![0.0f32; x.numel()];
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for ch in 0..c {
        let (m, s, gm) = (mean[ch], inv_std[ch], gamma.data()[ch]);
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for b in 0..batch {
            let base = (b * c + ch) * plane;
            for p in base..base + plane {
                let xhat = (x.data()[p] - m) * s;
                sum_g += g[p] as f64;
                sum_gx += (g[p] * xhat) as f64;
            }
        }
        dgamma[ch] = sum_gx as f32;
        dbeta[ch] = sum_g as f32;
        for b in 0..batch {
            let base = (b * c + ch) * plane;
            for p in base..base + plane {
                dx[p] = if train {
                    let xhat = ((x.data()[p] - m) * s) as f64;
                    (gm as f64 * s as f64 / n * (n * g[p] as f64 - sum_g - xhat * sum_gx)) as f32
                } else {
                    gm * s * g[p]
                };
            }
        }
    }
    vec![needs[0].then_some(dx), Some(dgamma), Some(dbeta)]
}
