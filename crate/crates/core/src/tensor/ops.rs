//! Forward ops recorded on the tape, and their backward rules.

use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::tape::{accumulate, Node, Tape, Var};
use super::{numel, strides, Precision, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Exact form `x·Φ(x)`.
    Gelu,
    Sigmoid,
}

/// Batch statistics produced by a train-mode batch norm: per-channel mean and
/// unbiased variance, for the running-average update.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a> {
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

pub(crate) enum Op {
    Leaf,
    /// Record whose inputs need no gradient; nothing to propagate.
    Detached,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Act(Var, Activation),
    AddBroadcast(Var, Var),
    Matmul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Gather { x: Var, maps: Vec<Vec<usize>> },
    IndexSelect { table: Var, indices: Arc<Vec<usize>> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax { x: Var, axis: usize },
    Upsample { x: Var, scale: usize },
    Sum(Var),
    Bce { pred: Var, target: Arc<Vec<f64>>, weight: Option<Arc<Vec<f64>>>, count: f64 },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Detached => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddBroadcast(a, b) | Matmul(a, b) => vec![*a, *b],
            Scale(x, _) | AddScalar(x) | Abs(x) | Act(x, _) | Reshape(x) | Permute(x, _) | Sum(x) => vec![*x],
            Concat(xs, _) => xs.clone(),
            Slice { x, .. } | Gather { x, .. } | MaxPool { x, .. } | Softmax { x, .. } | Upsample { x, .. } => {
                vec![*x]
            }
            IndexSelect { table, .. } => vec![*table],
            Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            BatchNorm { x, gamma, beta, .. } | LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Bce { pred, .. } => vec![*pred],
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => gelu(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }
}

pub(crate) const BCE_CLAMP: f64 = 1e-7;

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Precision> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        same_precision(op, ta, tb)
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let p = self.same_shape(op_name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_raw(ta.shape().to_vec(), data, p);
        self.push(op_name, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push("scale", out, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        self.push("add_scalar", out, Op::AddScalar(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::abs);
        self.push("abs", out, Op::Abs(x))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let out = self.value(x).map(|v| kind.apply(v));
        let name = match kind {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Sigmoid => "sigmoid",
        };
        self.push(name, out, Op::Act(x, kind))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    /// `x + y` where `y`'s shape broadcasts onto `x`'s under right-aligned
    /// rules (each axis of `y` equal to `x`'s or 1). The output has `x`'s
    /// shape. This is the only broadcasting op; every other binary op demands
    /// equal shapes.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        let p = same_precision("add_broadcast", tx, ty)?;
        let walk = kernels::broadcast_walk(tx.shape(), ty.shape()).ok_or_else(|| {
            Error::shape("add_broadcast", format!("{:?} does not broadcast onto {:?}", ty.shape(), tx.shape()))
        })?;
        let yd = ty.data();
        let mut data = tx.to_vec();
        let mut i = 0;
        kernels::strided_walk(tx.shape(), &walk, |off| {
            data[i] += yd[off];
            i += 1;
        });
        let out = Tensor::from_raw(tx.shape().to_vec(), data, p);
        self.push("add_broadcast", out, Op::AddBroadcast(x, y))
    }

    /// Batched matrix product `[.., m, k] · [.., k, n]`; batch axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let p = same_precision("matmul", ta, tb)?;
        let plan = MatmulPlan::new(ta.shape(), tb.shape())?;
        let mut out = vec![0.0; plan.batch_count * plan.m * plan.n];
        let (ad, bd) = (ta.data(), tb.data());
        for (bi, (&ao, &bo)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
            kernels::gemm(
                plan.m,
                plan.k,
                plan.n,
                &ad[ao..ao + plan.m * plan.k],
                false,
                &bd[bo..bo + plan.k * plan.n],
                false,
                0.0,
                &mut out[bi * plan.m * plan.n..(bi + 1) * plan.m * plan.n],
            );
        }
        let out = Tensor::from_raw(plan.out_shape.clone(), out, p);
        self.push("matmul", out, Op::Matmul(a, b))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, order: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let rank = tx.rank();
        let mut seen = vec![false; rank];
        if order.len() != rank || order.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid("permute", format!("{order:?} is not a permutation of rank {rank}")));
        }
        let data = kernels::permute(tx.data(), tx.shape(), order);
        let shape = order.iter().map(|&a| tx.shape()[a]).collect();
        let out = Tensor::from_raw(shape, data, tx.precision());
        self.push("permute", out, Op::Permute(x, order.to_vec()))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let t0 = self.value(*first);
        let rank = t0.rank();
        if axis >= rank {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for rank {rank}")));
        }
        let mut shape = t0.shape().to_vec();
        shape[axis] = 0;
        for &v in xs {
            let t = self.value(v);
            same_precision("concat", t0, t)?;
            let ok = t.rank() == rank && (0..rank).all(|d| d == axis || t.shape()[d] == t0.shape()[d]);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} differ off axis {axis}", t0.shape(), t.shape()),
                ));
            }
            shape[axis] += t.shape()[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let out = Tensor::from_raw(shape, data, t0.precision());
        self.push("concat", out, Op::Concat(xs.to_vec(), axis))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() || len == 0 || start + len > tx.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, tx.shape()),
            ));
        }
        let mut shape = tx.shape().to_vec();
        let full = shape[axis];
        shape[axis] = len;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let out = Tensor::from_raw(shape, data, tx.precision());
        self.push("slice", out, Op::Slice { x, axis, start })
    }

    /// Splits `x` along `axis` into consecutive parts of the given extents.
    pub fn split(&mut self, x: Var, parts: &[usize], axis: usize) -> Result<Vec<Var>> {
        let extent = self
            .shape(x)
            .get(axis)
            .copied()
            .ok_or_else(|| Error::invalid("split", format!("axis {axis} out of range")))?;
        if parts.iter().sum::<usize>() != extent {
            return Err(Error::shape("split", format!("parts {parts:?} do not sum to extent {extent}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(parts.len());
        for &len in parts {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Output index `i` along axis `d` reads input index `maps[d][i]`.
    pub(crate) fn gather_axes(&mut self, op_name: &'static str, x: Var, maps: Vec<Vec<usize>>) -> Result<Var> {
        let tx = self.value(x);
        if maps.len() != tx.rank() {
            return Err(Error::invalid(op_name, "one index map per axis required"));
        }
        for (d, m) in maps.iter().enumerate() {
            if m.is_empty() || m.iter().any(|&i| i >= tx.shape()[d]) {
                return Err(Error::invalid(op_name, format!("index map for axis {d} out of range")));
            }
        }
        let shape: Vec<usize> = maps.iter().map(Vec::len).collect();
        let src_strides = strides(tx.shape());
        let src = tx.data();
        let mut data = Vec::with_capacity(numel(&shape));
        for_each_gathered(&shape, &maps, &src_strides, |off| data.push(src[off]));
        let out = Tensor::from_raw(shape, data, tx.precision());
        self.push(op_name, out, Op::Gather { x, maps })
    }

    /// Cyclic roll: element at index `i` of axis `d` moves to `(i + shifts[d]) mod n`.
    pub fn roll(&mut self, x: Var, shifts: &[isize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shifts.len() != shape.len() {
            return Err(Error::invalid("roll", "one shift per axis required"));
        }
        let maps = shape
            .iter()
            .zip(shifts)
            .map(|(&n, &s)| {
                (0..n)
                    .map(|i| (i as isize - s).rem_euclid(n as isize) as usize)
                    .collect()
            })
            .collect();
        self.gather_axes("roll", x, maps)
    }

    /// Rows of `table` (`[R, ..]`) picked by `indices`; output `[len, ..]`.
    pub fn index_select(&mut self, table: Var, indices: Arc<Vec<usize>>) -> Result<Var> {
        let tt = self.value(table);
        let rows = tt.shape()[0];
        if indices.is_empty() || indices.iter().any(|&i| i >= rows) {
            return Err(Error::invalid("index_select", format!("indices out of range for {rows} rows")));
        }
        let row_len = tt.len() / rows;
        let mut data = Vec::with_capacity(indices.len() * row_len);
        for &i in indices.iter() {
            data.extend_from_slice(&tt.data()[i * row_len..(i + 1) * row_len]);
        }
        let mut shape = tt.shape().to_vec();
        shape[0] = indices.len();
        let out = Tensor::from_raw(shape, data, tt.precision());
        self.push("index_select", out, Op::IndexSelect { table, indices })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv2d_grouped(x, w, b, stride, pad, 1)
    }

    /// Grouped 2-D convolution with zero padding. `w` is `[Cout, Cin/groups, kh, kw]`.
    pub fn conv2d_grouped(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let p = same_precision("conv2d", tx, tw)?;
        let geom = conv_geom(tx.shape(), tw.shape(), stride, pad, groups)?;
        if let Some(b) = b {
            let tb = self.value(b);
            same_precision("conv2d", tx, tb)?;
            if tb.shape() != [geom.cout] {
                return Err(Error::shape("conv2d", format!("bias {:?} for Cout={}", tb.shape(), geom.cout)));
            }
        }
        let out = conv_forward(tx.data(), tw.data(), b.map(|b| self.value(b).data()), &geom);
        let out = Tensor::from_raw(vec![geom.n, geom.cout, geom.ho, geom.wo], out, p);
        self.push("conv2d", out, Op::Conv2d { x, w, b, geom })
    }

    /// Max pool without padding over `[N, C, H, W]`. Ties route the gradient
    /// to the first element in scan order.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        if k < 1 || stride < 1 {
            return Err(Error::invalid("max_pool2d", "kernel and stride must be >= 1"));
        }
        let tx = self.value(x);
        let [n, c, h, w] = dims4("max_pool2d", tx.shape())?;
        if k > h || k > w {
            return Err(Error::shape("max_pool2d", format!("kernel {k} exceeds {h}x{w}")));
        }
        let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let src = tx.data();
        let mut data = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    data.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::from_raw(vec![n, c, ho, wo], data, tx.precision());
        self.push("max_pool2d", out, Op::MaxPool { x, argmax })
    }

    /// Batch norm over `[N, C, H, W]`. Train mode normalises with the biased
    /// batch variance and also returns the batch statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchNormStats>)> {
        if !(eps > 0.0) {
            return Err(Error::invalid("batch_norm", "eps must be > 0"));
        }
        let tx = self.value(x);
        let [n, c, h, w] = dims4("batch_norm", tx.shape())?;
        check_affine(self, "batch_norm", x, gamma, beta, c)?;
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let hw = h * w;
        let count = (n * hw) as f64;
        let src = tx.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let mut unbiased = None;
        match mode {
            NormMode::Train => {
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += src[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let m = s / count;
                    let mut ss = 0.0;
                    for b in 0..n {
                        ss += src[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = ss / count;
                }
                let corr = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                unbiased = Some(BatchNormStats {
                    mean: mean.clone(),
                    var: var.iter().map(|v| v * corr).collect(),
                });
            }
            NormMode::Eval { mean: rm, var: rv } => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::shape("batch_norm", format!("running stats length != {c}")));
                }
                mean.copy_from_slice(rm);
                var.copy_from_slice(rv);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            for ch in 0..c {
                let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for i in range {
                    let xh = (src[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let out = Tensor::from_raw(tx.shape().to_vec(), out, tx.precision());
        let train = matches!(mode, NormMode::Train);
        let v = self.push(
            "batch_norm",
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        )?;
        Ok((v, unbiased))
    }

    /// Layer norm over the trailing axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::invalid("layer_norm", "eps must be > 0"));
        }
        let tx = self.value(x);
        let d = *tx
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input has no feature axis"))?;
        check_affine(self, "layer_norm", x, gamma, beta, d)?;
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let src = tx.data();
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let m = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - m) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + bt[j];
            }
        }
        let out = Tensor::from_raw(tx.shape().to_vec(), out, tx.precision());
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range")));
        }
        let (outer, len, inner) = axis_split(tx.shape(), axis);
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let out = Tensor::from_raw(tx.shape().to_vec(), out, tx.precision());
        self.push("softmax", out, Op::Softmax { x, axis })
    }

    /// Bilinear upsampling of `[N, C, H, W]` by an integer factor, half-pixel
    /// centres (align-corners off), edge-clamped.
    pub fn upsample_bilinear(&mut self, x: Var, scale: usize) -> Result<Var> {
        if scale < 1 {
            return Err(Error::invalid("upsample_bilinear", "scale must be >= 1"));
        }
        let tx = self.value(x);
        let [n, c, h, w] = dims4("upsample_bilinear", tx.shape())?;
        let (ty, tx_taps) = (kernels::bilinear_taps(h, scale), kernels::bilinear_taps(w, scale));
        let (ho, wo) = (h * scale, w * scale);
        let src = tx.data();
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx_taps.iter().enumerate() {
                    let top = s[y0 * w + x0] * (1.0 - fx) + s[y0 * w + x1] * fx;
                    let bot = s[y1 * w + x0] * (1.0 - fx) + s[y1 * w + x1] * fx;
                    d[oy * wo + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let out = Tensor::from_raw(vec![n, c, ho, wo], out, tx.precision());
        self.push("upsample_bilinear", out, Op::Upsample { x, scale })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let out = Tensor::scalar(tx.data().iter().sum(), tx.precision());
        self.push("sum", out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean binary cross-entropy of probabilities `pred` against binary
    /// `target`; predictions are clamped to `[1e-7, 1 - 1e-7]` before the logs.
    /// With `weight`, only pixels of non-zero weight count (weighted mean).
    pub fn bce_loss(&mut self, pred: Var, target: &Tensor, weight: Option<&Tensor>) -> Result<Var> {
        let tp = self.value(pred);
        if tp.shape() != target.shape() {
            return Err(Error::shape("bce_loss", format!("pred {:?} vs target {:?}", tp.shape(), target.shape())));
        }
        if target.data().iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::invalid("bce_loss", "targets must be 0 or 1"));
        }
        if let Some(w) = weight {
            if w.shape() != target.shape() {
                return Err(Error::shape("bce_loss", "weight shape differs from target"));
            }
        }
        let wd = weight.map(|w| w.data());
        let count = wd.map_or(tp.len() as f64, |w| w.iter().sum());
        if !(count > 0.0) {
            return Err(Error::invalid("bce_loss", "no pixels carry weight"));
        }
        let mut total = 0.0;
        for (i, (&p, &y)) in tp.data().iter().zip(target.data()).enumerate() {
            let wi = wd.map_or(1.0, |w| w[i]);
            if wi == 0.0 {
                continue;
            }
            let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= wi * (y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
        }
        let out = Tensor::scalar(total / count, tp.precision());
        let op = Op::Bce {
            pred,
            target: Arc::new(target.to_vec()),
            weight: weight.map(|w| Arc::new(w.to_vec())),
            count,
        };
        self.push("bce_loss", out, op)
    }
}

fn same_precision(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Precision> {
    if a.precision() != b.precision() {
        return Err(Error::Precision {
            op,
            left: a.precision(),
            right: b.precision(),
        });
    }
    Ok(a.precision())
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(shape).map_err(|_| Error::shape(op, format!("expected [N, C, H, W], got {shape:?}")))
}

fn check_affine(tape: &Tape, op: &'static str, x: Var, gamma: Var, beta: Var, c: usize) -> Result<()> {
    let tx = tape.value(x);
    for v in [gamma, beta] {
        let t = tape.value(v);
        same_precision(op, tx, t)?;
        if t.shape() != [c] {
            return Err(Error::shape(op, format!("affine parameter {:?} for {c} features", t.shape())));
        }
    }
    Ok(())
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn for_each_gathered(shape: &[usize], maps: &[Vec<usize>], src_strides: &[usize], mut f: impl FnMut(usize)) {
    let rank = shape.len();
    let total = numel(shape);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let off: usize = (0..rank).map(|d| maps[d][idx[d]] * src_strides[d]).sum();
        f(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub(crate) fn conv_geom(xs: &[usize], ws: &[usize], stride: usize, pad: usize, groups: usize) -> Result<ConvGeom> {
    let [n, cin, h, w] = dims4("conv2d", xs)?;
    let [cout, cin_g, kh, kw] = <[usize; 4]>::try_from(ws)
        .map_err(|_| Error::shape("conv2d", format!("weight must be [Cout, Cin/g, kh, kw], got {ws:?}")))?;
    if stride < 1 || groups < 1 {
        return Err(Error::invalid("conv2d", "stride and groups must be >= 1"));
    }
    if cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
        return Err(Error::shape(
            "conv2d",
            format!("input channels {cin} (groups {groups}) do not match weight Cin/g = {cin_g}, Cout = {cout}"),
        ));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
        ));
    }
    Ok(ConvGeom {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        stride,
        pad,
        groups,
        ho: (h + 2 * pad - kh) / stride + 1,
        wo: (w + 2 * pad - kw) / stride + 1,
    })
}

pub(crate) fn conv_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let hw_out = g.ho * g.wo;
    let rows = g.col_rows();
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let mut out = vec![0.0; g.n * g.cout * hw_out];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * hw_out] };
    for b_i in 0..g.n {
        for grp in 0..g.groups {
            let x_off = (b_i * g.cin + grp * cin_g) * g.h * g.w;
            let x_img = &x[x_off..x_off + cin_g * g.h * g.w];
            let colref: &[f64] = if g.is_pointwise() {
                x_img
            } else {
                kernels::im2col(x_img, g, &mut col);
                &col
            };
            let o_off = (b_i * g.cout + grp * cout_g) * hw_out;
            let w_off = grp * cout_g * rows;
            kernels::gemm(
                cout_g,
                rows,
                hw_out,
                &w[w_off..w_off + cout_g * rows],
                false,
                colref,
                false,
                0.0,
                &mut out[o_off..o_off + cout_g * hw_out],
            );
        }
        if let Some(bias) = b {
            for (co, &bv) in bias.iter().enumerate().take(g.cout) {
                let o = (b_i * g.cout + co) * hw_out;
                for v in &mut out[o..o + hw_out] {
                    *v += bv;
                }
            }
        }
    }
    out
}

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    batch_count: usize,
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
    out_shape: Vec<usize>,
}

impl MatmulPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", format!("operands need rank >= 2: {a:?}, {b:?}")));
        }
        let (ba, ma) = a.split_at(a.len() - 2);
        let (bb, mb) = b.split_at(b.len() - 2);
        let (m, k, k2, n) = (ma[0], ma[1], mb[0], mb[1]);
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims differ: {a:?} · {b:?}")));
        }
        let rank = ba.len().max(bb.len());
        let mut batch = vec![0; rank];
        for i in 0..rank {
            let da = if i + ba.len() >= rank { ba[i + ba.len() - rank] } else { 1 };
            let db = if i + bb.len() >= rank { bb[i + bb.len() - rank] } else { 1 };
            batch[i] = match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return Err(Error::shape("matmul", format!("batch dims do not broadcast: {a:?} · {b:?}"))),
            };
        }
        let offsets = |small: &[usize], mat: usize| {
            let walk = kernels::broadcast_walk(&batch, small).expect("checked above");
            let mut v = Vec::new();
            kernels::strided_walk(&batch, &walk, |o| v.push(o * mat));
            v
        };
        let a_offsets = offsets(ba, m * k);
        let b_offsets = offsets(bb, k * n);
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        Ok(MatmulPlan {
            m,
            k,
            n,
            batch_count: a_offsets.len(),
            a_offsets,
            b_offsets,
            out_shape,
        })
    }
}

/// Propagates `g` (gradient of node `i`) into its inputs.
pub(crate) fn backward(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let val = |v: Var| &nodes[v.0].value;
    let out = &nodes[i].value;
    let needs = |v: Var| nodes[v.0].requires_grad;
    let mut acc = |v: Var, d: Vec<f64>| accumulate(nodes, grads, v, d);
    match &nodes[i].op {
        Op::Leaf | Op::Detached => {}
        Op::Add(a, b) => {
            acc(*a, g.to_vec());
            acc(*b, g.to_vec());
        }
        Op::Sub(a, b) => {
            acc(*a, g.to_vec());
            acc(*b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a).data(), val(*b).data());
            if needs(*a) {
                acc(*a, g.iter().zip(tb).map(|(g, y)| g * y).collect());
            }
            if needs(*b) {
                acc(*b, g.iter().zip(ta).map(|(g, x)| g * x).collect());
            }
        }
        Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
        Op::AddScalar(x) | Op::Reshape(x) => acc(*x, g.to_vec()),
        Op::Abs(x) => {
            let d = g
                .iter()
                .zip(val(*x).data())
                .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -g } else { 0.0 })
                .collect();
            acc(*x, d);
        }
        Op::Act(x, kind) => {
            let xs = val(*x).data();
            let ys = out.data();
            let d = match kind {
                Activation::Relu => g.iter().zip(xs).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                Activation::Gelu => g.iter().zip(xs).map(|(g, &x)| g * gelu_grad(x)).collect(),
                Activation::Sigmoid => g.iter().zip(ys).map(|(g, &y)| g * y * (1.0 - y)).collect(),
            };
            acc(*x, d);
        }
        Op::AddBroadcast(x, y) => {
            acc(*x, g.to_vec());
            if needs(*y) {
                let ty = val(*y);
                let walk = kernels::broadcast_walk(out.shape(), ty.shape()).expect("checked in forward");
                let mut gy = vec![0.0; ty.len()];
                let mut k = 0;
                kernels::strided_walk(out.shape(), &walk, |off| {
                    gy[off] += g[k];
                    k += 1;
                });
                acc(*y, gy);
            }
        }
        Op::Matmul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let plan = MatmulPlan::new(ta.shape(), tb.shape())?;
            let (m, k, n) = (plan.m, plan.k, plan.n);
            if needs(*a) {
                let mut ga = vec![0.0; ta.len()];
                for (bi, (&ao, &bo)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
                    kernels::gemm(
                        m,
                        n,
                        k,
                        &g[bi * m * n..(bi + 1) * m * n],
                        false,
                        &tb.data()[bo..bo + k * n],
                        true,
                        1.0,
                        &mut ga[ao..ao + m * k],
                    );
                }
                acc(*a, ga);
            }
            if needs(*b) {
                let mut gb = vec![0.0; tb.len()];
                for (bi, (&ao, &bo)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
                    kernels::gemm(
                        k,
                        m,
                        n,
                        &ta.data()[ao..ao + m * k],
                        true,
                        &g[bi * m * n..(bi + 1) * m * n],
                        false,
                        1.0,
                        &mut gb[bo..bo + k * n],
                    );
                }
                acc(*b, gb);
            }
        }
        Op::Permute(x, order) => {
            let mut inverse = vec![0; order.len()];
            for (d, &a) in order.iter().enumerate() {
                inverse[a] = d;
            }
            acc(*x, kernels::permute(g, out.shape(), &inverse));
        }
        Op::Concat(xs, axis) => {
            let inner: usize = out.shape()[axis + 1..].iter().product();
            let outer: usize = out.shape()[..*axis].iter().product();
            let full = out.shape()[*axis] * inner;
            let mut start = 0;
            for &x in xs {
                let len = val(x).shape()[*axis] * inner;
                if needs(x) {
                    let mut d = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        d.extend_from_slice(&g[o * full + start..o * full + start + len]);
                    }
                    acc(x, d);
                }
                start += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let tx = val(*x);
            let inner: usize = tx.shape()[axis + 1..].iter().product();
            let outer: usize = tx.shape()[..*axis].iter().product();
            let (full, len) = (tx.shape()[*axis], out.shape()[*axis]);
            let mut d = vec![0.0; tx.len()];
            for o in 0..outer {
                let dst = o * full * inner + start * inner;
                d[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            acc(*x, d);
        }
        Op::Gather { x, maps } => {
            let tx = val(*x);
            let src_strides = strides(tx.shape());
            let mut d = vec![0.0; tx.len()];
            let mut k = 0;
            for_each_gathered(out.shape(), maps, &src_strides, |off| {
                d[off] += g[k];
                k += 1;
            });
            acc(*x, d);
        }
        Op::IndexSelect { table, indices } => {
            let tt = val(*table);
            let row_len = tt.len() / tt.shape()[0];
            let mut d = vec![0.0; tt.len()];
            for (r, &src) in indices.iter().enumerate() {
                for j in 0..row_len {
                    d[src * row_len + j] += g[r * row_len + j];
                }
            }
            acc(*table, d);
        }
        Op::Conv2d { x, w, b, geom } => {
            let (tx, tw) = (val(*x), val(*w));
            let (dx, dw) = conv_backward(tx.data(), tw.data(), g, geom, needs(*x), needs(*w));
            if let Some(dx) = dx {
                acc(*x, dx);
            }
            if let Some(dw) = dw {
                acc(*w, dw);
            }
            if let Some(b) = b {
                let hw = geom.ho * geom.wo;
                let mut db = vec![0.0; geom.cout];
                for bi in 0..geom.n {
                    for (co, slot) in db.iter_mut().enumerate() {
                        let o = (bi * geom.cout + co) * hw;
                        *slot += g[o..o + hw].iter().sum::<f64>();
                    }
                }
                acc(*b, db);
            }
        }
        Op::MaxPool { x, argmax } => {
            let mut d = vec![0.0; val(*x).len()];
            for (k, &src) in argmax.iter().enumerate() {
                d[src] += g[k];
            }
            acc(*x, d);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let [n, c, h, w] = dims4("batch_norm", out.shape())?;
            let hw = h * w;
            let count = (n * hw) as f64;
            let gm = val(*gamma).data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                        dgamma[ch] += g[i] * xhat[i];
                        dbeta[ch] += g[i];
                    }
                }
            }
            if needs(*x) {
                let mut dx = vec![0.0; g.len()];
                for b in 0..n {
                    for ch in 0..c {
                        for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                            dx[i] = if *train {
                                gm[ch] * inv_std[ch] / count
                                    * (count * g[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                            } else {
                                gm[ch] * inv_std[ch] * g[i]
                            };
                        }
                    }
                }
                acc(*x, dx);
            }
            acc(*gamma, dgamma);
            acc(*beta, dbeta);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let d = *out.shape().last().expect("rank checked");
            let gm = val(*gamma).data();
            let rows = g.len() / d;
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            let mut dx = vec![0.0; g.len()];
            for r in 0..rows {
                let (gr, xr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for j in 0..d {
                    dgamma[j] += gr[j] * xr[j];
                    dbeta[j] += gr[j];
                    let dxh = gr[j] * gm[j];
                    s1 += dxh;
                    s2 += dxh * xr[j];
                }
                let (m1, m2) = (s1 / d as f64, s2 / d as f64);
                for j in 0..d {
                    dx[r * d + j] = inv_std[r] * (gr[j] * gm[j] - m1 - xr[j] * m2);
                }
            }
            if needs(*x) {
                acc(*x, dx);
            }
            acc(*gamma, dgamma);
            acc(*beta, dbeta);
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            let mut d = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..len {
                        d[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            acc(*x, d);
        }
        Op::Upsample { x, scale } => {
            let tx = val(*x);
            let [n, c, h, w] = dims4("upsample_bilinear", tx.shape())?;
            let (ty, txp) = (kernels::bilinear_taps(h, *scale), kernels::bilinear_taps(w, *scale));
            let (ho, wo) = (h * scale, w * scale);
            let mut d = vec![0.0; tx.len()];
            for plane in 0..n * c {
                let dst = &mut d[plane * h * w..(plane + 1) * h * w];
                let src = &g[plane * ho * wo..(plane + 1) * ho * wo];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in txp.iter().enumerate() {
                        let gv = src[oy * wo + ox];
                        dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                        dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                        dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                        dst[y1 * w + x1] += gv * fy * fx;
                    }
                }
            }
            acc(*x, d);
        }
        Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()]),
        Op::Bce {
            pred,
            target,
            weight,
            count,
        } => {
            let p = val(*pred).data();
            let d = p
                .iter()
                .zip(target.iter())
                .enumerate()
                .map(|(i, (&p, &y))| {
                    let wi = weight.as_ref().map_or(1.0, |w| w[i]);
                    if wi == 0.0 || !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                        0.0
                    } else {
                        g[0] * wi * (-y / p + (1.0 - y) / (1.0 - p)) / count
                    }
                })
                .collect();
            acc(*pred, d);
        }
    }
    Ok(())
}

fn conv_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    geom: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let hw_out = geom.ho * geom.wo;
    let rows = geom.col_rows();
    let (cin_g, cout_g) = (geom.cin_g(), geom.cout_g());
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0; w.len()]);
    let pointwise = geom.is_pointwise();
    let mut col = vec![0.0; if pointwise { 0 } else { rows * hw_out }];
    let mut dcol = vec![0.0; rows * hw_out];
    for b in 0..geom.n {
        for grp in 0..geom.groups {
            let x_off = (b * geom.cin + grp * cin_g) * geom.h * geom.w;
            let x_len = cin_g * geom.h * geom.w;
            let g_off = (b * geom.cout + grp * cout_g) * hw_out;
            let g_blk = &g[g_off..g_off + cout_g * hw_out];
            let w_off = grp * cout_g * rows;
            let w_blk = &w[w_off..w_off + cout_g * rows];
            if let Some(dw) = dw.as_mut() {
                let colref: &[f64] = if pointwise {
                    &x[x_off..x_off + x_len]
                } else {
                    kernels::im2col(&x[x_off..x_off + x_len], geom, &mut col);
                    &col
                };
                kernels::gemm(
                    cout_g,
                    hw_out,
                    rows,
                    g_blk,
                    false,
                    colref,
                    true,
                    1.0,
                    &mut dw[w_off..w_off + cout_g * rows],
                );
            }
            if let Some(dx) = dx.as_mut() {
                let dst = &mut dx[x_off..x_off + x_len];
                if pointwise {
                    kernels::gemm(rows, cout_g, hw_out, w_blk, true, g_blk, false, 1.0, dst);
                } else {
                    kernels::gemm(rows, cout_g, hw_out, w_blk, true, g_blk, false, 0.0, &mut dcol);
                    kernels::col2im(&dcol, geom, dst);
                }
            }
        }
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: Vec<usize>, v: Vec<f64>) -> Tensor {
        Tensor::new(shape, v, Precision::F64).unwrap()
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..18).map(|v| v as f64).collect();
        let x = tape.constant(t64(vec![1, 2, 3, 3], data.clone()));
        // per-channel identity: Cout = Cin = 2, 1x1 kernel eye(2)
        let w = tape.constant(t64(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t64(vec![2], vec![0.0, 0.0]));
        let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_hand_sliding_window() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t64(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[5.0]);
    }

    #[test]
    fn conv_zero_weights_give_zero_output_with_stride_and_pad() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(vec![2, 3, 7, 5], vec![1.5; 210]));
        let w = tape.constant(Tensor::zeros(vec![4, 3, 3, 3], Precision::F64));
        let b = tape.constant(Tensor::zeros(vec![4], Precision::F64));
        let y = tape.conv2d(x, w, Some(b), 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 4, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_channel_mismatch_naming_dims() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 4, 4], Precision::F64));
        let w = tape.constant(Tensor::zeros(vec![2, 4, 3, 3], Precision::F64));
        let err = tape.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("input channels 3"), "{err}");
    }

    #[test]
    fn maxpool_forward_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t64(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_ties_go_to_first_in_scan_order() {
        let mut tape = Tape::new();
        let x = tape.param(t64(vec![1, 1, 2, 2], vec![7.0; 4]));
        let y = tape.max_pool2d(x, 2, 2).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
        assert!(Tape::new().max_pool2d(Var(0), 0, 1).is_err());
    }

    #[test]
    fn maxpool_constant_field() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![1, 2, 4, 4], 3.25, Precision::F64));
        let y = tape.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 3.25));
    }

    fn bn_out(values: Vec<f64>, c: usize, gamma: f64, beta: f64) -> Tensor {
        let mut tape = Tape::new();
        let n = values.len() / c;
        let x = tape.constant(t64(vec![1, c, 1, n], values));
        let g = tape.constant(Tensor::full(vec![c], gamma, Precision::F64));
        let b = tape.constant(Tensor::full(vec![c], beta, Precision::F64));
        let (y, stats) = tape.batch_norm(x, g, b, NormMode::Train, 1e-5).unwrap();
        assert!(stats.is_some());
        tape.value(y).clone()
    }

    #[test]
    fn batchnorm_two_values_hand_formula() {
        let y = bn_out(vec![0.0, 2.0], 1, 1.0, 0.0);
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + s).abs() < 1e-12);
        assert!((y.data()[1] - s).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_constant_channel_gives_beta() {
        let y = bn_out(vec![4.0; 6], 1, 2.0, 0.75);
        assert!(y.data().iter().all(|&v| (v - 0.75).abs() < 1e-12));
    }

    #[test]
    fn batchnorm_normalized_input_is_nearly_unchanged() {
        let x = vec![-1.0, 1.0, -1.0, 1.0];
        let y = bn_out(x.clone(), 1, 1.0, 0.0);
        let f = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (a, b) in x.iter().zip(y.data()) {
            assert!((a * f - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(vec![1, 1, 1, 2], vec![3.0, 5.0]));
        let g = tape.constant(Tensor::ones(vec![1], Precision::F64));
        let b = tape.constant(Tensor::zeros(vec![1], Precision::F64));
        let mode = NormMode::Eval {
            mean: &[1.0],
            var: &[4.0 - 1e-5],
        };
        let (y, stats) = tape.batch_norm(x, g, b, mode, 1e-5).unwrap();
        assert!(stats.is_none());
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && (d[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn layernorm_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(vec![2, 3], vec![1.0, 1.0, 1.0, -1.0, 1.0, 0.0]));
        let g = tape.constant(Tensor::ones(vec![3], Precision::F64));
        let b = tape.constant(Tensor::full(vec![3], 0.5, Precision::F64));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(&tape.value(y).data()[..3], &[0.5, 0.5, 0.5]);

        let x = tape.constant(t64(vec![1, 2], vec![-1.0, 1.0]));
        let g = tape.constant(Tensor::ones(vec![2], Precision::F64));
        let b = tape.constant(Tensor::zeros(vec![2], Precision::F64));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        let d = tape.value(y).data();
        assert!((d[0] + s).abs() < 1e-12 && (d[1] - s).abs() < 1e-12);
    }

    #[test]
    fn activations_at_reference_points() {
        assert_eq!(Activation::Relu.apply(-3.0), 0.0);
        assert_eq!(Activation::Relu.apply(3.0), 3.0);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert_eq!(Activation::Gelu.apply(0.0), 0.0);
        // x·Φ(x) at x = 1: Φ(1) = 0.841344746...
        assert!((Activation::Gelu.apply(1.0) - 0.841_344_746_068_543).abs() < 1e-12);
    }

    #[test]
    fn softmax_reference_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(vec![3], vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t64(vec![2], vec![0.0, 3f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_along_inner_axis_and_shift_invariance() {
        let mut tape = Tape::new();
        let vals = vec![0.3, -1.2, 2.0, 0.7, 0.1, -0.4];
        let x = tape.constant(t64(vec![3, 2], vals.clone()));
        let xs = tape.add_scalar(x, 5.0).unwrap();
        let a = tape.softmax(x, 0).unwrap();
        let b = tape.softmax(xs, 0).unwrap();
        let (da, db) = (tape.value(a).clone(), tape.value(b).clone());
        assert!(da.max_abs_diff(&db).unwrap() < 1e-12);
        for col in 0..2 {
            let s: f64 = (0..3).map(|r| da.data()[r * 2 + col]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_hand_product_identity_and_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(t64(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t64(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let eye = tape.constant(t64(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let zero = tape.constant(Tensor::zeros(vec![2, 2], Precision::F64));
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
        let ai = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(ai).data(), tape.value(a).data());
        let az = tape.matmul(a, zero).unwrap();
        assert!(tape.value(az).data().iter().all(|&v| v == 0.0));
        let bad = tape.constant(Tensor::zeros(vec![3, 2], Precision::F64));
        assert!(tape.matmul(a, bad).is_err());
    }

    #[test]
    fn matmul_broadcasts_batch_dims() {
        let mut tape = Tape::new();
        let a = tape.constant(t64(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t64(vec![2, 1], vec![10.0, 100.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(y), &[2, 1, 1]);
        assert_eq!(tape.value(y).data(), &[210.0, 430.0]);
    }

    #[test]
    fn shape_ops_round_trip() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..48).map(|v| v as f64 * 0.5).collect();
        let x = tape.constant(t64(vec![1, 8, 2, 3], data));
        let parts = tape.split(x, &[2, 2, 2, 2], 1).unwrap();
        let back = tape.concat(&parts, 1).unwrap();
        assert!(tape.value(back).bit_eq(tape.value(x)));

        let p = tape.permute(x, &[2, 0, 3, 1]).unwrap();
        let q = tape.permute(p, &[1, 3, 0, 2]).unwrap();
        assert!(tape.value(q).bit_eq(tape.value(x)));

        let r = tape.constant(t64(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let r2 = tape.reshape(r, &[3, 2]).unwrap();
        assert_eq!(tape.value(r2).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(tape.reshape(r, &[4, 2]).is_err());

        let a = tape.constant(Tensor::zeros(vec![1, 2, 4, 4], Precision::F64));
        let b = tape.constant(Tensor::zeros(vec![1, 3, 4, 4], Precision::F64));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[1, 5, 4, 4]);
        let d = tape.constant(Tensor::zeros(vec![1, 3, 4, 5], Precision::F64));
        assert!(tape.concat(&[a, d], 1).is_err());
        assert!(tape.split(x, &[3, 3], 1).is_err());
    }

    #[test]
    fn upsample_cases() {
        let mut tape = Tape::new();
        let ramp = tape.constant(t64(vec![1, 1, 1, 2], vec![0.0, 1.0]));
        let up = tape.upsample_bilinear(ramp, 2).unwrap();
        assert_eq!(tape.shape(up), &[1, 1, 2, 4]);
        assert_eq!(&tape.value(up).data()[..4], &[0.0, 0.25, 0.75, 1.0]);

        let c = tape.constant(Tensor::full(vec![1, 2, 3, 3], 1.75, Precision::F64));
        let up = tape.upsample_bilinear(c, 4).unwrap();
        assert!(tape.value(up).data().iter().all(|&v| (v - 1.75).abs() < 1e-15));

        let x = tape.constant(Tensor::randn(vec![1, 2, 3, 3], 1.0, Precision::F64, &mut rand::rng()));
        let same = tape.upsample_bilinear(x, 1).unwrap();
        assert!(tape.value(same).bit_eq(tape.value(x)));
        assert!(tape.upsample_bilinear(x, 0).is_err());
    }

    #[test]
    fn elementwise_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(t64(vec![2], vec![-2.0, 3.0]));
        let d = tape.sub(a, a).unwrap();
        let ad = tape.abs(d).unwrap();
        assert!(tape.value(ad).data().iter().all(|&v| v == 0.0));
        let z = tape.constant(Tensor::zeros(vec![2], Precision::F64));
        let s = tape.add(a, z).unwrap();
        assert_eq!(tape.value(s).data(), tape.value(a).data());
        let m = tape.abs(a).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0, 3.0]);
        let other = tape.constant(Tensor::zeros(vec![3], Precision::F64));
        assert!(tape.add(a, other).is_err());
        let f32t = tape.constant(Tensor::zeros(vec![2], Precision::F32));
        assert!(matches!(tape.add(a, f32t), Err(Error::Precision { .. })));
    }

    #[test]
    fn abs_subgradient_is_zero_at_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t64(vec![3], vec![-1.0, 0.0, 2.0]));
        let a = tape.abs(x).unwrap();
        let s = tape.sum(a).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(vec![1], vec![1e308]));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn roll_moves_one_hot() {
        let mut tape = Tape::new();
        let mut data = vec![0.0; 16];
        data[0] = 1.0;
        let x = tape.constant(t64(vec![1, 4, 4, 1], data));
        let y = tape.roll(x, &[0, -1, -1, 0]).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[3 * 4 + 3], 1.0);
        assert_eq!(d.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn bce_reference_values() {
        let mut tape = Tape::new();
        let p = tape.constant(t64(vec![1], vec![0.5]));
        let l = tape.bce_loss(p, &t64(vec![1], vec![1.0]), None).unwrap();
        assert!((tape.value(l).data()[0] - 2f64.ln()).abs() < 1e-12);

        let p = tape.constant(t64(vec![2], vec![0.9, 0.2]));
        let l = tape.bce_loss(p, &t64(vec![2], vec![1.0, 0.0]), None).unwrap();
        let want = (-(0.9f64.ln()) - 0.8f64.ln()) / 2.0;
        assert!((tape.value(l).data()[0] - want).abs() < 1e-12);
        assert!((want - 0.164_252).abs() < 1e-6);

        let p = tape.constant(t64(vec![2], vec![1.0, 0.0]));
        let l = tape.bce_loss(p, &t64(vec![2], vec![1.0, 0.0]), None).unwrap();
        assert!(tape.value(l).data()[0] <= -(1.0f64 - 1e-7).ln() + 1e-15);

        assert!(tape.bce_loss(p, &t64(vec![2], vec![0.5, 0.0]), None).is_err());
        assert!(tape.bce_loss(p, &t64(vec![3], vec![0.0; 3]), None).is_err());
    }
}
