//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations are
//! recorded only when at least one input requires a gradient; everything else
//! is stored as a constant. [`Tape::backward`] replays the recorded operations
//! once each, in reverse execution order, accumulating vector-Jacobian
//! products into a [`Gradients`] table.

pub mod conv;
mod gradcheck;

pub use gradcheck::finite_diff_check;

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{gemm, numel, split_axis, MatRef, Tensor};
use conv::ConvGeom;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and report them for the running update.
    Train,
    /// Normalize with the supplied running statistics.
    Eval,
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<T>,
}

pub const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    Tanh(Var),
    BatchNorm2d {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    L2Normalize {
        x: Var,
        axis: usize,
        norms: Vec<T>,
    },
    L2Norm {
        x: Var,
        axis: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    SqL2Distance(Var, Var),
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    GatherRows {
        src: Var,
        index: Vec<usize>,
    },
}

impl<T> Op<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "transposed_conv2d",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::BatchNorm2d { .. } => "batchnorm2d",
            Op::Softmax { .. } => "softmax_axis",
            Op::L2Normalize { .. } => "l2_normalize_axis",
            Op::L2Norm { .. } => "l2_norm_axis",
            Op::Concat { .. } => "concat_axis",
            Op::Slice { .. } => "slice",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SqL2Distance(..) => "sq_l2_distance",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::GatherRows { .. } => "gather_rows",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Option<Op<T>>,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one [`Tape::backward`] call.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    visited: Vec<(Var, &'static str)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Recorded operations in the order backward visited them.
    pub fn visited(&self) -> &[(Var, &'static str)] {
        &self.visited
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn permuted_shape(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    perm.iter().map(|&p| shape[p]).collect()
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape = permuted_shape(shape, perm);
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded (differentiable) operations.
    pub fn recorded_ops(&self) -> usize {
        self.nodes.iter().filter(|n| n.op.is_some()).count()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: requires_grad.then_some(op),
        });
        Var(self.nodes.len() - 1)
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta.shape(), tb.shape())?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|e| e * c);
        self.push(v, &[x], Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|e| e + c);
        self.push(v, &[x], Op::AddScalar(x))
    }

    /// `op(a) * op(b)` for rank-2 operands, `op` being an optional transpose.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("operands must be rank 2, got {:?} and {:?}", va.shape(), vb.shape()),
            ));
        }
        let ra = MatRef::new(va.data(), va.shape()[0], va.shape()[1]);
        let rb = MatRef::new(vb.data(), vb.shape()[0], vb.shape()[1]);
        let ra = if ta { ra.t() } else { ra };
        let rb = if tb { rb.t() } else { rb };
        let (m, k) = if ta { (ra.cols, ra.rows) } else { (ra.rows, ra.cols) };
        let (k2, n) = if tb { (rb.cols, rb.rows) } else { (rb.rows, rb.cols) };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: {m}x{k} times {k2}x{n}"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(ra, rb, T::zero(), &mut out, false);
        let v = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(v, &[a, b], Op::MatMul { a, b, ta, tb }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    /// `x: [B, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`, optional `bias: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?} incompatible with weight {ws:?}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.shape(b), ws[0]),
                ));
            }
        }
        let geom = ConvGeom::forward(xs[1], xs[2], xs[3], ws[2], ws[3], stride, pad).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("kernel {}x{} stride {stride} pad {pad} does not fit input {xs:?}", ws[2], ws[3]),
            )
        })?;
        let out = conv::conv2d_forward(
            self.value(x).data(),
            xs[0],
            &geom,
            self.value(w).data(),
            ws[0],
            bias.map(|b| self.value(b).data()),
        );
        let v = Tensor::from_parts(vec![xs[0], ws[0], geom.out_h, geom.out_w], out);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(v, &inputs, Op::Conv2d { x, w, bias, geom }))
    }

    /// `x: [B, Cin, H, W]`, `w: [Cin, Cout, kh, kw]`; output extent
    /// `(H - 1) * stride - 2 * pad + kh`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] {
            return Err(Error::shape(
                "transposed_conv2d",
                format!("input {xs:?} incompatible with weight {ws:?}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[1]] {
                return Err(Error::shape(
                    "transposed_conv2d",
                    format!("bias {:?} for {} output channels", self.shape(b), ws[1]),
                ));
            }
        }
        let geom = ConvGeom::transposed(ws[1], xs[2], xs[3], ws[2], ws[3], stride, pad).ok_or_else(|| {
            Error::shape(
                "transposed_conv2d",
                format!("kernel {}x{} stride {stride} pad {pad} invalid for input {xs:?}", ws[2], ws[3]),
            )
        })?;
        let out = conv::conv_transpose2d_forward(
            self.value(x).data(),
            xs[0],
            xs[1],
            &geom,
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
        );
        let v = Tensor::from_parts(vec![xs[0], ws[1], geom.height, geom.width], out);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(v, &inputs, Op::ConvTranspose2d { x, w, bias, geom }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| if e > T::zero() { e } else { T::zero() });
        self.push(v, &[x], Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.tanh());
        self.push(v, &[x], Op::Tanh(x))
    }

    /// Per-channel normalization of `x: [B, C, H, W]`.
    ///
    /// In [`BatchNormMode::Train`] the batch statistics are used and returned;
    /// in [`BatchNormMode::Eval`] the running statistics are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        mode: BatchNormMode,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("batchnorm2d", format!("input must be rank 4, got {xs:?}")));
        }
        let (b, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        for (what, len) in [
            ("gamma", self.value(gamma).len()),
            ("beta", self.value(beta).len()),
            ("running_mean", running_mean.len()),
            ("running_var", running_var.len()),
        ] {
            if len != c {
                return Err(Error::shape(
                    "batchnorm2d",
                    format!("{what} has {len} entries for {c} channels"),
                ));
            }
        }
        let count = b * plane;
        let train = mode == BatchNormMode::Train;
        if train && count < 2 {
            return Err(Error::shape(
                "batchnorm2d",
                format!("training mode needs more than one value per channel, got {xs:?}"),
            ));
        }
        let data = self.value(x).data();
        let eps = lit::<T>(BATCH_NORM_EPS);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if train {
            let n = lit::<T>(count as f64);
            for (ch, (m, vr)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
                let mut s = T::zero();
                for bi in 0..b {
                    let off = (bi * c + ch) * plane;
                    s += data[off..off + plane].iter().copied().sum::<T>();
                }
                *m = s / n;
                let mut sq = T::zero();
                for bi in 0..b {
                    let off = (bi * c + ch) * plane;
                    for &e in &data[off..off + plane] {
                        sq += (e - *m) * (e - *m);
                    }
                }
                *vr = sq / n;
            }
        } else {
            mean.copy_from_slice(running_mean);
            var.copy_from_slice(running_var);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for i in off..off + plane {
                    xhat[i] = (data[i] - mean[ch]) * inv_std[ch];
                    out[i] = xhat[i] * g[ch] + be[ch];
                }
            }
        }
        let stats = train.then(|| {
            let n = lit::<T>(count as f64);
            BatchStats {
                var: var.iter().map(|&v| v * n / (n - T::one())).collect(),
                mean: mean.clone(),
            }
        });
        let v = Tensor::from_parts(xs, out);
        let var_out = self.push(
            v,
            &[x, gamma, beta],
            Op::BatchNorm2d {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        );
        Ok((var_out, stats))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, n, inner) = split_axis("softmax_axis", t.shape(), axis)?;
        let src = t.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let max = (0..n).map(|i| src[at(i)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for i in 0..n {
                    let e = (src[at(i)] - max).exp();
                    out[at(i)] = e;
                    total += e;
                }
                for i in 0..n {
                    out[at(i)] /= total;
                }
            }
        }
        let v = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(v, &[x], Op::Softmax { x, axis }))
    }

    /// Unit L2 norm along `axis`; an all-zero slice maps to zero.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, n, inner) = split_axis("l2_normalize_axis", t.shape(), axis)?;
        let src = t.data();
        let mut out = vec![T::zero(); src.len()];
        let mut norms = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let norm = (0..n).map(|i| src[at(i)] * src[at(i)]).sum::<T>().sqrt();
                norms[o * inner + j] = norm;
                if norm > T::zero() {
                    for i in 0..n {
                        out[at(i)] = src[at(i)] / norm;
                    }
                }
            }
        }
        let v = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(v, &[x], Op::L2Normalize { x, axis, norms }))
    }

    /// Euclidean norm along `axis`, which is removed from the shape.
    pub fn l2_norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, n, inner) = split_axis("l2_norm_axis", t.shape(), axis)?;
        let src = t.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                out[o * inner + j] = (0..n)
                    .map(|i| {
                        let e = src[(o * n + i) * inner + j];
                        e * e
                    })
                    .sum::<T>()
                    .sqrt();
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let v = Tensor::from_parts(shape, out);
        Ok(self.push(v, &[x], Op::L2Norm { x, axis }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::shape("concat_axis", "no inputs"));
        };
        let base = self.shape(first).to_vec();
        let (outer, _, inner) = split_axis("concat_axis", &base, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat_axis",
                    format!("{s:?} does not match {base:?} off axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let ext = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::from_parts(shape, out);
        Ok(self.push(
            v,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, n, inner) = split_axis("slice", t.shape(), axis)?;
        if start >= end || end > n {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{end} invalid for extent {n} on axis {axis}"),
            ));
        }
        let d = t.data();
        let len = end - start;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let v = Tensor::from_parts(shape, out);
        Ok(self.push(v, &[x], Op::Slice { x, axis, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / lit(t.len() as f64);
        self.push(Tensor::scalar(s), &[x], Op::Mean(x))
    }

    /// `sum((a - b)^2)` as a scalar.
    pub fn sq_l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.zip_with("sq_l2_distance", a, b, |x, y| (x - y) * (x - y))?;
        let s = d.data().iter().copied().sum::<T>();
        Ok(self.push(Tensor::scalar(s), &[a, b], Op::SqL2Distance(a, b)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, &[x], Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of {rank} axes"),
            ));
        }
        let data = permute_data(t.data(), t.shape(), perm);
        let v = Tensor::from_parts(permuted_shape(t.shape(), perm), data);
        Ok(self.push(
            v,
            &[x],
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Rows `index[r]` of a rank-2 `src`, stacked.
    pub fn gather_rows(&mut self, src: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(src);
        if t.rank() != 2 {
            return Err(Error::shape("gather_rows", format!("source must be rank 2, got {:?}", t.shape())));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        if index.is_empty() {
            return Err(Error::shape("gather_rows", "empty index"));
        }
        let mut out = Vec::with_capacity(index.len() * cols);
        for &r in index {
            if r >= rows {
                return Err(Error::shape("gather_rows", format!("row {r} out of range for {rows} rows")));
            }
            out.extend_from_slice(t.row(r));
        }
        let v = Tensor::from_parts(vec![index.len(), cols], out);
        Ok(self.push(
            v,
            &[src],
            Op::GatherRows {
                src,
                index: index.to_vec(),
            },
        ))
    }

    /// Backward pass from a scalar output with seed 1.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients<T>> {
        let seed = Tensor::full(self.shape(output), T::one());
        if seed.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("scalar seed needs a single-element output, got {:?}", self.shape(output)),
            ));
        }
        self.backward(output, seed)
    }

    pub fn backward(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Autodiff("backward on an empty tape (no forward pass recorded)".into()));
        }
        if output.0 >= self.nodes.len() {
            return Err(Error::Autodiff(format!("output {output:?} is not on this tape")));
        }
        same_shape("backward seed", seed.shape(), self.shape(output))?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = Vec::new();
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(seed);
        }
        for i in (0..=output.0).rev() {
            let Some(op) = &self.nodes[i].op else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            visited.push((Var(i), op.kind()));
            self.backprop(op, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate_data(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Vec<T>) {
        let shape = self.shape(v).to_vec();
        self.accumulate(grads, v, Tensor::from_parts(shape, delta));
    }

    fn backprop(&self, op: &Op<T>, out: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|e| -e));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if rg(*a) {
                    self.accumulate_data(grads, *a, gd.iter().zip(vb).map(|(&x, &y)| x * y).collect());
                }
                if rg(*b) {
                    self.accumulate_data(grads, *b, gd.iter().zip(va).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|e| e * *c)),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ra = MatRef::new(va.data(), va.shape()[0], va.shape()[1]);
                let rb = MatRef::new(vb.data(), vb.shape()[0], vb.shape()[1]);
                let ra = if *ta { ra.t() } else { ra };
                let rb = if *tb { rb.t() } else { rb };
                let (m, n) = (g.shape()[0], g.shape()[1]);
                let rg_ = MatRef::new(gd, m, n);
                if rg(*a) {
                    let mut da = vec![T::zero(); va.len()];
                    gemm(rg_, rb.t(), T::zero(), &mut da, *ta);
                    self.accumulate_data(grads, *a, da);
                }
                if rg(*b) {
                    let mut db = vec![T::zero(); vb.len()];
                    gemm(ra.t(), rg_, T::zero(), &mut db, *tb);
                    self.accumulate_data(grads, *b, db);
                }
            }
            Op::Conv2d { x, w, bias, geom } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let need = (rg(*x), rg(*w), bias.is_some_and(rg));
                let r = conv::conv2d_backward(vx.data(), vx.shape()[0], geom, vw.data(), vw.shape()[0], gd, need);
                if let Some(dx) = r.dx {
                    self.accumulate_data(grads, *x, dx);
                }
                if let Some(dw) = r.dw {
                    self.accumulate_data(grads, *w, dw);
                }
                if let (Some(db), Some(b)) = (r.db, bias) {
                    self.accumulate_data(grads, *b, db);
                }
            }
            Op::ConvTranspose2d { x, w, bias, geom } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let need = (rg(*x), rg(*w), bias.is_some_and(rg));
                let r = conv::conv_transpose2d_backward(
                    vx.data(),
                    vx.shape()[0],
                    vx.shape()[1],
                    geom,
                    vw.data(),
                    gd,
                    need,
                );
                if let Some(dx) = r.dx {
                    self.accumulate_data(grads, *x, dx);
                }
                if let Some(dw) = r.dw {
                    self.accumulate_data(grads, *w, dw);
                }
                if let (Some(db), Some(b)) = (r.db, bias) {
                    self.accumulate_data(grads, *b, db);
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(vx)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate_data(grads, *x, d);
            }
            Op::Tanh(x) => {
                let y = self.nodes[out].value.data();
                let d = gd.iter().zip(y).map(|(&gv, &yv)| gv * (T::one() - yv * yv)).collect();
                self.accumulate_data(grads, *x, d);
            }
            Op::BatchNorm2d {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = self.shape(*x);
                let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * plane;
                        for i in off..off + plane {
                            dbeta[ch] += gd[i];
                            dgamma[ch] += gd[i] * xhat[i];
                        }
                    }
                }
                if rg(*x) {
                    let gam = self.value(*gamma).data();
                    let n = lit::<T>((b * plane) as f64);
                    let mut dx = vec![T::zero(); gd.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * plane;
                            let k = gam[ch] * inv_std[ch];
                            for i in off..off + plane {
                                dx[i] = if *train {
                                    k * (gd[i] - dbeta[ch] / n - xhat[i] * dgamma[ch] / n)
                                } else {
                                    k * gd[i]
                                };
                            }
                        }
                    }
                    self.accumulate_data(grads, *x, dx);
                }
                if rg(*gamma) {
                    self.accumulate_data(grads, *gamma, dgamma);
                }
                if rg(*beta) {
                    self.accumulate_data(grads, *beta, dbeta);
                }
            }
            Op::Softmax { x, axis } => {
                let y = &self.nodes[out].value;
                let (outer, n, inner) = split_axis("softmax_axis", y.shape(), *axis).expect("validated in forward");
                let yd = y.data();
                let mut dx = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * n + i) * inner + j;
                        let dot = (0..n).map(|i| gd[at(i)] * yd[at(i)]).sum::<T>();
                        for i in 0..n {
                            dx[at(i)] = yd[at(i)] * (gd[at(i)] - dot);
                        }
                    }
                }
                self.accumulate_data(grads, *x, dx);
            }
            Op::L2Normalize { x, axis, norms } => {
                let y = &self.nodes[out].value;
                let (outer, n, inner) =
                    split_axis("l2_normalize_axis", y.shape(), *axis).expect("validated in forward");
                let yd = y.data();
                let mut dx = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let norm = norms[o * inner + j];
                        if norm <= T::zero() {
                            continue;
                        }
                        let at = |i: usize| (o * n + i) * inner + j;
                        let dot = (0..n).map(|i| gd[at(i)] * yd[at(i)]).sum::<T>();
                        for i in 0..n {
                            dx[at(i)] = (gd[at(i)] - yd[at(i)] * dot) / norm;
                        }
                    }
                }
                self.accumulate_data(grads, *x, dx);
            }
            Op::L2Norm { x, axis } => {
                let vx = self.value(*x);
                let (outer, n, inner) = split_axis("l2_norm_axis", vx.shape(), *axis).expect("validated in forward");
                let (xd, yd) = (vx.data(), self.nodes[out].value.data());
                let mut dx = vec![T::zero(); xd.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let y = yd[o * inner + j];
                        if y <= T::zero() {
                            continue;
                        }
                        let k = gd[o * inner + j] / y;
                        for i in 0..n {
                            let at = (o * n + i) * inner + j;
                            dx[at] = k * xd[at];
                        }
                    }
                }
                self.accumulate_data(grads, *x, dx);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis("concat_axis", g.shape(), *axis).expect("validated in forward");
                let mut offset = 0;
                for &v in inputs {
                    let ext = self.shape(v)[*axis];
                    if rg(v) {
                        let mut d = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[from..from + ext * inner]);
                        }
                        self.accumulate_data(grads, v, d);
                    }
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, n, inner) = split_axis("slice", xs, *axis).expect("validated in forward");
                let len = g.shape()[*axis];
                let mut dx = vec![T::zero(); numel(xs)];
                for o in 0..outer {
                    let to = (o * n + start) * inner;
                    dx[to..to + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate_data(grads, *x, dx);
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, g.item()));
            }
            Op::Mean(x) => {
                let shape = self.shape(*x).to_vec();
                let k = g.item() / lit(numel(&shape) as f64);
                self.accumulate(grads, *x, Tensor::full(&shape, k));
            }
            Op::SqL2Distance(a, b) => {
                let two_g = lit::<T>(2.0) * g.item();
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let da: Vec<T> = va.iter().zip(vb).map(|(&x, &y)| two_g * (x - y)).collect();
                if rg(*b) {
                    self.accumulate_data(grads, *b, da.iter().map(|&e| -e).collect());
                }
                if rg(*a) {
                    self.accumulate_data(grads, *a, da);
                }
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(shape, gd.to_vec()));
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let d = permute_data(gd, g.shape(), &inverse);
                self.accumulate_data(grads, *x, d);
            }
            Op::GatherRows { src, index } => {
                let s = self.shape(*src);
                let cols = s[1];
                let mut d = vec![T::zero(); numel(s)];
                for (r, &row) in index.iter().enumerate() {
                    for c in 0..cols {
                        d[row * cols + c] += gd[r * cols + c];
                    }
                }
                self.accumulate_data(grads, *src, d);
            }
        }
    }
}
