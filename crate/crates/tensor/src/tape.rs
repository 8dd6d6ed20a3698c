//! Tape-based reverse-mode differentiation.
//!
//! Operations are recorded on a [`Tape`] in execution order, so every node's
//! inputs precede it. [`Tape::backward`] walks the record in reverse and
//! accumulates vector-Jacobian products into the leaves.

use std::sync::Arc;

use crate::element::Element;
use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Expand(Var),
    Sum(Var),
    Mean(Var),
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<Vec<T>>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    CrossEntropy {
        logits: Var,
        labels: Arc<Vec<u8>>,
        ignore: u8,
        probs: Vec<T>,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of operations.
///
/// A tape is single-writer. After [`Tape::backward`] it is frozen: further
/// backward calls fail with [`TensorError::TapeConsumed`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of leaves produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a leaf, or `None` if the root does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Number of leaves that received a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_finite<T: Element>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(TensorError::InvalidAxis { axis, rank })
    } else {
        Ok(())
    }
}

/// Splits a shape at `axis` into (outer, extent, inner) element counts.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Interprets a 3-D `C×H×W` or 4-D `B×C×H×W` shape as (B, C, H, W).
fn image_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(shape_err(op, format!("expected C×H×W or B×C×H×W, got {shape:?}"))),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a differentiable leaf.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn elementwise(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.binary_same_shape(op, a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let data: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        check_finite(op, &data)?;
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        check_finite("scale", out.data())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Scale(a, s), rg))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias);
        let d = *xs.last().unwrap();
        if bs.len() != 1 || bs[0] != d {
            return Err(shape_err("add_bias", format!("{xs:?} + {bs:?}")));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).to_vec();
        for row in data.chunks_exact_mut(d) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        check_finite("add_bias", &data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::from_parts(xs, data), Op::AddBias(x, bias), rg))
    }

    /// Matrix product of `m×k` and `k×n` operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = match (self.shape(a), self.shape(b)) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (sa, sb) => return Err(shape_err("matmul", format!("{sa:?} · {sb:?}"))),
        };
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        check_finite("matmul", &data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = match self.shape(a) {
            [r, c] => (*r, *c),
            s => return Err(shape_err("transpose", format!("expected rank 2, got {s:?}"))),
        };
        let data = kernels::transpose(self.value(a).data(), r, c);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&ax| ax >= shape.len() || std::mem::replace(&mut seen[ax], true)) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                detail: format!("axes {axes:?} for rank {}", shape.len()),
            });
        }
        let (out_shape, data) = kernels::permute(self.value(a).data(), &shape, axes);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Permute(a, axes.to_vec()), rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no parts"))?;
        let base = self.shape(*first).to_vec();
        check_axis(axis, base.len())?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let agree = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agree {
                return Err(shape_err("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                let chunk = ext * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Takes `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(axis, shape.len())?;
        if start >= end || end > shape[axis] {
            return Err(TensorError::RangeOutOfBounds {
                axis,
                start,
                end,
                extent: shape[axis],
            });
        }
        let (outer, ext, inner) = split_at_axis(&shape, axis);
        let len = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Slice { x, axis, start }, rg))
    }

    /// Repeats `x` `n` times along a new leading axis.
    pub fn expand(&mut self, x: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(TensorError::InvalidArgument {
                op: "expand",
                detail: "zero copies".into(),
            });
        }
        let src = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(src.shape());
        let mut data = Vec::with_capacity(n * src.len());
        for _ in 0..n {
            data.extend_from_slice(src.data());
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Expand(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        check_finite("sum", &[s])?;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.sum() / T::from_f64(v.len() as f64);
        check_finite("mean", &[s])?;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::gelu);
        check_finite("gelu", out.data())?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Gelu(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Relu(x), rg))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        check_finite("softmax", v.data())?;
        let n = *v.shape().last().unwrap();
        let data = kernels::softmax_rows(v.data(), n);
        let shape = v.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Softmax(x), rg))
    }

    /// Standardizes each last-axis slice (biased variance) then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("x {shape:?}, gain {:?}, bias {:?}", self.shape(gain), self.shape(bias)),
            ));
        }
        let eps = T::from_f64(eps);
        let inv_d = T::from_f64(1.0 / d as f64);
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / d;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        check_finite("layer_norm", &out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: B×Nq×d`, `k, v: B×Nk×d`; `d` is split into `heads` contiguous
    /// column groups and each head uses scale `1/sqrt(d/heads)`. Output is
    /// `B×Nq×d` with heads re-joined in the same column layout.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (b, nq, d) = match *self.shape(q) {
            [b, n, d] => (b, n, d),
            ref s => return Err(shape_err("attention", format!("query shape {s:?}"))),
        };
        let (nk, dk) = match *self.shape(k) {
            [bb, n, dd] if bb == b => (n, dd),
            ref s => return Err(shape_err("attention", format!("key shape {s:?}"))),
        };
        if self.shape(v) != [b, nk, dk] || dk != d {
            return Err(shape_err(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", self.shape(q), self.shape(k), self.shape(v)),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::InvalidArgument {
                op: "attention",
                detail: format!("{heads} heads do not divide dim {d}"),
            });
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut out = vec![T::zero(); b * nq * d];
        let mut probs = vec![T::zero(); b * heads * nq * nk];
        for bi in 0..b {
            for h in 0..heads {
                let qh = gather_head(qd, bi, nq, d, h, dh);
                let kt = kernels::transpose(&gather_head(kd, bi, nk, d, h, dh), nk, dh);
                let vh = gather_head(vd, bi, nk, d, h, dh);
                let mut scores = kernels::matmul(&qh, &kt, nq, dh, nk);
                for s in scores.iter_mut() {
                    *s *= scale;
                }
                let p = &mut probs[(bi * heads + h) * nq * nk..(bi * heads + h + 1) * nq * nk];
                for (src, dst) in scores.chunks_exact(nk).zip(p.chunks_exact_mut(nk)) {
                    kernels::softmax_row(src, dst);
                }
                let oh = kernels::matmul(p, &vh, nq, nk, dh);
                scatter_head(&mut out, &oh, bi, nq, d, h, dh);
            }
        }
        check_finite("attention", &out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::from_parts(vec![b, nq, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Attention probabilities recorded by an [`Tape::attention`] node,
    /// laid out `B×heads×Nq×Nk`.
    pub fn attention_probs(&self, var: Var) -> Option<&[T]> {
        match &self.nodes[var.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// 2-D cross-correlation with zero padding.
    ///
    /// `x` is `C_in×H×W` or `B×C_in×H×W`; `w` is `C_out×C_in×k×k`;
    /// optional `bias` has length `C_out`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (b, c_in, h, wd) = image_dims(&xs, "conv2d")?;
        let (c_out, k) = match *self.shape(w) {
            [co, ci, k1, k2] if ci == c_in && k1 == k2 => (co, k1),
            ref s => return Err(shape_err("conv2d", format!("input {xs:?}, kernel {s:?}"))),
        };
        if let Some(bv) = bias {
            if self.shape(bv) != [c_out] {
                return Err(shape_err("conv2d", format!("bias {:?}", self.shape(bv))));
            }
        }
        let geom = ConvGeom::new(c_in, h, wd, k, stride, pad).ok_or_else(|| TensorError::InvalidArgument {
            op: "conv2d",
            detail: format!("kernel {k}, stride {stride}, pad {pad} on {h}×{wd}"),
        })?;
        let plane = c_in * h * wd;
        let out_plane = c_out * geom.col_cols();
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); b * out_plane];
        let mut cols = Vec::with_capacity(b);
        for bi in 0..b {
            let col = kernels::im2col(&xv[bi * plane..(bi + 1) * plane], &geom);
            let dst = &mut out[bi * out_plane..(bi + 1) * out_plane];
            kernels::matmul_acc(wv, &col, dst, c_out, geom.col_rows(), geom.col_cols());
            if let Some(bv) = bias {
                let bd = self.value(bv).data();
                for (co, chunk) in dst.chunks_exact_mut(geom.col_cols()).enumerate() {
                    for v in chunk.iter_mut() {
                        *v += bd[co];
                    }
                }
            }
            cols.push(col);
        }
        check_finite("conv2d", &out)?;
        let out_shape = if xs.len() == 3 {
            vec![c_out, geom.out_h, geom.out_w]
        } else {
            vec![b, c_out, geom.out_h, geom.out_w]
        };
        let mut deps = vec![x, w];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Conv2d {
                x,
                w,
                b: bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Transposed convolution, the adjoint of [`Tape::conv2d`].
    ///
    /// `w` is `C_in×C_out×k×k`; output extent is `(H−1)·stride − 2·pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (b, c_in, h, wd) = image_dims(&xs, "conv_transpose2d")?;
        let (c_out, k) = match *self.shape(w) {
            [ci, co, k1, k2] if ci == c_in && k1 == k2 => (co, k1),
            ref s => return Err(shape_err("conv_transpose2d", format!("input {xs:?}, kernel {s:?}"))),
        };
        if let Some(bv) = bias {
            if self.shape(bv) != [c_out] {
                return Err(shape_err("conv_transpose2d", format!("bias {:?}", self.shape(bv))));
            }
        }
        let invalid = || TensorError::InvalidArgument {
            op: "conv_transpose2d",
            detail: format!("kernel {k}, stride {stride}, pad {pad} on {h}×{wd}"),
        };
        if stride == 0 || (h - 1) * stride + k < 2 * pad + 1 || (wd - 1) * stride + k < 2 * pad + 1 {
            return Err(invalid());
        }
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (wd - 1) * stride + k - 2 * pad;
        // the geometry of the forward convolution this op is the adjoint of
        let geom = ConvGeom::new(c_out, oh, ow, k, stride, pad).ok_or_else(invalid)?;
        if geom.out_h != h || geom.out_w != wd {
            return Err(invalid());
        }
        let xv = self.value(x).data();
        let wt = kernels::transpose(self.value(w).data(), c_in, geom.col_rows());
        let plane = c_in * h * wd;
        let out_plane = c_out * oh * ow;
        let mut out = Vec::with_capacity(b * out_plane);
        for bi in 0..b {
            let col = kernels::matmul(&wt, &xv[bi * plane..(bi + 1) * plane], geom.col_rows(), c_in, h * wd);
            let mut img = kernels::col2im(&col, &geom);
            if let Some(bv) = bias {
                let bd = self.value(bv).data();
                for (co, chunk) in img.chunks_exact_mut(oh * ow).enumerate() {
                    for v in chunk.iter_mut() {
                        *v += bd[co];
                    }
                }
            }
            out.extend(img);
        }
        check_finite("conv_transpose2d", &out)?;
        let out_shape = if xs.len() == 3 {
            vec![c_out, oh, ow]
        } else {
            vec![b, c_out, oh, ow]
        };
        let mut deps = vec![x, w];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::ConvTranspose2d { x, w, b: bias, geom },
            rg,
        ))
    }

    /// Mean per-pixel cross entropy of `logits: [B×]C×H×W` against integer
    /// `labels` (length `B·H·W`); pixels equal to `ignore` are skipped.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: u8) -> Result<Var> {
        let (b, c, h, w) = image_dims(self.shape(logits), "cross_entropy")?;
        let hw = h * w;
        if labels.len() != b * hw {
            return Err(shape_err(
                "cross_entropy",
                format!("{} labels for logits {:?}", labels.len(), self.shape(logits)),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != ignore && l as usize >= c) {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy",
                detail: format!("label {bad} with {c} classes"),
            });
        }
        let lv = self.value(logits).data();
        check_finite("cross_entropy", lv)?;
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = 0.0f64;
        let mut count = 0usize;
        let mut col = vec![T::zero(); c];
        let mut p = vec![T::zero(); c];
        for bi in 0..b {
            for px in 0..hw {
                for ci in 0..c {
                    col[ci] = lv[(bi * c + ci) * hw + px];
                }
                kernels::softmax_row(&col, &mut p);
                for ci in 0..c {
                    probs[(bi * c + ci) * hw + px] = p[ci];
                }
                let label = labels[bi * hw + px];
                if label == ignore {
                    continue;
                }
                let max = col.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max.as_f64()
                    + col
                        .iter()
                        .map(|&v| (v - max).as_f64().exp())
                        .sum::<f64>()
                        .ln();
                total += lse - col[label as usize].as_f64();
                count += 1;
            }
        }
        if count == 0 {
            return Err(TensorError::AllPixelsIgnored);
        }
        let loss = T::from_f64(total / count as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: Arc::new(labels.to_vec()),
                ignore,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Propagates gradients from a scalar `root` back to every leaf.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if !self.value(root).is_scalar() {
            return Err(TensorError::NotScalarRoot(self.shape(root).to_vec()));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(&gi, &y)| gi * y).collect());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(&gi, &x)| gi * x).collect());
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, g.iter().map(|&v| v * *s).collect());
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.to_vec());
                if self.wants(*bias) {
                    let d = self.shape(*bias)[0];
                    let mut gb = vec![T::zero(); d];
                    for row in g.chunks_exact(d) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    let bt = kernels::transpose(self.value(*b).data(), k, n);
                    self.accumulate(grads, *a, kernels::matmul(g, &bt, m, n, k));
                }
                if self.wants(*b) {
                    let at = kernels::transpose(self.value(*a).data(), m, k);
                    self.accumulate(grads, *b, kernels::matmul(&at, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                self.accumulate(grads, *a, kernels::transpose(g, c, r));
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Permute(a, axes) => {
                let out_shape = node.value.shape();
                let (_, back) = kernels::permute(g, out_shape, &kernels::inverse_axes(axes));
                self.accumulate(grads, *a, back);
            }
            Op::Concat(parts, axis) => {
                let out_shape = node.value.shape();
                let (outer, _, inner) = split_at_axis(out_shape, *axis);
                let mut offset = 0;
                let total = out_shape[*axis];
                for &p in parts {
                    let ext = self.shape(p)[*axis];
                    if self.wants(p) {
                        let mut part = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            part.extend_from_slice(&g[base..base + ext * inner]);
                        }
                        self.accumulate(grads, p, part);
                    }
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.shape(*x);
                let (outer, ext, inner) = split_at_axis(in_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut full = vec![T::zero(); outer * ext * inner];
                for o in 0..outer {
                    let dst = o * ext * inner + start * inner;
                    full[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, full);
            }
            Op::Expand(x) => {
                let n = self.value(*x).len();
                let mut acc = vec![T::zero(); n];
                for chunk in g.chunks_exact(n) {
                    for (a, &v) in acc.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                self.accumulate(grads, *x, acc);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0] / T::from_f64(n as f64); n]);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(xv).map(|(&gi, &v)| gi * kernels::gelu_grad(v)).collect(),
                );
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&gi, &v)| if v > T::zero() { gi } else { T::zero() })
                        .collect(),
                );
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap();
                self.accumulate(grads, *x, kernels::softmax_rows_backward(node.value.data(), g, n));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gain)[0];
                let gv = self.value(*gain).data();
                if self.wants(*gain) || self.wants(*bias) {
                    let mut gg = vec![T::zero(); d];
                    let mut gb = vec![T::zero(); d];
                    for (grow, xrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * xrow[j];
                            gb[j] += grow[j];
                        }
                    }
                    self.accumulate(grads, *gain, gg);
                    self.accumulate(grads, *bias, gb);
                }
                if self.wants(*x) {
                    let inv_d = T::from_f64(1.0 / d as f64);
                    let mut gx = vec![T::zero(); g.len()];
                    let mut dxhat = vec![T::zero(); d];
                    for (r, (grow, xrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        for j in 0..d {
                            dxhat[j] = grow[j] * gv[j];
                        }
                        let mean_dx = dxhat.iter().copied().sum::<T>() * inv_d;
                        let mean_dx_x = dxhat.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                        for j in 0..d {
                            gx[r * d + j] = rstd[r] * (dxhat[j] - mean_dx - xrow[j] * mean_dx_x);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::Conv2d { x, w, b, geom, cols } => {
                let batch = cols.len();
                let c_out = self.shape(*w)[0];
                let cc = geom.col_cols();
                let cr = geom.col_rows();
                let out_plane = c_out * cc;
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); c_out * cr];
                    for (bi, col) in cols.iter().enumerate() {
                        let colt = kernels::transpose(col, cr, cc);
                        kernels::matmul_acc(&g[bi * out_plane..(bi + 1) * out_plane], &colt, &mut gw, c_out, cc, cr);
                    }
                    self.accumulate(grads, *w, gw);
                }
                if let Some(bv) = b {
                    let mut gb = vec![T::zero(); c_out];
                    for bi in 0..batch {
                        for (co, chunk) in g[bi * out_plane..(bi + 1) * out_plane].chunks_exact(cc).enumerate() {
                            gb[co] += chunk.iter().copied().sum::<T>();
                        }
                    }
                    self.accumulate(grads, *bv, gb);
                }
                if self.wants(*x) {
                    let wt = kernels::transpose(self.value(*w).data(), c_out, cr);
                    let mut gx = Vec::with_capacity(self.value(*x).len());
                    for bi in 0..batch {
                        let dcol = kernels::matmul(&wt, &g[bi * out_plane..(bi + 1) * out_plane], cr, c_out, cc);
                        gx.extend(kernels::col2im(&dcol, geom));
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let xs = self.shape(*x);
                let (batch, c_in, h, wd) = image_dims(xs, "conv_transpose2d").expect("validated in forward");
                let c_out = geom.channels;
                let out_plane = c_out * geom.height * geom.width;
                let plane = c_in * h * wd;
                let cr = geom.col_rows();
                let cc = geom.col_cols();
                let gcols: Vec<Vec<T>> = (0..batch)
                    .map(|bi| kernels::im2col(&g[bi * out_plane..(bi + 1) * out_plane], geom))
                    .collect();
                if self.wants(*w) {
                    let xv = self.value(*x).data();
                    let mut gw = vec![T::zero(); c_in * cr];
                    for (bi, gc) in gcols.iter().enumerate() {
                        let gct = kernels::transpose(gc, cr, cc);
                        kernels::matmul_acc(&xv[bi * plane..(bi + 1) * plane], &gct, &mut gw, c_in, cc, cr);
                    }
                    self.accumulate(grads, *w, gw);
                }
                if let Some(bv) = b {
                    let mut gb = vec![T::zero(); c_out];
                    for bi in 0..batch {
                        let img = &g[bi * out_plane..(bi + 1) * out_plane];
                        for (co, chunk) in img.chunks_exact(geom.height * geom.width).enumerate() {
                            gb[co] += chunk.iter().copied().sum::<T>();
                        }
                    }
                    self.accumulate(grads, *bv, gb);
                }
                if self.wants(*x) {
                    let wv = self.value(*w).data();
                    let mut gx = Vec::with_capacity(batch * plane);
                    for gc in &gcols {
                        gx.extend(kernels::matmul(wv, gc, c_in, cr, cc));
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                ignore,
                probs,
                count,
            } => {
                let (b, c, h, w) = image_dims(self.shape(*logits), "cross_entropy").expect("validated in forward");
                let hw = h * w;
                let scale = g[0] / T::from_f64(*count as f64);
                let mut gl = vec![T::zero(); probs.len()];
                for bi in 0..b {
                    for px in 0..hw {
                        let label = labels[bi * hw + px];
                        if label == *ignore {
                            continue;
                        }
                        for ci in 0..c {
                            let idx = (bi * c + ci) * hw + px;
                            let target = if ci == label as usize { T::one() } else { T::zero() };
                            gl[idx] = (probs[idx] - target) * scale;
                        }
                    }
                }
                self.accumulate(grads, *logits, gl);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(&self, q: Var, k: Var, v: Var, heads: usize, probs: &[T], g: &[T], grads: &mut [Option<Vec<T>>]) {
        let [b, nq, d] = *self.shape(q) else { unreachable!() };
        let nk = self.shape(k)[1];
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut gq = vec![T::zero(); qd.len()];
        let mut gk = vec![T::zero(); kd.len()];
        let mut gv = vec![T::zero(); vd.len()];
        for bi in 0..b {
            for h in 0..heads {
                let p = &probs[(bi * heads + h) * nq * nk..(bi * heads + h + 1) * nq * nk];
                let go = gather_head(g, bi, nq, d, h, dh);
                let vh = gather_head(vd, bi, nk, d, h, dh);
                // dV = Pᵀ · dO
                let pt = kernels::transpose(p, nq, nk);
                scatter_head(&mut gv, &kernels::matmul(&pt, &go, nk, nq, dh), bi, nk, d, h, dh);
                // dP = dO · Vᵀ, then through the row softmax and the scale
                let vt = kernels::transpose(&vh, nk, dh);
                let dp = kernels::matmul(&go, &vt, nq, dh, nk);
                let mut ds = kernels::softmax_rows_backward(p, &dp, nk);
                for s in ds.iter_mut() {
                    *s *= scale;
                }
                let kh = gather_head(kd, bi, nk, d, h, dh);
                let qh = gather_head(qd, bi, nq, d, h, dh);
                scatter_head(&mut gq, &kernels::matmul(&ds, &kh, nq, nk, dh), bi, nq, d, h, dh);
                let dst = kernels::transpose(&ds, nq, nk);
                scatter_head(&mut gk, &kernels::matmul(&dst, &qh, nk, nq, dh), bi, nk, d, h, dh);
            }
        }
        self.accumulate(grads, q, gq);
        self.accumulate(grads, k, gk);
        self.accumulate(grads, v, gv);
    }
}

/// Copies head `h` of batch item `bi` out of a `B×N×d` buffer into `N×dh`.
fn gather_head<T: Element>(src: &[T], bi: usize, n: usize, d: usize, h: usize, dh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * dh);
    for t in 0..n {
        let base = (bi * n + t) * d + h * dh;
        out.extend_from_slice(&src[base..base + dh]);
    }
    out
}

/// Adds an `N×dh` head block back into a `B×N×d` buffer.
fn scatter_head<T: Element>(dst: &mut [T], src: &[T], bi: usize, n: usize, d: usize, h: usize, dh: usize) {
    for t in 0..n {
        let base = (bi * n + t) * d + h * dh;
        for (o, &s) in dst[base..base + dh].iter_mut().zip(&src[t * dh..(t + 1) * dh]) {
            *o += s;
        }
    }
}
