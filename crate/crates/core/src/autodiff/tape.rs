//! Reverse-mode differentiation tape.
//!
//! Every primitive appends one node holding its output value and the data
//! its backward rule needs. `backward` walks the nodes once, newest first.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::tensor::{numel, split_axis, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddSuffix(usize, usize),
    MulSuffix(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MulScalarVar(usize, usize),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    BatchMatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    Concat(Vec<usize>, usize),
    Narrow { a: usize, axis: usize, start: usize },
    IndexSelect { a: usize, axis: usize, indices: Rc<Vec<usize>> },
    BroadcastTo(usize),
    Dropout(usize, Vec<T>),
    Gather(usize, Rc<Vec<usize>>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitive operations for one forward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient w.r.t. `v`, zero-filled when untouched.
    pub fn get_or_zero(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn check_suffix(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(Error::shape(op, format!("{b:?} is not a suffix of {a:?}")));
    }
    Ok(())
}

fn gelu_cdf<T: Scalar>(x: T) -> T {
    lit::<T>(0.5) * (T::one() + (x * lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_pdf<T: Scalar>(x: T) -> T {
    (-(x * x) * lit(0.5)).exp() * lit(1.0 / (2.0 * std::f64::consts::PI).sqrt())
}

/// Row-major permutation of `data` with shape `shape` by `perm`.
fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    // inner loop over the last output axis
    let last = rank - 1;
    let last_extent = out_shape[last];
    let last_stride = strides[last];
    while out.len() < n {
        let mut o = off;
        for _ in 0..last_extent {
            out.push(data[o]);
            o += last_stride;
        }
        // advance odometer on axes < last
        let mut ax = last;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Copies the value of `v` out of the tape.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        self.value(v).clone()
    }

    /// Adds a leaf. Leaves may hold `-inf` (softmax masking); NaN is rejected.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        assert!(value.data().iter().all(|v| !v.is_nan()), "NaN in leaf tensor");
        self.push_unchecked(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push_unchecked(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn push(&self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_unchecked(value, op, rg))
    }

    fn unary(&self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(name, out, op, &[a.0])
    }

    fn binary_same(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            check_same(name, va.shape(), vb.shape())?;
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(va.shape().to_vec(), data)
        };
        self.push(name, out, op, &[a.0, b.0])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias broadcast).
    pub fn add_broadcast(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            check_suffix("add_broadcast", va.shape(), vb.shape())?;
            let bd = vb.data();
            let m = bd.len();
            let data = va.data().iter().enumerate().map(|(i, &x)| x + bd[i % m]).collect();
            Tensor::from_parts(va.shape().to_vec(), data)
        };
        self.push("add_broadcast", out, Op::AddSuffix(a.0, b.0), &[a.0, b.0])
    }

    /// `a * b` where `b`'s shape is a suffix of `a`'s.
    pub fn mul_broadcast(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            check_suffix("mul_broadcast", va.shape(), vb.shape())?;
            let bd = vb.data();
            let m = bd.len();
            let data = va.data().iter().enumerate().map(|(i, &x)| x * bd[i % m]).collect();
            Tensor::from_parts(va.shape().to_vec(), data)
        };
        self.push("mul_broadcast", out, Op::MulSuffix(a.0, b.0), &[a.0, b.0])
    }

    pub fn scale(&self, a: Var, c: T) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a.0))
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn mul_scalar_var(&self, a: Var, s: Var) -> Result<Var> {
        let out = {
            let (va, vs) = (self.value(a), self.value(s));
            if vs.numel() != 1 {
                return Err(Error::shape("mul_scalar_var", format!("scalar has shape {:?}", vs.shape())));
            }
            let c = vs.item();
            va.map(|x| x * c)
        };
        self.push("mul_scalar_var", out, Op::MulScalarVar(a.0, s.0), &[a.0, s.0])
    }

    /// `a[..., k] @ b[k, n] -> [..., n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (out, m, k, n) = {
            let (va, vb) = (self.value(a), self.value(b));
            if vb.rank() != 2 || va.rank() < 1 || va.shape()[va.rank() - 1] != vb.shape()[0] {
                return Err(Error::shape("matmul", format!("{:?} x {:?}", va.shape(), vb.shape())));
            }
            let k = vb.shape()[0];
            let n = vb.shape()[1];
            let m = va.numel() / k;
            let mut out = vec![T::zero(); m * n];
            matmul_kernel(va.data(), vb.data(), &mut out, m, k, n);
            let mut shape = va.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            (Tensor::from_parts(shape, out), m, k, n)
        };
        self.push("matmul", out, Op::MatMul { a: a.0, b: b.0, m, k, n }, &[a.0, b.0])
    }

    /// Batched product over matching leading dims. With `trans_b`, `b` is
    /// `[..., n, k]` and the product is `a @ b^T`.
    pub fn batch_matmul(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (out, batch, m, k, n) = {
            let (va, vb) = (self.value(a), self.value(b));
            let (sa, sb) = (va.shape(), vb.shape());
            let r = sa.len();
            if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
                return Err(Error::shape("batch_matmul", format!("{sa:?} x {sb:?}")));
            }
            let (m, k) = (sa[r - 2], sa[r - 1]);
            let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
            if k != kb {
                return Err(Error::shape("batch_matmul", format!("{sa:?} x {sb:?} (trans_b={trans_b})")));
            }
            let batch = numel(&sa[..r - 2]);
            let mut out = vec![T::zero(); batch * m * n];
            let (ad, bd) = (va.data(), vb.data());
            for bi in 0..batch {
                let a_s = &ad[bi * m * k..(bi + 1) * m * k];
                let b_s = &bd[bi * k * n..(bi + 1) * k * n];
                let o_s = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    for i in 0..m {
                        let ar = &a_s[i * k..(i + 1) * k];
                        for j in 0..n {
                            o_s[i * n + j] = dot(ar, &b_s[j * k..(j + 1) * k]);
                        }
                    }
                } else {
                    matmul_kernel(a_s, b_s, o_s, m, k, n);
                }
            }
            let mut shape = sa[..r - 2].to_vec();
            shape.extend([m, n]);
            (Tensor::from_parts(shape, out), batch, m, k, n)
        };
        self.push(
            "batch_matmul",
            out,
            Op::BatchMatMul { a: a.0, b: b.0, batch, m, k, n, trans_b },
            &[a.0, b.0],
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a.0), &[a.0])
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = {
            let va = self.value(a);
            let r = va.rank();
            let mut seen = vec![false; r];
            if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::shape("permute", format!("{perm:?} on rank {r}")));
            }
            let (shape, data) = permute_data(va.data(), va.shape(), perm);
            Tensor::from_parts(shape, data)
        };
        self.push("permute", out, Op::Permute(a.0, perm.to_vec()), &[a.0])
    }

    /// Softmax along the last axis. `-inf` inputs map to exactly zero.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        self.masked_softmax(a, None)
    }

    /// Softmax along the last axis with an optional boolean mask of shape
    /// `[rows, n]`, broadcast over leading dims (row `r` of the flattened
    /// input uses mask row `r % rows`). Disallowed entries get weight 0.
    pub fn masked_softmax(&self, a: Var, mask: Option<(&[bool], usize)>) -> Result<Var> {
        let out = {
            let va = self.value(a);
            let n = *va.shape().last().unwrap();
            let rows = va.numel() / n;
            if let Some((m, mrows)) = mask {
                if m.len() != mrows * n || rows % mrows != 0 {
                    return Err(Error::shape("softmax", format!("mask {mrows}x{} vs input {:?}", m.len() / mrows.max(1), va.shape())));
                }
            }
            let x = va.data();
            let mut y = vec![T::zero(); x.len()];
            for r in 0..rows {
                let xr = &x[r * n..(r + 1) * n];
                let mr = mask.map(|(m, mrows)| &m[(r % mrows) * n..(r % mrows + 1) * n]);
                let allowed = |j: usize| mr.is_none_or(|m| m[j]) && xr[j] != T::neg_infinity();
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    if allowed(j) && xr[j] > mx {
                        mx = xr[j];
                    }
                }
                if mx == T::neg_infinity() {
                    return Err(Error::DegenerateMask { row: mask.map_or(r, |(_, mrows)| r % mrows) });
                }
                let yr = &mut y[r * n..(r + 1) * n];
                let mut s = T::zero();
                for j in 0..n {
                    if allowed(j) {
                        let e = (xr[j] - mx).exp();
                        yr[j] = e;
                        s += e;
                    }
                }
                for v in yr.iter_mut() {
                    *v /= s;
                }
            }
            Tensor::from_parts(va.shape().to_vec(), y)
        };
        self.push("softmax", out, Op::Softmax(a.0), &[a.0])
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&self, a: Var) -> Result<Var> {
        let out = {
            let va = self.value(a);
            let n = *va.shape().last().unwrap();
            let mut y = va.data().to_vec();
            for row in y.chunks_mut(n) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            Tensor::from_parts(va.shape().to_vec(), y)
        };
        self.push("log_softmax", out, Op::LogSoftmax(a.0), &[a.0])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (out, xhat, rstd) = {
            let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
            let d = *vx.shape().last().unwrap();
            if d < 2 || vg.shape() != [d] || vb.shape() != [d] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("x {:?}, gamma {:?}, beta {:?}", vx.shape(), vg.shape(), vb.shape()),
                ));
            }
            let rows = vx.numel() / d;
            let inv_d = T::one() / T::from_usize_c(d);
            let mut xhat = vec![T::zero(); vx.numel()];
            let mut rstd = vec![T::zero(); rows];
            let mut y = vec![T::zero(); vx.numel()];
            for r in 0..rows {
                let xr = &vx.data()[r * d..(r + 1) * d];
                let mean = xr.iter().copied().sum::<T>() * inv_d;
                let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                let rs = T::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (xr[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    y[r * d + j] = h * vg.data()[j] + vb.data()[j];
                }
            }
            (Tensor::from_parts(vx.shape().to_vec(), y), xhat, rstd)
        };
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, rstd },
            &[x.0, gamma.0, beta.0],
        )
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        self.unary("gelu", a, |x| x * gelu_cdf(x), Op::Gelu(a.0))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary("tanh", a, |x| x.tanh(), Op::Tanh(a.0))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary("exp", a, |x| x.exp(), Op::Exp(a.0))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary("log", a, |x| x.ln(), Op::Log(a.0))
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, |x| x.sqrt(), Op::Sqrt(a.0))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(T::zero()), Op::Relu(a.0))
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let out = {
            let va = self.value(a);
            Tensor::scalar(va.sum() / T::from_usize_c(va.numel()))
        };
        self.push("mean", out, Op::Mean(a.0), &[a.0])
    }

    /// Sums out `axis` (the axis is removed; rank-1 inputs give shape `[1]`).
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let out = {
            let va = self.value(a);
            if axis >= va.rank() {
                return Err(Error::shape("sum_axis", format!("axis {axis} on {:?}", va.shape())));
            }
            let (outer, dim, inner) = split_axis(va.shape(), axis);
            let mut o = vec![T::zero(); outer * inner];
            let x = va.data();
            for i in 0..outer {
                for k in 0..dim {
                    let src = &x[(i * dim + k) * inner..(i * dim + k + 1) * inner];
                    let dst = &mut o[i * inner..(i + 1) * inner];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            let mut shape = va.shape().to_vec();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            Tensor::from_parts(shape, o)
        };
        self.push("sum_axis", out, Op::SumAxis(a.0, axis), &[a.0])
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let n = self.value(a).shape().get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(a, axis)?;
        self.scale(s, T::one() / T::from_usize_c(n))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let out = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let base = vals[0].shape().to_vec();
            if axis >= base.len() {
                return Err(Error::shape("concat", format!("axis {axis} on {base:?}")));
            }
            let mut total = 0;
            for v in &vals {
                let s = v.shape();
                if s.len() != base.len()
                    || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
                {
                    return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
                }
                total += s[axis];
            }
            let (outer, _, inner) = split_axis(&base, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for i in 0..outer {
                for v in &vals {
                    let d = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[i * d..(i + 1) * d]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            Tensor::from_parts(shape, data)
        };
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat", out, Op::Concat(idx.clone(), axis), &idx)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = {
            let va = self.value(a);
            if axis >= va.rank() || len == 0 || start + len > va.shape()[axis] {
                return Err(Error::shape("narrow", format!("{start}+{len} on axis {axis} of {:?}", va.shape())));
            }
            let (outer, dim, inner) = split_axis(va.shape(), axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for i in 0..outer {
                let base = (i * dim + start) * inner;
                data.extend_from_slice(&va.data()[base..base + len * inner]);
            }
            let mut shape = va.shape().to_vec();
            shape[axis] = len;
            Tensor::from_parts(shape, data)
        };
        self.push("narrow", out, Op::Narrow { a: a.0, axis, start }, &[a.0])
    }

    /// Gathers `indices` along `axis` (embedding lookup, query extraction).
    pub fn index_select(&self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let out = {
            let va = self.value(a);
            if axis >= va.rank() || indices.is_empty() || indices.iter().any(|&i| i >= va.shape()[axis]) {
                return Err(Error::shape("index_select", format!("{indices:?} on axis {axis} of {:?}", va.shape())));
            }
            let (outer, dim, inner) = split_axis(va.shape(), axis);
            let mut data = Vec::with_capacity(outer * indices.len() * inner);
            for o in 0..outer {
                for &ix in indices {
                    let base = (o * dim + ix) * inner;
                    data.extend_from_slice(&va.data()[base..base + inner]);
                }
            }
            let mut shape = va.shape().to_vec();
            shape[axis] = indices.len();
            Tensor::from_parts(shape, data)
        };
        let op = Op::IndexSelect { a: a.0, axis, indices: Rc::new(indices.to_vec()) };
        self.push("index_select", out, op, &[a.0])
    }

    /// Repeats `a` over new leading dims so the result has `shape`
    /// (`a`'s shape must be a suffix of `shape`).
    pub fn broadcast_to(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = {
            let va = self.value(a);
            check_suffix("broadcast_to", shape, va.shape())?;
            let reps = numel(shape) / va.numel();
            let mut data = Vec::with_capacity(numel(shape));
            for _ in 0..reps {
                data.extend_from_slice(va.data());
            }
            Tensor::from_parts(shape.to_vec(), data)
        };
        self.push("broadcast_to", out, Op::BroadcastTo(a.0), &[a.0])
    }

    /// Multiplies by a precomputed inverted-dropout mask (entries 0 or 1/(1-p)).
    pub fn dropout_with_mask(&self, a: Var, mask: Vec<T>) -> Result<Var> {
        let out = {
            let va = self.value(a);
            if mask.len() != va.numel() {
                return Err(Error::shape("dropout", "mask length"));
            }
            let data = va.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
            Tensor::from_parts(va.shape().to_vec(), data)
        };
        self.push("dropout", out, Op::Dropout(a.0, mask), &[a.0])
    }

    /// For `a: [N, C]` picks `a[i, idx[i]]`, giving `[N]`.
    pub fn gather_last(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let out = {
            let va = self.value(a);
            let c = *va.shape().last().unwrap();
            let n = va.numel() / c;
            if idx.len() != n || idx.iter().any(|&i| i >= c) {
                return Err(Error::shape("gather_last", format!("{} indices into {:?}", idx.len(), va.shape())));
            }
            let data = idx.iter().enumerate().map(|(i, &j)| va.data()[i * c + j]).collect();
            Tensor::from_parts(vec![n], data)
        };
        self.push("gather_last", out, Op::Gather(a.0, Rc::new(idx.to_vec())), &[a.0])
    }

    /// Gradients of the scalar `loss` w.r.t. every node that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let lshape = nodes[loss.0].value.shape();
        if numel(lshape) != 1 {
            return Err(Error::NonScalarLoss(lshape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            backprop(&nodes, node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `out[m,n] += a[m,k] @ b[k,n]`.
fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != T::zero() {
                axpy(av, &b[p * n..(p + 1) * n], o);
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], idx: usize, f: impl FnOnce(&mut [T])) {
    if !nodes[idx].requires_grad {
        return;
    }
    let g = grads[idx].get_or_insert_with(|| vec![T::zero(); nodes[idx].value.numel()]);
    f(g);
}

fn add_into<T: Scalar>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], idx: usize, src: &[T]) {
    accumulate(grads, nodes, idx, |g| {
        for (a, &b) in g.iter_mut().zip(src) {
            *a += b;
        }
    });
}

fn backprop<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
    let val = |i: usize| nodes[i].value.data();
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            add_into(grads, nodes, *a, g);
            add_into(grads, nodes, *b, g);
        }
        Op::Sub(a, b) => {
            add_into(grads, nodes, *a, g);
            accumulate(grads, nodes, *b, |gb| {
                for (d, &s) in gb.iter_mut().zip(g) {
                    *d -= s;
                }
            });
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * vb[i];
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] += g[i] * va[i];
                }
            });
        }
        Op::AddSuffix(a, b) => {
            add_into(grads, nodes, *a, g);
            accumulate(grads, nodes, *b, |gb| {
                let m = gb.len();
                for (i, &s) in g.iter().enumerate() {
                    gb[i % m] += s;
                }
            });
        }
        Op::MulSuffix(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let m = vb.len();
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * vb[i % m];
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for i in 0..g.len() {
                    gb[i % m] += g[i] * va[i];
                }
            });
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, |ga| axpy(*c, g, ga)),
        Op::AddScalar(a) | Op::Reshape(a) => add_into(grads, nodes, *a, g),
        Op::BroadcastTo(a) => accumulate(grads, nodes, *a, |ga| {
            let m = ga.len();
            for (i, &s) in g.iter().enumerate() {
                ga[i % m] += s;
            }
        }),
        Op::MulScalarVar(a, s) => {
            let c = val(*s)[0];
            let va = val(*a);
            accumulate(grads, nodes, *a, |ga| axpy(c, g, ga));
            accumulate(grads, nodes, *s, |gs| gs[0] += dot(g, va));
        }
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (va, vb) = (val(*a), val(*b));
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        ga[i * k + p] += dot(gr, &vb[p * n..(p + 1) * n]);
                    }
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = va[i * k + p];
                        if av != T::zero() {
                            axpy(av, gr, &mut gb[p * n..(p + 1) * n]);
                        }
                    }
                }
            });
        }
        Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            let (va, vb) = (val(*a), val(*b));
            accumulate(grads, nodes, *a, |ga| {
                for bi in 0..batch {
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    let bs = &vb[bi * k * n..(bi + 1) * k * n];
                    let gas = &mut ga[bi * m * k..(bi + 1) * m * k];
                    for i in 0..m {
                        let gr = &gs[i * n..(i + 1) * n];
                        if *trans_b {
                            // ga[i,:] += sum_j g[i,j] b[j,:]
                            for j in 0..n {
                                if gr[j] != T::zero() {
                                    axpy(gr[j], &bs[j * k..(j + 1) * k], &mut gas[i * k..(i + 1) * k]);
                                }
                            }
                        } else {
                            for p in 0..k {
                                gas[i * k + p] += dot(gr, &bs[p * n..(p + 1) * n]);
                            }
                        }
                    }
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for bi in 0..batch {
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    let as_ = &va[bi * m * k..(bi + 1) * m * k];
                    let gbs = &mut gb[bi * k * n..(bi + 1) * k * n];
                    for i in 0..m {
                        let gr = &gs[i * n..(i + 1) * n];
                        let ar = &as_[i * k..(i + 1) * k];
                        if *trans_b {
                            // gb[j,:] += g[i,j] a[i,:]
                            for j in 0..n {
                                if gr[j] != T::zero() {
                                    axpy(gr[j], ar, &mut gbs[j * k..(j + 1) * k]);
                                }
                            }
                        } else {
                            for p in 0..k {
                                if ar[p] != T::zero() {
                                    axpy(ar[p], gr, &mut gbs[p * n..(p + 1) * n]);
                                }
                            }
                        }
                    }
                }
            });
        }
        Op::Permute(a, perm) => {
            let inv = inverse_perm(perm);
            let (_, back) = permute_data(g, node.value.shape(), &inv);
            add_into(grads, nodes, *a, &back);
        }
        Op::Softmax(a) => {
            let n = *node.value.shape().last().unwrap();
            accumulate(grads, nodes, *a, |ga| {
                for r in 0..y.len() / n {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let s = dot(yr, gr);
                    for j in 0..n {
                        ga[r * n + j] += yr[j] * (gr[j] - s);
                    }
                }
            });
        }
        Op::LogSoftmax(a) => {
            let n = *node.value.shape().last().unwrap();
            accumulate(grads, nodes, *a, |ga| {
                for r in 0..y.len() / n {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let s: T = gr.iter().copied().sum();
                    for j in 0..n {
                        ga[r * n + j] += gr[j] - yr[j].exp() * s;
                    }
                }
            });
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let gam = val(*gamma);
            let d = gam.len();
            let rows = rstd.len();
            let inv_d = T::one() / T::from_usize_c(d);
            accumulate(grads, nodes, *x, |gx| {
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        let gh = gr[j] * gam[j];
                        m1 += gh;
                        m2 += gh * hr[j];
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for j in 0..d {
                        gx[r * d + j] += rstd[r] * (gr[j] * gam[j] - m1 - hr[j] * m2);
                    }
                }
            });
            accumulate(grads, nodes, *gamma, |gg| {
                for (i, &s) in g.iter().enumerate() {
                    gg[i % d] += s * xhat[i];
                }
            });
            accumulate(grads, nodes, *beta, |gb| {
                for (i, &s) in g.iter().enumerate() {
                    gb[i % d] += s;
                }
            });
        }
        Op::Gelu(a) => {
            let xa = val(*a);
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..ga.len() {
                    let x = xa[i];
                    ga[i] += g[i] * (gelu_cdf(x) + x * gelu_pdf(x));
                }
            });
        }
        Op::Tanh(a) => accumulate(grads, nodes, *a, |ga| {
            for i in 0..ga.len() {
                ga[i] += g[i] * (T::one() - y[i] * y[i]);
            }
        }),
        Op::Exp(a) => accumulate(grads, nodes, *a, |ga| {
            for i in 0..ga.len() {
                ga[i] += g[i] * y[i];
            }
        }),
        Op::Log(a) => {
            let xa = val(*a);
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] / xa[i];
                }
            });
        }
        Op::Sqrt(a) => accumulate(grads, nodes, *a, |ga| {
            for i in 0..ga.len() {
                ga[i] += g[i] / (y[i] + y[i]);
            }
        }),
        Op::Relu(a) => {
            let xa = val(*a);
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..ga.len() {
                    if xa[i] > T::zero() {
                        ga[i] += g[i];
                    }
                }
            });
        }
        Op::Sum(a) => accumulate(grads, nodes, *a, |ga| {
            for v in ga.iter_mut() {
                *v += g[0];
            }
        }),
        Op::Mean(a) => accumulate(grads, nodes, *a, |ga| {
            let c = g[0] / T::from_usize_c(ga.len());
            for v in ga.iter_mut() {
                *v += c;
            }
        }),
        Op::SumAxis(a, axis) => {
            let (outer, dim, inner) = split_axis(nodes[*a].value.shape(), *axis);
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..outer {
                    let src = &g[i * inner..(i + 1) * inner];
                    for k in 0..dim {
                        let base = (i * dim + k) * inner;
                        for (d, &s) in ga[base..base + inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            });
        }
        Op::Concat(parts, axis) => {
            let (outer, total, inner) = split_axis(node.value.shape(), *axis);
            let mut off = 0;
            for &p in parts {
                let dp = nodes[p].value.shape()[*axis];
                accumulate(grads, nodes, p, |gp| {
                    for i in 0..outer {
                        let src = &g[(i * total + off) * inner..(i * total + off + dp) * inner];
                        for (d, &s) in gp[i * dp * inner..(i + 1) * dp * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
                off += dp;
            }
        }
        Op::Narrow { a, axis, start } => {
            let (outer, dim, inner) = split_axis(nodes[*a].value.shape(), *axis);
            let len = node.value.shape()[*axis];
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..outer {
                    let base = (i * dim + start) * inner;
                    for (d, &s) in ga[base..base + len * inner].iter_mut().zip(&g[i * len * inner..(i + 1) * len * inner]) {
                        *d += s;
                    }
                }
            });
        }
        Op::IndexSelect { a, axis, indices } => {
            let (outer, dim, inner) = split_axis(nodes[*a].value.shape(), *axis);
            let cnt = indices.len();
            accumulate(grads, nodes, *a, |ga| {
                for o in 0..outer {
                    for (k, &ix) in indices.iter().enumerate() {
                        let src = &g[(o * cnt + k) * inner..(o * cnt + k + 1) * inner];
                        let base = (o * dim + ix) * inner;
                        for (d, &s) in ga[base..base + inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            });
        }
        Op::Dropout(a, mask) => accumulate(grads, nodes, *a, |ga| {
            for i in 0..ga.len() {
                ga[i] += g[i] * mask[i];
            }
        }),
        Op::Gather(a, idx) => {
            let c = *nodes[*a].value.shape().last().unwrap();
            accumulate(grads, nodes, *a, |ga| {
                for (i, &j) in idx.iter().enumerate() {
                    ga[i * c + j] += g[i];
                }
            });
        }
    }
    Ok(())
}
