use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, domain, Result};
use crate::scalar::Scalar;

/// Dense row-major array. A rank-0 tensor (empty shape) holds one scalar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Elementwise kinds understood by [`Tensor::elementwise`] and the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Tanh,
    Relu,
    Square,
    Sqrt,
    Negate,
    Softplus,
    Sigmoid,
    Abs,
}

impl ElementwiseOp {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul | Self::Div)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Div => "div",
            Self::Exp => "exp",
            Self::Log => "log",
            Self::Tanh => "tanh",
            Self::Relu => "relu",
            Self::Square => "square",
            Self::Sqrt => "sqrt",
            Self::Negate => "negate",
            Self::Softplus => "softplus",
            Self::Sigmoid => "sigmoid",
            Self::Abs => "abs",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
    LogSumExp,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

/// Strides of `shape` viewed as broadcast into `target` (numpy rules:
/// trailing alignment, singleton dimensions get stride 0).
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let offset = target.len() - shape.len();
    let mut out = vec![0; target.len()];
    for (k, &d) in shape.iter().enumerate() {
        out[offset + k] = if d == 1 { 0 } else { own[k] };
    }
    out
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for k in 0..n {
        let da = if k + a.len() >= n { a[k + a.len() - n] } else { 1 };
        let db = if k + b.len() >= n { b[k + b.len() - n] } else { 1 };
        out[k] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Visits every multi-index of `shape` in row-major order, passing the
/// linear offsets under two stride sets.
fn walk2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel(shape);
    if n == 0 {
        return;
    }
    if shape.is_empty() {
        f(0, 0);
        return;
    }
    let last = shape.len() - 1;
    let (inner, ia, ib) = (shape[last], sa[last], sb[last]);
    let mut idx = vec![0usize; shape.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    loop {
        for t in 0..inner {
            f(oa + t * ia, ob + t * ib);
        }
        // carry into the outer dimensions
        let mut k = last;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            idx[k] += 1;
            oa += sa[k];
            ob += sb[k];
            if idx[k] < shape[k] {
                break;
            }
            oa -= sa[k] * shape[k];
            ob -= sb[k] * shape[k];
            idx[k] = 0;
        }
    }
}

fn walk3(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    sc: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(shape);
    if n == 0 {
        return;
    }
    if shape.is_empty() {
        f(0, 0, 0);
        return;
    }
    let last = shape.len() - 1;
    let (inner, ia, ib, ic) = (shape[last], sa[last], sb[last], sc[last]);
    let mut idx = vec![0usize; shape.len()];
    let (mut oa, mut ob, mut oc) = (0usize, 0usize, 0usize);
    loop {
        for t in 0..inner {
            f(oa + t * ia, ob + t * ib, oc + t * ic);
        }
        let mut k = last;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            idx[k] += 1;
            oa += sa[k];
            ob += sb[k];
            oc += sc[k];
            if idx[k] < shape[k] {
                break;
            }
            oa -= sa[k] * shape[k];
            ob -= sb[k] * shape[k];
            oc -= sc[k] * shape[k];
            idx[k] = 0;
        }
    }
}

fn normalize_axes(op: &'static str, axes: &[usize], ndim: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; ndim];
    for &a in axes {
        if a >= ndim {
            return Err(contract(op, format!("axis {a} out of range for rank {ndim}")));
        }
        mask[a] = true;
    }
    Ok(mask)
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(contract(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(contract("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        Ok(Self { shape, data })
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(x: T) -> Self {
        Self {
            shape: vec![],
            data: vec![x],
        }
    }

    pub fn full(shape: &[usize], x: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![x; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(contract("item", format!("tensor of shape {:?} is not a scalar", self.shape)));
        }
        Ok(self.data[0])
    }

    fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() || index.iter().zip(&self.shape).any(|(i, d)| i >= d) {
            return Err(contract("index", format!("{index:?} out of bounds for {:?}", self.shape)));
        }
        Ok(index
            .iter()
            .zip(contiguous_strides(&self.shape))
            .map(|(i, s)| i * s)
            .sum())
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], x: T) -> Result<()> {
        let o = self.offset(index)?;
        self.data[o] = x;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(contract(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Broadcasting binary map.
    pub fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape == other.shape {
            return Ok(Self {
                shape: self.shape.clone(),
                data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            });
        }
        let shape = broadcast_shape(&self.shape, &other.shape).ok_or_else(|| {
            contract(op, format!("shapes {:?} and {:?} do not broadcast", self.shape, other.shape))
        })?;
        let sa = broadcast_strides(&self.shape, &shape);
        let sb = broadcast_strides(&other.shape, &shape);
        let mut data = Vec::with_capacity(numel(&shape));
        walk2(&shape, &sa, &sb, |ia, ib| data.push(f(self.data[ia], other.data[ib])));
        Ok(Self { shape, data })
    }

    /// Materializes the broadcast of `self` to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        match broadcast_shape(&self.shape, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(contract(
                    "broadcast_to",
                    format!("{:?} does not broadcast to {shape:?}", self.shape),
                ))
            }
        }
        let sa = broadcast_strides(&self.shape, shape);
        let mut data = Vec::with_capacity(numel(shape));
        walk2(shape, &sa, &sa, |ia, _| data.push(self.data[ia]));
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Sums a broadcast result back down to `shape` (the adjoint of
    /// [`Tensor::broadcast_to`]).
    pub fn sum_to_shape(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        match broadcast_shape(shape, &self.shape) {
            Some(s) if s == self.shape => {}
            _ => {
                return Err(contract(
                    "sum_to_shape",
                    format!("{:?} is not a broadcast of {shape:?}", self.shape),
                ))
            }
        }
        let so = broadcast_strides(shape, &self.shape);
        let si = contiguous_strides(&self.shape);
        let mut data = vec![T::zero(); numel(shape)];
        walk2(&self.shape, &so, &si, |io, ii| data[io] += self.data[ii]);
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Applies an elementwise kind; `other` is required for binary kinds.
    pub fn elementwise(&self, op: ElementwiseOp, other: Option<&Self>) -> Result<Self> {
        use ElementwiseOp::*;
        if op.is_binary() {
            let b = other.ok_or_else(|| contract(op.name(), "binary op needs a second operand"))?;
            return match op {
                Add => self.zip_with(b, "add", |x, y| x + y),
                Sub => self.zip_with(b, "sub", |x, y| x - y),
                Mul => self.zip_with(b, "mul", |x, y| x * y),
                Div => {
                    if b.data.iter().any(|&y| y == T::zero()) {
                        return Err(domain("div", "zero denominator"));
                    }
                    self.zip_with(b, "div", |x, y| x / y)
                }
                _ => unreachable!(),
            };
        }
        if other.is_some() {
            return Err(contract(op.name(), "unary op takes a single operand"));
        }
        Ok(match op {
            Exp => self.map(|x| x.exp()),
            Log => {
                if let Some(x) = self.data.iter().find(|&&x| !(x > T::zero())) {
                    return Err(domain("log", format!("non-positive input {x}")));
                }
                self.map(|x| x.ln())
            }
            Tanh => self.map(|x| x.tanh()),
            Relu => self.map(|x| if x > T::zero() { x } else { T::zero() }),
            Square => self.map(|x| x * x),
            Sqrt => {
                if let Some(x) = self.data.iter().find(|&&x| !(x > T::zero())) {
                    return Err(domain("sqrt", format!("non-positive input {x}")));
                }
                self.map(|x| x.sqrt())
            }
            Negate => self.map(|x| -x),
            Softplus => self.map(crate::scalar::softplus),
            Sigmoid => self.map(crate::scalar::sigmoid),
            Abs => self.map(|x| x.abs()),
            Add | Sub | Mul | Div => unreachable!(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |x, y| x + y)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |x, y| x - y)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |x, y| x * y)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.elementwise(ElementwiseOp::Div, Some(other))
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn reduced_shape(&self, axes: &[usize], keepdims: bool) -> Result<Vec<usize>> {
        let mask = normalize_axes("reduce", axes, self.ndim())?;
        Ok(self
            .shape
            .iter()
            .zip(&mask)
            .filter_map(|(&d, &m)| match (m, keepdims) {
                (true, true) => Some(1),
                (true, false) => None,
                (false, _) => Some(d),
            })
            .collect())
    }

    /// Reduces over `axes` (all axes when empty is NOT implied; pass every
    /// axis explicitly, or use [`Tensor::sum_all`]).
    pub fn reduce(&self, op: ReduceOp, axes: &[usize], keepdims: bool) -> Result<Self> {
        let mask = normalize_axes("reduce", axes, self.ndim())?;
        let kept: Vec<usize> = self
            .shape
            .iter()
            .zip(&mask)
            .map(|(&d, &m)| if m { 1 } else { d })
            .collect();
        let so = broadcast_strides(&kept, &self.shape);
        let si = contiguous_strides(&self.shape);
        let n_out = numel(&kept);
        let count = self.data.len() / n_out;
        let data = match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                let mut acc = vec![T::zero(); n_out];
                walk2(&self.shape, &so, &si, |io, ii| acc[io] += self.data[ii]);
                if op == ReduceOp::Mean {
                    let c = T::from_usize_lossy(count);
                    acc.iter_mut().for_each(|x| *x /= c);
                }
                acc
            }
            ReduceOp::Max => {
                let mut acc = vec![T::neg_infinity(); n_out];
                walk2(&self.shape, &so, &si, |io, ii| {
                    if self.data[ii] > acc[io] {
                        acc[io] = self.data[ii];
                    }
                });
                acc
            }
            ReduceOp::LogSumExp => {
                let mut m = vec![T::neg_infinity(); n_out];
                walk2(&self.shape, &so, &si, |io, ii| {
                    if self.data[ii] > m[io] {
                        m[io] = self.data[ii];
                    }
                });
                let mut s = vec![T::zero(); n_out];
                walk2(&self.shape, &so, &si, |io, ii| {
                    if m[io].is_finite() {
                        s[io] += (self.data[ii] - m[io]).exp();
                    }
                });
                m.iter()
                    .zip(&s)
                    .map(|(&mx, &sx)| if mx.is_finite() { mx + sx.ln() } else { mx })
                    .collect()
            }
        };
        let shape = self.reduced_shape(axes, keepdims)?;
        Ok(Self { shape, data })
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_all(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    /// Row-major matrix product `a @ b` for 2-D operands.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape[1] != other.shape[0] {
            return Err(contract(
                "matmul",
                format!("cannot multiply {:?} by {:?}", self.shape, other.shape),
            ));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        let a = &self.data;
        let b = &other.data;
        let row = |(i, c): (usize, &mut [T])| {
            let ai = &a[i * k..(i + 1) * k];
            for (p, &aip) in ai.iter().enumerate() {
                if aip == T::zero() {
                    continue;
                }
                let bp = &b[p * n..(p + 1) * n];
                for (cj, &bpj) in c.iter_mut().zip(bp) {
                    *cj += aip * bpj;
                }
            }
        };
        if m * k * n >= 1 << 16 {
            out.par_chunks_mut(n).enumerate().for_each(row);
        } else {
            out.chunks_mut(n).enumerate().for_each(row);
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose2(&self) -> Result<Self> {
        if self.ndim() != 2 {
            return Err(contract("transpose", format!("rank {} is not 2", self.ndim())));
        }
        self.permute(&[1, 0])
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let n = self.ndim();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(contract("permute", format!("{perm:?} is not a permutation of rank {n}")));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let own = contiguous_strides(&self.shape);
        let src: Vec<usize> = perm.iter().map(|&p| own[p]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        walk2(&shape, &src, &src, |i, _| data.push(self.data[i]));
        Ok(Self { shape, data })
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.ndim() || len == 0 || start + len > self.shape[axis] {
            return Err(contract(
                "narrow",
                format!("range {start}+{len} on axis {axis} invalid for {:?}", self.shape),
            ));
        }
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        let d = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * d * inner + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, data })
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| contract("concat", "no inputs"))?;
        if axis >= first.ndim() {
            return Err(contract("concat", format!("axis {axis} out of range")));
        }
        for p in parts {
            let same = p.ndim() == first.ndim()
                && p.shape.iter().zip(&first.shape).enumerate().all(|(k, (a, b))| k == axis || a == b);
            if !same {
                return Err(contract(
                    "concat",
                    format!("{:?} incompatible with {:?} on axis {axis}", p.shape, first.shape),
                ));
            }
        }
        let outer = numel(&first.shape[..axis]);
        let inner = numel(&first.shape[axis + 1..]);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self { shape, data })
    }

    /// Contractive n-mode product with a vector: drops dimension `mode`,
    /// `out[.., ..] = sum_c self[.., c, ..] * v[c]`.
    pub fn mode_contract(&self, v: &Self, mode: usize) -> Result<Self> {
        if mode >= self.ndim() {
            return Err(contract("mode_contract", format!("mode {mode} out of range")));
        }
        if v.ndim() != 1 || v.len() != self.shape[mode] {
            return Err(contract(
                "mode_contract",
                format!("vector of shape {:?} vs mode size {}", v.shape, self.shape[mode]),
            ));
        }
        let outer = numel(&self.shape[..mode]);
        let inner = numel(&self.shape[mode + 1..]);
        let c = self.shape[mode];
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for (k, &vk) in v.data.iter().enumerate() {
                let src = &self.data[(o * c + k) * inner..(o * c + k + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s * vk;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(mode);
        Ok(Self { shape, data })
    }

    /// Softmax along one axis, computed with the max-shift.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let lse = self.reduce(ReduceOp::LogSumExp, &[axis], true)?;
        Ok(self.sub(&lse)?.map(|x| x.exp()))
    }

    /// Euclidean norm of the flattened data.
    pub fn norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.to_f64_lossy())).collect(),
        }
    }
}

pub(crate) fn walk_broadcast3<T: Scalar>(
    out_shape: &[usize],
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl FnMut(usize, usize, usize),
) {
    let so = contiguous_strides(out_shape);
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    walk3(out_shape, &so, &sa, &sb, f);
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let z = t(&[1], &[0.0]).elementwise(ElementwiseOp::Tanh, None).unwrap();
        assert_eq!(z.data(), &[0.0]);
        let r = t(&[2], &[-2.0, 3.0]).elementwise(ElementwiseOp::Relu, None).unwrap();
        assert_eq!(r.data(), &[0.0, 3.0]);
        let x = t(&[1], &[1.5]);
        let back = x
            .elementwise(ElementwiseOp::Exp, None)
            .unwrap()
            .elementwise(ElementwiseOp::Log, None)
            .unwrap();
        assert_relative_eq!(back.data()[0], 1.5, epsilon = 1e-15);
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let err = t(&[2], &[1.0, 0.0]).elementwise(ElementwiseOp::Log, None).unwrap_err();
        assert!(err.to_string().contains("log"), "{err}");
        assert!(t(&[1], &[-1.0]).elementwise(ElementwiseOp::Sqrt, None).is_err());
        assert!(t(&[1], &[1.0]).div(&t(&[1], &[0.0])).is_err());
    }

    #[test]
    fn shape_mismatch_is_contract_violation() {
        let e = t(&[2], &[1.0, 2.0]).add(&t(&[3], &[1.0, 2.0, 3.0])).unwrap_err();
        assert!(matches!(e, crate::Error::Contract { .. }));
        assert!(t(&[2], &[1.0, 2.0]).reduce(ReduceOp::Sum, &[1], false).is_err());
    }

    #[test]
    fn reductions() {
        let m = t(&[2, 2], &[1.0, 3.0, 5.0, 7.0]);
        assert_eq!(m.reduce(ReduceOp::Mean, &[1], false).unwrap().data(), &[2.0, 6.0]);
        assert_eq!(m.reduce(ReduceOp::Max, &[0], true).unwrap().shape(), &[1, 2]);
        let big = t(&[2], &[1000.0, 1000.0]);
        let lse = big.reduce(ReduceOp::LogSumExp, &[0], false).unwrap();
        // max-shift identity: 1000 + log(e^0 + e^0)
        assert_relative_eq!(lse.item().unwrap(), 1000.0 + 2f64.ln(), epsilon = 1e-12);
        let sm = t(&[3], &[0.1, -4.0, 2.0]).softmax(0).unwrap();
        assert_relative_eq!(sm.sum_all(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn broadcasting_singletons() {
        let a = t(&[2, 1], &[1.0, 2.0]);
        let b = t(&[3], &[10.0, 20.0, 30.0]);
        let c = a.add(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);
        let back = c.sum_to_shape(&[3]).unwrap();
        assert_eq!(back.data(), &[23.0, 43.0, 63.0]);
    }

    #[test]
    fn mode_contract_examples() {
        let w = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let v = t(&[2], &[0.3, 0.7]);
        assert_eq!(w.mode_contract(&v, 0).unwrap().data(), &[0.3, 0.7]);
        let w = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let u = t(&[3], &[1.0 / 3.0; 3]);
        let c = w.mode_contract(&u, 1).unwrap();
        let m = w.reduce(ReduceOp::Mean, &[1], false).unwrap();
        for (x, y) in c.data().iter().zip(m.data()) {
            assert_relative_eq!(x, y, epsilon = 1e-14);
        }
        assert!(w.mode_contract(&v, 1).is_err());
    }

    #[test]
    fn narrow_concat_permute() {
        let m = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let a = m.narrow(1, 0, 1).unwrap();
        let b = m.narrow(1, 1, 2).unwrap();
        assert_eq!(Tensor::concat(&[&a, &b], 1).unwrap(), m);
        assert_eq!(m.transpose2().unwrap().data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let p = t(&[2, 3], &[0.0; 6]).permute(&[0, 0]);
        assert!(p.is_err());
    }

    #[test]
    fn matmul_small() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[1.0, 1.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
        assert!(b.matmul(&b).is_err());
    }
}
