//! Dense row-major tensors over `f32` or `f64`.
//!
//! Every layer above this one (autodiff, attention, the backbone) is generic
//! over [`Elem`], so numeric precision is chosen at the point where tensors
//! are constructed: `f64` for gradient checking, `f32` for training and
//! checkpoints. Operations are pure: they borrow their inputs and return a
//! freshly allocated result. Element storage sits behind an `Arc`, so
//! cloning a tensor is O(1) and mutation copies only when the buffer is
//! shared.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Element width of a tensor, recorded per entry in checkpoint manifests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scalar element type. Implemented for `f32` and `f64` only.
pub trait Elem:
    num_traits::Float + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Gauss error function, used by the exact GELU.
    fn erf(self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one element from `bytes`, which must hold exactly
    /// `PRECISION.bytes()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Elem for f32 {
    const PRECISION: Precision = Precision::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Elem for f64 {
    const PRECISION: Precision = Precision::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements but {actual} were provided")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {shape:?} has a zero-sized dimension")]
    ZeroDim { shape: Vec<usize> },
    #[error("{op}: shapes {lhs:?} and {rhs:?} are incompatible on axis {axis}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
        axis: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("reshape: {from:?} has {from_elems} elements, {to:?} has {to_elems}")]
    ReshapeCount {
        from: Vec<usize>,
        to: Vec<usize>,
        from_elems: usize,
        to_elems: usize,
    },
    #[error("axis {axis} out of range for rank-{rank} tensor")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("matmul: inner dimensions differ ({lhs} vs {rhs})")]
    InnerDim { lhs: usize, rhs: usize },
    #[error("matmul: batch dimensions {lhs:?} and {rhs:?} differ")]
    BatchDims { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("transpose: {perm:?} is not a permutation of 0..{rank}")]
    BadPermutation { perm: Vec<usize>, rank: usize },
    #[error("slice: {start}..{end} out of bounds for axis {axis} of length {len}")]
    SliceBounds {
        axis: usize,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("concat: no inputs")]
    EmptyConcat,
    #[error("layer_norm: {what} has shape {got:?}, expected [{dim}]")]
    NormShape {
        what: &'static str,
        got: Vec<usize>,
        dim: usize,
    },
    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("cross_entropy: target {target} out of range for {classes} classes (row {row})")]
    TargetOutOfRange {
        row: usize,
        target: usize,
        classes: usize,
    },
    #[error("cross_entropy: {rows} logit rows but {targets} targets")]
    TargetCount { rows: usize, targets: usize },
}

pub type Result<V> = std::result::Result<V, TensorError>;

/// Dense row-major tensor. The empty shape `[]` denotes a scalar holding a
/// single element; all other dimensions must be non-zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Elem> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Elem> Tensor<T> {
    /// Builds a tensor from explicit contents, validating the element count.
    /// In debug builds this also rejects non-finite input values; internal
    /// operation results skip that scan for speed.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim { shape });
        }
        let expected = shape.iter().product::<usize>();
        if data.len() != expected {
            return Err(TensorError::ElementCount {
                shape,
                expected,
                actual: data.len(),
            });
        }
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite element in new tensor with shape {shape:?}"
        );
        Ok(Self::from_parts(shape, data))
    }

    /// Internal constructor for operation outputs: shape/count invariants are
    /// guaranteed by the caller.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(Vec::new(), vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![v; n])
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable view of the elements, copying the buffer first if it is
    /// shared with another tensor.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> Result<T> {
        if !self.is_scalar() {
            return Err(TensorError::NotScalar {
                op: "item",
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    /// Element at a fully specified index. Panics on a malformed index; this
    /// is a test and debugging convenience, not an operation.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let strides = strides_of(&self.shape);
        let mut off = 0;
        for (d, (&i, &s)) in index.iter().zip(&strides).enumerate() {
            assert!(i < self.shape[d], "index {i} out of bounds on axis {d}");
            off += i * s;
        }
        self.data[off]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn map(&self, f: impl Fn(T) -> T) -> Self {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self::from_parts(self.shape.clone(), data)
    }

    // ── elementwise arithmetic ──────────────────────────────────────────

    /// Elementwise sum with trailing-axis broadcasting (either operand may
    /// have size-1 or missing leading dimensions).
    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip_broadcast("add", rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip_broadcast("sub", rhs, |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        self.zip_broadcast("mul", rhs, |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn neg(&self) -> Self {
        self.map(|v| -v)
    }

    fn zip_broadcast(&self, op: &'static str, rhs: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape == rhs.shape {
            let data = self
                .data
                .iter()
                .zip(rhs.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Self::from_parts(self.shape.clone(), data));
        }
        let out_shape = broadcast_shape(op, &self.shape, &rhs.shape)?;
        let a_str = broadcast_strides(&out_shape, &self.shape);
        let b_str = broadcast_strides(&out_shape, &rhs.shape);
        let n = out_shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut walker = Odometer::new(&out_shape, &[&a_str, &b_str]);
        for _ in 0..n {
            let [a_off, b_off] = walker.offsets();
            data.push(f(self.data[a_off], rhs.data[b_off]));
            walker.step();
        }
        Ok(Self::from_parts(out_shape, data))
    }

    /// Sums `self` down to `target_shape`, folding axes that were expanded
    /// by broadcasting. Used when propagating gradients through broadcasts.
    pub(crate) fn reduce_to_shape(&self, target_shape: &[usize]) -> Self {
        if self.shape == target_shape {
            return self.clone();
        }
        let t_str = broadcast_strides(&self.shape, target_shape);
        let n_out = target_shape.iter().product();
        let mut out = vec![T::zero(); n_out];
        let mut walker = Odometer::new(&self.shape, &[&t_str]);
        for &v in self.data.iter() {
            let [off] = walker.offsets();
            out[off] = out[off] + v;
            walker.step();
        }
        Self::from_parts(target_shape.to_vec(), out)
    }

    // ── matmul ──────────────────────────────────────────────────────────

    /// Matrix product over the two trailing axes. Leading (batch) axes must
    /// match exactly between the operands.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.rank() < 2 {
            return Err(TensorError::RankMismatch {
                op: "matmul",
                expected: 2,
                shape: self.shape.clone(),
            });
        }
        if rhs.rank() < 2 {
            return Err(TensorError::RankMismatch {
                op: "matmul",
                expected: 2,
                shape: rhs.shape.clone(),
            });
        }
        let (a_batch, a_mat) = self.shape.split_at(self.rank() - 2);
        let (b_batch, b_mat) = rhs.shape.split_at(rhs.rank() - 2);
        if a_batch != b_batch {
            return Err(TensorError::BatchDims {
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let (m, k) = (a_mat[0], a_mat[1]);
        let (k2, n) = (b_mat[0], b_mat[1]);
        if k != k2 {
            return Err(TensorError::InnerDim { lhs: k, rhs: k2 });
        }
        let batch: usize = a_batch.iter().product();
        let mut out_shape = a_batch.to_vec();
        out_shape.extend_from_slice(&[m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        let a = &self.data[..];
        let b = &rhs.data[..];
        for bi in 0..batch {
            let a_base = bi * m * k;
            let b_base = bi * k * n;
            let c_base = bi * m * n;
            for i in 0..m {
                let a_row = &a[a_base + i * k..a_base + (i + 1) * k];
                let c_row = &mut out[c_base + i * n..c_base + (i + 1) * n];
                for (kk, &av) in a_row.iter().enumerate() {
                    let b_row = &b[b_base + kk * n..b_base + (kk + 1) * n];
                    for (c, &bv) in c_row.iter_mut().zip(b_row) {
                        *c = *c + av * bv;
                    }
                }
            }
        }
        Ok(Self::from_parts(out_shape, out))
    }

    /// Multiply–accumulate count of `self.matmul(rhs)`, for instrumentation.
    pub fn matmul_macs(&self, rhs: &Self) -> u64 {
        let rank = self.rank();
        let batch: usize = self.shape[..rank - 1].iter().product();
        (batch * self.shape[rank - 1] * rhs.shape[rhs.rank() - 1]) as u64
    }

    // ── shape manipulation ──────────────────────────────────────────────

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Self> {
        if new_shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim {
                shape: new_shape.to_vec(),
            });
        }
        let to_elems: usize = new_shape.iter().product();
        if to_elems != self.numel() {
            return Err(TensorError::ReshapeCount {
                from: self.shape.clone(),
                to: new_shape.to_vec(),
                from_elems: self.numel(),
                to_elems,
            });
        }
        Ok(Tensor {
            shape: new_shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    /// Permutes axes: output axis `d` takes input axis `perm[d]`.
    pub fn transpose(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        let valid = perm.len() == rank
            && perm.iter().all(|&p| {
                if p >= rank || seen[p] {
                    false
                } else {
                    seen[p] = true;
                    true
                }
            });
        if !valid {
            return Err(TensorError::BadPermutation {
                perm: perm.to_vec(),
                rank,
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = strides_of(&self.shape);
        let read_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = self.numel();
        let mut data = Vec::with_capacity(n);
        let mut walker = Odometer::new(&out_shape, &[&read_strides]);
        for _ in 0..n {
            let [off] = walker.offsets();
            data.push(self.data[off]);
            walker.step();
        }
        Ok(Self::from_parts(out_shape, data))
    }

    /// Inverse of `transpose(perm)`.
    pub(crate) fn invert_perm(perm: &[usize]) -> Vec<usize> {
        let mut inv = vec![0; perm.len()];
        for (d, &p) in perm.iter().enumerate() {
            inv[p] = d;
        }
        inv
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = *parts.first().ok_or(TensorError::EmptyConcat)?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { axis, rank });
        }
        let mut axis_total = 0;
        for part in parts {
            if part.rank() != rank {
                return Err(TensorError::RankMismatch {
                    op: "concat",
                    expected: rank,
                    shape: part.shape.clone(),
                });
            }
            for d in 0..rank {
                if d != axis && part.shape[d] != first.shape[d] {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: first.shape.clone(),
                        rhs: part.shape.clone(),
                        axis: d,
                    });
                }
            }
            axis_total += part.shape[axis];
        }
        let mut out_shape = first.shape.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for part in parts {
                let span = part.shape[axis] * inner;
                let base = o * span;
                data.extend_from_slice(&part.data[base..base + span]);
            }
        }
        Ok(Self::from_parts(out_shape, data))
    }

    /// Contiguous sub-range `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Self> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { axis, rank });
        }
        let len = self.shape[axis];
        if start >= end || end > len {
            return Err(TensorError::SliceBounds {
                axis,
                start,
                end,
                len,
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape[axis] = end - start;
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            data.extend_from_slice(&self.data[base..base + (end - start) * inner]);
        }
        Ok(Self::from_parts(out_shape, data))
    }

    /// Adjoint of `slice`: embeds `self` into a zero tensor of
    /// `full_shape` at offset `start` along `axis`.
    pub(crate) fn embed_slice(&self, full_shape: &[usize], axis: usize, start: usize) -> Self {
        let outer: usize = full_shape[..axis].iter().product();
        let inner: usize = full_shape[axis + 1..].iter().product();
        let span = self.shape[axis] * inner;
        let full_len = full_shape[axis];
        let mut out = vec![T::zero(); full_shape.iter().product()];
        for o in 0..outer {
            let dst = (o * full_len + start) * inner;
            out[dst..dst + span].copy_from_slice(&self.data[o * span..(o + 1) * span]);
        }
        Self::from_parts(full_shape.to_vec(), out)
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean_all(&self) -> T {
        self.sum_all() / T::from_f64(self.numel() as f64)
    }

    fn lanes(&self, axis: usize) -> Result<(usize, usize, usize)> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { axis, rank });
        }
        let outer = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, len, inner))
    }

    fn reduce_axis(&self, axis: usize, f: impl Fn(&mut dyn Iterator<Item = T>) -> T) -> Result<Self> {
        let (outer, len, inner) = self.lanes(axis)?;
        let mut out_shape = self.shape.clone();
        out_shape.remove(axis);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut it = (0..len).map(|j| self.data[base + j * inner]);
                data.push(f(&mut it));
            }
        }
        Ok(Self::from_parts(out_shape, data))
    }

    /// Sum along `axis`; the axis is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        self.reduce_axis(axis, |it| it.fold(T::zero(), |a, v| a + v))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        let len = *self
            .shape
            .get(axis)
            .ok_or(TensorError::AxisOutOfRange {
                axis,
                rank: self.rank(),
            })?;
        let inv = T::one() / T::from_f64(len as f64);
        Ok(self.sum_axis(axis)?.scale(inv))
    }

    /// Biased (population) variance along `axis`; the axis is removed.
    pub fn var_axis(&self, axis: usize) -> Result<Self> {
        let (outer, len, inner) = self.lanes(axis)?;
        let inv = T::one() / T::from_f64(len as f64);
        let mut out_shape = self.shape.clone();
        out_shape.remove(axis);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut sum = T::zero();
                for j in 0..len {
                    sum = sum + self.data[base + j * inner];
                }
                let mean = sum * inv;
                let mut acc = T::zero();
                for j in 0..len {
                    let d = self.data[base + j * inner] - mean;
                    acc = acc + d * d;
                }
                data.push(acc * inv);
            }
        }
        Ok(Self::from_parts(out_shape, data))
    }

    /// Adjoint of a removed-axis reduction: re-inserts `axis` with length
    /// `len`, repeating each element.
    pub(crate) fn expand_axis(&self, axis: usize, len: usize) -> Self {
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape.insert(axis, len);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let row = &self.data[o * inner..(o + 1) * inner];
            for _ in 0..len {
                data.extend_from_slice(row);
            }
        }
        Self::from_parts(out_shape, data)
    }

    // ── nonlinearities and normalization ────────────────────────────────

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let (outer, len, inner) = self.lanes(axis)?;
        let mut data = self.data.as_slice().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = data[base];
                for j in 1..len {
                    let v = data[base + j * inner];
                    if v > max {
                        max = v;
                    }
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (data[base + j * inner] - max).exp();
                    data[base + j * inner] = e;
                    sum = sum + e;
                }
                let inv = T::one() / sum;
                for j in 0..len {
                    data[base + j * inner] = data[base + j * inner] * inv;
                }
            }
        }
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    /// Jacobian-vector product of softmax given its output `y = softmax(x)`:
    /// `dx = y ⊙ (dy − Σ_axis dy ⊙ y)`.
    pub(crate) fn softmax_backward(y: &Self, dy: &Self, axis: usize) -> Self {
        let (outer, len, inner) = y.lanes(axis).expect("softmax_backward: bad axis");
        let mut out = vec![T::zero(); y.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut dot = T::zero();
                for j in 0..len {
                    let k = base + j * inner;
                    dot = dot + dy.data[k] * y.data[k];
                }
                for j in 0..len {
                    let k = base + j * inner;
                    out[k] = y.data[k] * (dy.data[k] - dot);
                }
            }
        }
        Self::from_parts(y.shape.clone(), out)
    }

    /// Exact GELU: `x · Φ(x)` with the Gaussian CDF expressed through `erf`.
    pub fn gelu(&self) -> Self {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        self.map(|x| x * half * (T::one() + (x * inv_sqrt2).erf()))
    }

    /// Derivative of the exact GELU: `Φ(x) + x·φ(x)`.
    pub(crate) fn gelu_backward(x: &Self, dy: &Self) -> Self {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        let data = x
            .data
            .iter()
            .zip(dy.data.iter())
            .map(|(&v, &g)| {
                let cdf = half * (T::one() + (v * inv_sqrt2).erf());
                let pdf = inv_sqrt_2pi * (-half * v * v).exp();
                g * (cdf + v * pdf)
            })
            .collect();
        Self::from_parts(x.shape.clone(), data)
    }

    /// Layer normalization over the last axis with learned `gamma`/`beta`
    /// (both shaped `[last_dim]`), using the biased variance.
    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: T) -> Result<Self> {
        let rank = self.rank();
        if rank == 0 {
            return Err(TensorError::RankMismatch {
                op: "layer_norm",
                expected: 1,
                shape: self.shape.clone(),
            });
        }
        let dim = self.shape[rank - 1];
        if gamma.shape() != [dim] {
            return Err(TensorError::NormShape {
                what: "gamma",
                got: gamma.shape.clone(),
                dim,
            });
        }
        if beta.shape() != [dim] {
            return Err(TensorError::NormShape {
                what: "beta",
                got: beta.shape.clone(),
                dim,
            });
        }
        let rows = self.numel() / dim;
        let inv_dim = T::one() / T::from_f64(dim as f64);
        let mut data = Vec::with_capacity(self.numel());
        for r in 0..rows {
            let row = &self.data[r * dim..(r + 1) * dim];
            let mut sum = T::zero();
            for &v in row {
                sum = sum + v;
            }
            let mean = sum * inv_dim;
            let mut var = T::zero();
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * inv_dim;
            let inv_std = T::one() / (var + eps).sqrt();
            for (c, &v) in row.iter().enumerate() {
                data.push((v - mean) * inv_std * gamma.data[c] + beta.data[c]);
            }
        }
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    /// Gradients of `layer_norm` with respect to input, gamma, and beta.
    /// Statistics are recomputed from `x` rather than cached.
    pub(crate) fn layer_norm_backward(
        x: &Self,
        gamma: &Self,
        eps: T,
        dy: &Self,
    ) -> (Self, Self, Self) {
        let dim = x.shape[x.rank() - 1];
        let rows = x.numel() / dim;
        let inv_dim = T::one() / T::from_f64(dim as f64);
        let mut dx = vec![T::zero(); x.numel()];
        let mut dgamma = vec![T::zero(); dim];
        let mut dbeta = vec![T::zero(); dim];
        for r in 0..rows {
            let xr = &x.data[r * dim..(r + 1) * dim];
            let gr = &dy.data[r * dim..(r + 1) * dim];
            let mut sum = T::zero();
            for &v in xr {
                sum = sum + v;
            }
            let mean = sum * inv_dim;
            let mut var = T::zero();
            for &v in xr {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * inv_dim;
            let inv_std = T::one() / (var + eps).sqrt();
            // dL/dx̂ for each column, plus the two row sums the analytic
            // formula needs: Σ dx̂ and Σ dx̂·x̂.
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for c in 0..dim {
                let xhat = (xr[c] - mean) * inv_std;
                let dxhat = gr[c] * gamma.data[c];
                sum_dxhat = sum_dxhat + dxhat;
                sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                dgamma[c] = dgamma[c] + gr[c] * xhat;
                dbeta[c] = dbeta[c] + gr[c];
            }
            for c in 0..dim {
                let xhat = (xr[c] - mean) * inv_std;
                let dxhat = gr[c] * gamma.data[c];
                dx[r * dim + c] =
                    inv_std * (dxhat - inv_dim * sum_dxhat - xhat * inv_dim * sum_dxhat_xhat);
            }
        }
        (
            Self::from_parts(x.shape.clone(), dx),
            Self::from_parts(vec![dim], dgamma),
            Self::from_parts(vec![dim], dbeta),
        )
    }

    // ── bilinear resampling ─────────────────────────────────────────────

    /// Align-corners bilinear resampling of a `[h, w, c]` grid to
    /// `[new_h, new_w, c]`. Resampling to the same size returns the input
    /// bit-for-bit.
    pub fn bilinear_resize(&self, new_h: usize, new_w: usize) -> Result<Self> {
        if self.rank() != 3 {
            return Err(TensorError::RankMismatch {
                op: "bilinear_resize",
                expected: 3,
                shape: self.shape.clone(),
            });
        }
        if new_h == 0 || new_w == 0 {
            return Err(TensorError::ZeroDim {
                shape: vec![new_h, new_w, self.shape[2]],
            });
        }
        let (h, w, c) = (self.shape[0], self.shape[1], self.shape[2]);
        if new_h == h && new_w == w {
            return Ok(self.clone());
        }
        let mut data = vec![T::zero(); new_h * new_w * c];
        for (y1, x1, y0, x0, wy, wx) in bilinear_taps(h, w, new_h, new_w) {
            let y0n = y0 + usize::from(y0 + 1 < h);
            let x0n = x0 + usize::from(x0 + 1 < w);
            let tl = (y0 * w + x0) * c;
            let tr = (y0 * w + x0n) * c;
            let bl = (y0n * w + x0) * c;
            let br = (y0n * w + x0n) * c;
            let (fy, fx) = (T::from_f64(wy), T::from_f64(wx));
            let one = T::one();
            let dst = (y1 * new_w + x1) * c;
            for ch in 0..c {
                let top = self.data[tl + ch] * (one - fx) + self.data[tr + ch] * fx;
                let bottom = self.data[bl + ch] * (one - fx) + self.data[br + ch] * fx;
                data[dst + ch] = top * (one - fy) + bottom * fy;
            }
        }
        Ok(Self::from_parts(vec![new_h, new_w, c], data))
    }

    /// Adjoint of `bilinear_resize`: scatters an upstream `[new_h, new_w, c]`
    /// gradient back onto the `[h, w, c]` source grid.
    pub(crate) fn bilinear_resize_adjoint(&self, src_h: usize, src_w: usize) -> Self {
        let (new_h, new_w, c) = (self.shape[0], self.shape[1], self.shape[2]);
        if new_h == src_h && new_w == src_w {
            return self.clone();
        }
        let (h, w) = (src_h, src_w);
        let mut data = vec![T::zero(); h * w * c];
        for (y1, x1, y0, x0, wy, wx) in bilinear_taps(h, w, new_h, new_w) {
            let y0n = y0 + usize::from(y0 + 1 < h);
            let x0n = x0 + usize::from(x0 + 1 < w);
            let (fy, fx) = (T::from_f64(wy), T::from_f64(wx));
            let one = T::one();
            let src = (y1 * new_w + x1) * c;
            let w_tl = (one - fy) * (one - fx);
            let w_tr = (one - fy) * fx;
            let w_bl = fy * (one - fx);
            let w_br = fy * fx;
            for ch in 0..c {
                let g = self.data[src + ch];
                data[(y0 * w + x0) * c + ch] = data[(y0 * w + x0) * c + ch] + g * w_tl;
                data[(y0 * w + x0n) * c + ch] = data[(y0 * w + x0n) * c + ch] + g * w_tr;
                data[(y0n * w + x0) * c + ch] = data[(y0n * w + x0) * c + ch] + g * w_bl;
                data[(y0n * w + x0n) * c + ch] = data[(y0n * w + x0n) * c + ch] + g * w_br;
            }
        }
        Self::from_parts(vec![h, w, c], data)
    }

    // ── cross entropy ───────────────────────────────────────────────────

    /// Mean cross entropy of `[rows, classes]` logits against integer
    /// targets, computed through a log-sum-exp so large logits cannot
    /// overflow.
    pub(crate) fn cross_entropy_mean(&self, targets: &[usize]) -> Result<T> {
        let (rows, classes) = self.check_logits(targets)?;
        let mut total = T::zero();
        for r in 0..rows {
            let row = &self.data[r * classes..(r + 1) * classes];
            let mut max = row[0];
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for &v in row {
                sum = sum + (v - max).exp();
            }
            total = total + (max + sum.ln()) - row[targets[r]];
        }
        Ok(total / T::from_f64(rows as f64))
    }

    /// Gradient of `cross_entropy_mean` w.r.t. the logits, scaled by the
    /// upstream scalar gradient `upstream`.
    pub(crate) fn cross_entropy_mean_backward(&self, targets: &[usize], upstream: T) -> Self {
        let (rows, classes) = self
            .check_logits(targets)
            .expect("cross_entropy_mean_backward: validated in forward");
        let scale = upstream / T::from_f64(rows as f64);
        let probs = self.softmax(1).expect("softmax over logits");
        let mut data = probs.data.as_slice().to_vec();
        for (r, &t) in targets.iter().enumerate() {
            data[r * classes + t] = data[r * classes + t] - T::one();
        }
        for v in data.iter_mut() {
            *v = *v * scale;
        }
        Self::from_parts(self.shape.clone(), data)
    }

    fn check_logits(&self, targets: &[usize]) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "cross_entropy",
                expected: 2,
                shape: self.shape.clone(),
            });
        }
        let (rows, classes) = (self.shape[0], self.shape[1]);
        if targets.len() != rows {
            return Err(TensorError::TargetCount {
                rows,
                targets: targets.len(),
            });
        }
        for (row, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(TensorError::TargetOutOfRange {
                    row,
                    target: t,
                    classes,
                });
            }
        }
        Ok((rows, classes))
    }
}

/// A named collection of tensors, typically model weights. Traversal order
/// is deterministic and canonical: checkpoints, the optimizer, and the
/// finite-difference driver all walk tensors in this order.
pub trait TensorSet<T: Elem> {
    fn for_each_tensor(&self, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_tensor(&mut |name, _| names.push(name.to_string()));
        names
    }

    fn param_count(&self) -> u64 {
        let mut total = 0u64;
        self.for_each_tensor(&mut |_, t| total += t.numel() as u64);
        total
    }

    fn get_tensor(&self, name: &str) -> Option<Tensor<T>> {
        let mut found = None;
        self.for_each_tensor(&mut |n, t| {
            if n == name {
                found = Some(t.clone());
            }
        });
        found
    }

    /// Runs `f` on the tensor called `name`, returning `None` if absent.
    fn with_tensor_mut<R>(&mut self, name: &str, f: impl FnOnce(&mut Tensor<T>) -> R) -> Option<R>
    where
        Self: Sized,
    {
        let mut f = Some(f);
        let mut out = None;
        self.for_each_tensor_mut(&mut |n, t| {
            if n == name {
                if let Some(f) = f.take() {
                    out = Some(f(t));
                }
            }
        });
        out
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let ad = if i < a.len() { a[a.len() - 1 - i] } else { 1 };
        let bd = if i < b.len() { b[b.len() - 1 - i] } else { 1 };
        out[rank - 1 - i] = if ad == bd {
            ad
        } else if ad == 1 {
            bd
        } else if bd == 1 {
            ad
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
                axis: rank - 1 - i,
            });
        };
    }
    Ok(out)
}

/// Strides for reading `in_shape` as if broadcast to `out_shape`:
/// right-aligned, with stride 0 on expanded or missing axes.
fn broadcast_strides(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let in_strides = strides_of(in_shape);
    let mut out = vec![0; out_shape.len()];
    let offset = out_shape.len() - in_shape.len();
    for (d, (&dim, &stride)) in in_shape.iter().zip(&in_strides).enumerate() {
        out[offset + d] = if dim == 1 { 0 } else { stride };
    }
    out
}

/// Iterates the multi-index of a shape in row-major order while tracking
/// byte offsets into `K` differently-strided views of the same index space.
struct Odometer<'a, const K: usize> {
    shape: &'a [usize],
    strides: [&'a [usize]; K],
    index: Vec<usize>,
    offsets: [usize; K],
}

impl<'a, const K: usize> Odometer<'a, K> {
    fn new(shape: &'a [usize], strides: &[&'a [usize]; K]) -> Self {
        Odometer {
            shape,
            strides: *strides,
            index: vec![0; shape.len()],
            offsets: [0; K],
        }
    }

    fn offsets(&self) -> [usize; K] {
        self.offsets
    }

    fn step(&mut self) {
        for d in (0..self.shape.len()).rev() {
            self.index[d] += 1;
            for k in 0..K {
                self.offsets[k] += self.strides[k][d];
            }
            if self.index[d] < self.shape[d] {
                return;
            }
            for k in 0..K {
                self.offsets[k] -= self.strides[k][d] * self.shape[d];
            }
            self.index[d] = 0;
        }
    }
}

/// Yields `(dst_y, dst_x, src_y0, src_x0, frac_y, frac_x)` for align-corners
/// bilinear resampling. A destination axis of length 1 reads source
/// coordinate 0.
fn bilinear_taps(
    h: usize,
    w: usize,
    new_h: usize,
    new_w: usize,
) -> impl Iterator<Item = (usize, usize, usize, usize, f64, f64)> {
    let scale = |src: usize, dst: usize, i: usize| -> (usize, f64) {
        if dst == 1 {
            return (0, 0.0);
        }
        let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
        let base = (pos.floor() as usize).min(src - 1);
        let frac = if base + 1 < src { pos - base as f64 } else { 0.0 };
        (base, frac)
    };
    (0..new_h).flat_map(move |y1| {
        let (y0, fy) = scale(h, new_h, y1);
        (0..new_w).map(move |x1| {
            let (x0, fx) = scale(w, new_w, x1);
            (y1, x1, y0, x0, fy, fx)
        })
    })
}
