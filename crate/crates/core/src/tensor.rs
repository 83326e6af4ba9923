//! Dense tensors over a switchable float precision.
//!
//! Layout conventions used throughout the crate:
//! - images/activations are rank-4 NHWC: `[batch, height, width, channels]`
//! - convolution filter banks are `[L, L, C_in, C_out]` with odd tap count L
//! - matrices are rank-2 row-major `[rows, cols]`
//!
//! Data is always contiguous row-major; there are no views or strides.
//! Numeric work is generic over [`Scalar`] so a network can run in single or
//! double precision from the same code path (gradient checking runs the
//! double instantiation).

use crate::error::{MdError, Result};
use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// On-disk element type codes (part of the serialization format).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    /// 32-bit IEEE float, code 0.
    Single = 0,
    /// 64-bit IEEE float, code 1.
    Double = 1,
    /// 32-bit unsigned integer (labels, index sets), code 2.
    Uint32 = 2,
}

impl Dtype {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Dtype> {
        match c {
            0 => Some(Dtype::Single),
            1 => Some(Dtype::Double),
            2 => Some(Dtype::Uint32),
            _ => None,
        }
    }

    /// Bytes per element.
    pub fn size(self) -> usize {
        match self {
            Dtype::Single | Dtype::Uint32 => 4,
            Dtype::Double => 8,
        }
    }
}

/// Floating-point element type: everything the kernels need from a float.
pub trait Scalar:
    Copy
    + Clone
    + PartialEq
    + PartialOrd
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + std::iter::Sum
{
    const ZERO: Self;
    const ONE: Self;
    const DTYPE: Dtype;
    /// Bytes per element in serialized form.
    const BYTE_WIDTH: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn abs(self) -> Self;
    fn max_val(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    /// Fused multiply-add `self * a + b` (single rounding where supported).
    fn mul_add(self, a: Self, b: Self) -> Self;
    /// Append the little-endian byte representation.
    fn write_le(self, out: &mut Vec<u8>);
    /// Read from exactly `BYTE_WIDTH` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: Dtype = Dtype::Single;
    const BYTE_WIDTH: usize = 4;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f32::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f32::ln(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f32::abs(self)
    }
    #[inline]
    fn max_val(self, other: Self) -> Self {
        f32::max(self, other)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    #[inline]
    fn mul_add(self, a: Self, b: Self) -> Self {
        f32::mul_add(self, a, b)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: Dtype = Dtype::Double;
    const BYTE_WIDTH: usize = 8;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn max_val(self, other: Self) -> Self {
        f64::max(self, other)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    #[inline]
    fn mul_add(self, a: Self, b: Self) -> Self {
        f64::mul_add(self, a, b)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

/// Dense row-major tensor of rank 1..=4.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    dims: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Wraps existing data; `data.len()` must equal the product of `dims`.
    pub fn new(dims: &[usize], data: Vec<S>) -> Result<Self> {
        let n = checked_len(dims)?;
        if data.len() != n {
            return Err(MdError::shape(
                "tensor_new",
                format!("dims {:?} imply {} elements, got {}", dims, n, data.len()),
            ));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = checked_len(dims).expect("tensor dimensions overflow");
        Tensor {
            dims: dims.to_vec(),
            data: vec![S::ZERO; n],
        }
    }

    pub fn full(dims: &[usize], v: S) -> Self {
        let n = checked_len(dims).expect("tensor dimensions overflow");
        Tensor {
            dims: dims.to_vec(),
            data: vec![v; n],
        }
    }

    /// Builds a tensor by calling `f` with the flat (row-major) index.
    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n = checked_len(dims).expect("tensor dimensions overflow");
        Tensor {
            dims: dims.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self, i: usize) -> usize {
        self.dims[i]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        let n = checked_len(dims)?;
        if n != self.data.len() {
            return Err(MdError::shape(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.dims, dims),
            ));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data: self.data,
        })
    }

    /// Flat index into a rank-4 tensor.
    #[inline]
    pub fn idx4(&self, n: usize, i: usize, j: usize, c: usize) -> usize {
        debug_assert_eq!(self.rank(), 4);
        ((n * self.dims[1] + i) * self.dims[2] + j) * self.dims[3] + c
    }

    /// Flat index into a rank-2 tensor.
    #[inline]
    pub fn idx2(&self, r: usize, c: usize) -> usize {
        debug_assert_eq!(self.rank(), 2);
        r * self.dims[1] + c
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> S {
        self.data[self.idx2(r, c)]
    }

    #[inline]
    pub fn set2(&mut self, r: usize, c: usize, v: S) {
        let i = self.idx2(r, c);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        if self.dims != other.dims {
            return Err(MdError::shape(
                "tensor_add",
                format!("{:?} vs {:?}", self.dims, other.dims),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor {
            dims: self.dims.clone(),
            data,
        })
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<S>) -> Result<()> {
        if self.dims != other.dims {
            return Err(MdError::shape(
                "tensor_add_assign",
                format!("{:?} vs {:?}", self.dims, other.dims),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// In-place `self *= k`.
    pub fn scale(&mut self, k: S) {
        for x in &mut self.data {
            *x *= k;
        }
    }

    /// Errors if any element is NaN or infinite; `op` names the producer.
    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        let bad = self.data.iter().filter(|x| !x.is_finite()).count();
        if bad > 0 {
            return Err(MdError::NonFinite {
                op,
                count: bad,
                total: self.data.len(),
            });
        }
        Ok(())
    }

    /// Lossy conversion between precisions (via f64).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|x| T::from_f64(x.to_f64())).collect(),
        }
    }

    /// Sum of squares, accumulated in f64 regardless of S.
    pub fn sq_sum_f64(&self) -> f64 {
        self.data
            .iter()
            .map(|x| {
                let v = x.to_f64();
                v * v
            })
            .sum()
    }

    /// Frobenius norm in f64.
    pub fn frob_norm(&self) -> f64 {
        self.sq_sum_f64().sqrt()
    }
}

/// Largest elementwise |a - b| between same-shaped tensors, in f64.
pub fn max_abs_diff<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    assert_eq!(a.dims(), b.dims(), "max_abs_diff shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.to_f64() - y.to_f64()).abs())
        .fold(0.0, f64::max)
}

/// Relative Frobenius distance ||a-b|| / max(||a||, tiny).
pub fn rel_frob_diff<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    assert_eq!(a.dims(), b.dims(), "rel_frob_diff shape mismatch");
    let mut num = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x.to_f64() - y.to_f64();
        num += d * d;
    }
    num.sqrt() / a.frob_norm().max(1e-300)
}

fn checked_len(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.len() > 4 {
        return Err(MdError::shape(
            "tensor_dims",
            format!("rank must be 1..=4, got {:?}", dims),
        ));
    }
    let mut n: usize = 1;
    for &d in dims {
        if d == 0 {
            return Err(MdError::shape(
                "tensor_dims",
                format!("zero-sized dimension in {:?}", dims),
            ));
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| MdError::shape("tensor_dims", format!("{:?} overflows usize", dims)))?;
    }
    Ok(n)
}

/// Convolution filter bank `[L, L, C_in, C_out]` with odd spatial extent.
///
/// Element `(v, u, c, d)` is the weight connecting input channel `c` to
/// output channel `d` at spatial tap `(v, u)`; tap `((L-1)/2, (L-1)/2)` is
/// the centered tap that 1x1 adapters occupy after fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank<S> {
    t: Tensor<S>,
}

impl<S: Scalar> FilterBank<S> {
    pub fn new(t: Tensor<S>) -> Result<Self> {
        if t.rank() != 4 {
            return Err(MdError::shape(
                "filter_bank",
                format!("expected rank 4, got {:?}", t.dims()),
            ));
        }
        let (l0, l1) = (t.dim(0), t.dim(1));
        if l0 != l1 || l0 % 2 == 0 {
            return Err(MdError::shape(
                "filter_bank",
                format!("spatial extent must be square and odd, got {l0}x{l1}"),
            ));
        }
        Ok(FilterBank { t })
    }

    pub fn zeros(l: usize, c_in: usize, c_out: usize) -> Self {
        FilterBank::new(Tensor::zeros(&[l, l, c_in, c_out])).expect("valid zero filter bank")
    }

    pub fn l(&self) -> usize {
        self.t.dim(0)
    }

    pub fn c_in(&self) -> usize {
        self.t.dim(2)
    }

    pub fn c_out(&self) -> usize {
        self.t.dim(3)
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.t
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<S> {
        &mut self.t
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.t
    }

    #[inline]
    pub fn at(&self, v: usize, u: usize, c: usize, d: usize) -> S {
        let l = self.l();
        let (c_in, c_out) = (self.c_in(), self.c_out());
        debug_assert!(v < l && u < l && c < c_in && d < c_out);
        self.t.data()[((v * l + u) * c_in + c) * c_out + d]
    }

    #[inline]
    pub fn set(&mut self, v: usize, u: usize, c: usize, d: usize, val: S) {
        let l = self.l();
        let (c_in, c_out) = (self.c_in(), self.c_out());
        let i = ((v * l + u) * c_in + c) * c_out + d;
        self.t.data_mut()[i] = val;
    }

    pub fn param_count(&self) -> usize {
        self.t.len()
    }
}
