//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! The op set is exactly what the backbone and the adapters need: matmul,
//! same-padding conv, layernorm, softmax, a handful of shape ops, and the
//! loss heads. Storage is contiguous row-major with no stride views; all
//! shape mismatches are hard errors rather than broadcasts.
//!
//! `f32` is the training dtype. `f64` exists so gradient checks are not
//! drowned by rounding; every op is generic over [`Scalar`].

mod ops;
mod tape;

pub mod gradcheck;

pub use tape::{Tape, TapeState, VarId};

use thiserror::Error;

/// Dtype tag used by the binary tensor encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Scalar element type of a [`Tensor`]. Implemented for `f32` and `f64`.
pub trait Scalar:
    Copy
    + PartialOrd
    + PartialEq
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const DTYPE: Dtype;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    /// Appends the little-endian byte representation to `out`.
    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one scalar from the front of `bytes` (must hold enough bytes).
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: left dims {left:?}, right dims {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected dims {expected:?}, got {got:?}")]
    BadDims {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("invalid tensor dims {dims:?}: extents must be positive and match the data length {len}")]
    InvalidDims { dims: Vec<usize>, len: usize },
    #[error("conv kernel size {0} is even; same-padding requires odd kernels")]
    EvenKernel(usize),
    #[error("backward already consumed this tape")]
    TapeConsumed,
    #[error("backward seed dims {seed:?} do not match output dims {out:?}")]
    BadSeed { seed: Vec<usize>, out: Vec<usize> },
    #[error("tensor decode failed at byte {offset}: {reason}")]
    Decode { offset: usize, reason: String },
}

/// Dense n-dimensional value: positive extents, contiguous row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let numel: usize = dims.iter().product();
        if dims.iter().any(|&d| d == 0) || numel != data.len() || dims.is_empty() {
            return Err(TensorError::InvalidDims {
                dims,
                len: data.len(),
            });
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let numel: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![T::ZERO; numel],
        }
    }

    pub fn filled(dims: &[usize], v: T) -> Self {
        let numel: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![v],
        }
    }

    /// Row-major identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::ONE;
        }
        t
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Tensor {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Number of rows when the tensor is viewed as a 2-D row-major matrix
    /// (all leading axes flattened).
    pub fn lead_rows(&self) -> usize {
        self.numel() / self.dims[self.rank() - 1]
    }

    pub fn last_dim(&self) -> usize {
        self.dims[self.rank() - 1]
    }

    pub fn get(&self, idx: &[usize]) -> T {
        debug_assert_eq!(idx.len(), self.dims.len());
        let mut flat = 0;
        for (i, &ix) in idx.iter().enumerate() {
            debug_assert!(ix < self.dims[i]);
            flat = flat * self.dims[i] + ix;
        }
        self.data[flat]
    }

    pub fn converted<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Binary encoding: u8 dtype tag (0=f32, 1=f64), u8 rank,
    /// rank x u32 little-endian dims, then raw little-endian scalars.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(2 + 4 * self.rank() + self.numel() * T::DTYPE.size_of());
        out.push(T::DTYPE as u8);
        out.push(self.rank() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn encoded_len(&self) -> usize {
        2 + 4 * self.rank() + self.numel() * T::DTYPE.size_of()
    }

    /// Decodes one tensor from the front of `bytes`, returning it together
    /// with the number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize), TensorError> {
        let fail = |offset: usize, reason: &str| TensorError::Decode {
            offset,
            reason: reason.to_string(),
        };
        if bytes.len() < 2 {
            return Err(fail(bytes.len(), "missing dtype/rank header"));
        }
        let dtype = Dtype::from_tag(bytes[0]).ok_or_else(|| fail(0, "unknown dtype tag"))?;
        if dtype != T::DTYPE {
            return Err(fail(0, "dtype tag does not match the requested scalar type"));
        }
        let rank = bytes[1] as usize;
        if rank == 0 {
            return Err(fail(1, "rank must be at least 1"));
        }
        let mut off = 2;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            if bytes.len() < off + 4 {
                return Err(fail(off, "truncated dims"));
            }
            let d = u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
                as usize;
            if d == 0 {
                return Err(fail(off, "zero extent"));
            }
            dims.push(d);
            off += 4;
        }
        let numel: usize = dims.iter().product();
        let scalar_len = T::DTYPE.size_of();
        let need = numel
            .checked_mul(scalar_len)
            .ok_or_else(|| fail(off, "dims overflow"))?;
        if bytes.len() < off + need {
            return Err(fail(bytes.len(), "truncated scalar payload"));
        }
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            data.push(T::read_le(&bytes[off + i * scalar_len..]));
        }
        off += need;
        Ok((Tensor { dims, data }, off))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_must_match_data_length() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn encode_layout_is_documented() {
        let t = Tensor::<f32>::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let b = t.encode();
        assert_eq!(b[0], 0); // f32 tag
        assert_eq!(b[1], 2); // rank
        assert_eq!(&b[2..6], &1u32.to_le_bytes());
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[10..14], &1.0f32.to_le_bytes());
        assert_eq!(&b[14..18], &(-2.0f32).to_le_bytes());
        assert_eq!(b.len(), t.encoded_len());
    }

    #[test]
    fn decode_rejects_wrong_dtype_and_truncation() {
        let t = Tensor::<f64>::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = t.encode();
        let (back, used) = Tensor::<f64>::decode(&b).unwrap();
        assert_eq!(used, b.len());
        assert_eq!(back, t);
        assert!(Tensor::<f32>::decode(&b).is_err());
        assert!(Tensor::<f64>::decode(&b[..b.len() - 1]).is_err());
    }
}
