//! Minimal dense tensor: shapes, row-major strides, element access,
//! reshape/permute and a small binary file format.
//!
//! Tensors own their data and are immutable after construction except
//! through explicit in-place accessors, so sharing them read-only across
//! threads is safe.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_traits::{Float, NumAssignOps, NumCast};
use thiserror::Error;

/// Element type code stored in the binary format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Scalar element of a [`Tensor`]. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + NumAssignOps + NumCast + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite f64 converts to scalar")
    }

    fn to_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("scalar converts to f64")
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("empty shape")]
    EmptyShape,
    #[error("zero-sized dimension in shape {0:?}")]
    ZeroDim(Vec<usize>),
    #[error("shape {shape:?} holds {expected} elements but data has {got}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid permutation {0:?}")]
    InvalidPermutation(Vec<usize>),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u8),
    #[error("bad dtype code {0}")]
    BadDtype(u8),
    #[error("truncated")]
    Truncated,
    #[error("file holds {file:?} but {requested:?} was requested")]
    DtypeMismatch { file: Dtype, requested: Dtype },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const MAGIC: &[u8; 4] = b"DCLS";
const FORMAT_VERSION: u8 = 1;

/// Dense n-dimensional row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Result<Self, TensorError> {
        let n = checked_len(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self, TensorError> {
        let n = checked_len(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        let n = checked_len(shape)?;
        if n != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape: shape.to_vec(),
                expected: n,
                got: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Result<Self, TensorError> {
        let mut t = Self::zeros(shape)?;
        let mut idx = vec![0usize; shape.len()];
        for i in 0..t.data.len() {
            t.data[i] = f(&idx);
            increment_index(&mut idx, shape);
        }
        Ok(t)
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

    /// Row-major strides: the stride of the last axis is 1.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1usize; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        let mut stride = 1;
        for axis in (0..self.shape.len()).rev() {
            debug_assert!(index[axis] < self.shape[axis]);
            off += index[axis] * stride;
            stride *= self.shape[axis];
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Reinterprets the flat data under a new shape of equal length.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        let n = checked_len(shape)?;
        if n != self.data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape: shape.to_vec(),
                expected: n,
                got: self.data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Materializes the axis permutation `perm`: output axis `i` is input
    /// axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self, TensorError> {
        let d = self.shape.len();
        if perm.len() != d {
            return Err(TensorError::InvalidPermutation(perm.to_vec()));
        }
        let mut seen = vec![false; d];
        for &p in perm {
            if p >= d || seen[p] {
                return Err(TensorError::InvalidPermutation(perm.to_vec()));
            }
            seen[p] = true;
        }
        let new_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = self.strides();
        let mut out = Self::zeros(&new_shape)?;
        let mut idx = vec![0usize; d];
        for slot in 0..out.data.len() {
            let mut src = 0;
            for axis in 0..d {
                src += idx[axis] * in_strides[perm[axis]];
            }
            out.data[slot] = self.data[src];
            increment_index(&mut idx, &new_shape);
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        for v in &mut self.data {
            *v = value;
        }
    }

    pub fn scale(&mut self, factor: T) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::DimMismatch(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    /// Matrix product of a `[m, k]` tensor with a `[k, n]` tensor.
    pub fn matmul(&self, other: &Self) -> Result<Self, TensorError> {
        if self.ndim() != 2 || other.ndim() != 2 {
            return Err(TensorError::DimMismatch(format!(
                "matmul expects 2-d operands, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(TensorError::DimMismatch(format!(
                "matmul inner dims differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = Self::zeros(&[m, n])?;
        for i in 0..m {
            for l in 0..k {
                let a = self.data[i * k + l];
                if a == T::zero() {
                    continue;
                }
                let row = &other.data[l * n..(l + 1) * n];
                let dst = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    dst[j] += a * row[j];
                }
            }
        }
        Ok(out)
    }

    /// Writes the tensor in the binary format: magic `DCLS`, version byte,
    /// dtype code byte (0 = f32, 1 = f64), ndim byte, dims as 64-bit
    /// little-endian, payload little-endian row-major.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TensorError> {
        let mut buf = Vec::with_capacity(16 + self.data.len() * T::DTYPE.size_bytes());
        buf.extend_from_slice(MAGIC);
        buf.push(FORMAT_VERSION);
        buf.push(T::DTYPE.code());
        buf.push(self.shape.len() as u8);
        for &d in &self.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut buf);
        }
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&buf)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TensorError> {
        match load_dyn(path)? {
            DynTensor::F32(t) if T::DTYPE == Dtype::F32 => {
                Ok(Self::from_vec(t.shape(), t.data().iter().map(|&v| T::from_f64(v as f64)).collect()).unwrap())
            }
            DynTensor::F64(t) if T::DTYPE == Dtype::F64 => {
                Ok(Self::from_vec(t.shape(), t.data().iter().map(|&v| T::from_f64(v)).collect()).unwrap())
            }
            other => Err(TensorError::DtypeMismatch {
                file: other.dtype(),
                requested: T::DTYPE,
            }),
        }
    }
}

/// A tensor whose dtype is only known at runtime, as read from a file.
#[derive(Clone, Debug)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl DynTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            DynTensor::F32(_) => Dtype::F32,
            DynTensor::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            DynTensor::F32(t) => t.shape(),
            DynTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to f64, widening f32 payloads.
    pub fn into_f64(self) -> Tensor<f64> {
        match self {
            DynTensor::F32(t) => {
                Tensor::from_vec(t.shape(), t.data().iter().map(|&v| v as f64).collect()).unwrap()
            }
            DynTensor::F64(t) => t,
        }
    }
}

/// Reads a tensor file of either dtype.
pub fn load_dyn(path: impl AsRef<Path>) -> Result<DynTensor, TensorError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    parse_dyn(&bytes)
}

fn parse_dyn(bytes: &[u8]) -> Result<DynTensor, TensorError> {
    if bytes.len() < 4 {
        return Err(TensorError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(TensorError::BadMagic);
    }
    if bytes.len() < 7 {
        return Err(TensorError::Truncated);
    }
    let version = bytes[4];
    if version != FORMAT_VERSION {
        return Err(TensorError::BadVersion(version));
    }
    let dtype = Dtype::from_code(bytes[5]).ok_or(TensorError::BadDtype(bytes[5]))?;
    let ndim = bytes[6] as usize;
    let header_end = 7 + 8 * ndim;
    if bytes.len() < header_end {
        return Err(TensorError::Truncated);
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let start = 7 + 8 * i;
        let dim = u64::from_le_bytes(bytes[start..start + 8].try_into().unwrap());
        shape.push(dim as usize);
    }
    let n = checked_len(&shape)?;
    let payload = &bytes[header_end..];
    if payload.len() < n * dtype.size_bytes() {
        return Err(TensorError::Truncated);
    }
    match dtype {
        Dtype::F32 => {
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .take(n)
                .map(f32::read_le)
                .collect();
            Ok(DynTensor::F32(Tensor::from_vec(&shape, data)?))
        }
        Dtype::F64 => {
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .take(n)
                .map(f64::read_le)
                .collect();
            Ok(DynTensor::F64(Tensor::from_vec(&shape, data)?))
        }
    }
}

fn checked_len(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() {
        return Err(TensorError::EmptyShape);
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(TensorError::ZeroDim(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

/// Advances a row-major multi-index in place.
pub fn increment_index(idx: &mut [usize], shape: &[usize]) {
    for axis in (0..shape.len()).rev() {
        idx[axis] += 1;
        if idx[axis] < shape[axis] {
            return;
        }
        idx[axis] = 0;
    }
}
