//! Dense precision-tagged matrices and the kernels that operate on them.
//!
//! Every [`PrecisionMatrix`] registers its payload (`rows * cols * 2` bytes for
//! FP16, `* 4` for FP32) with a [`MemoryAccountant`] from construction until it
//! is dropped. Kernels reserve the output before computing, so a budget refusal
//! aborts the operation without touching any existing tensor.
//!
//! FP16 element-wise kernels compute in `f32` and round every result back to
//! binary16.

mod accountant;
mod gemm;

use std::borrow::Cow;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::halfnum::{self, Half};

pub use accountant::{Allocation, MemoryAccountant};
pub use gemm::{tensor_core_eligible, GemmShape, Transpose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("precision mismatch in {op}: {left} vs {right}")]
    PrecisionMismatch {
        op: &'static str,
        left: Precision,
        right: Precision,
    },
    #[error("out of memory: requested {requested} bytes with {live} live, budget {budget}")]
    OutOfMemory { requested: u64, live: u64, budget: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "fp16")]
    Fp16,
    #[serde(rename = "fp32")]
    Fp32,
}

impl Precision {
    pub const fn bytes_per_element(self) -> u64 {
        match self {
            Precision::Fp16 => 2,
            Precision::Fp32 => 4,
        }
    }

    /// Rounds an `f32` result to this precision.
    #[inline]
    pub fn round(self, x: f32) -> f32 {
        match self {
            Precision::Fp16 => halfnum::round_to_half(x),
            Precision::Fp32 => x,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Fp16 => "fp16",
            Precision::Fp32 => "fp32",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Storage {
    F16(Vec<Half>),
    F32(Vec<f32>),
}

/// Element-wise functions available as [`PrecisionMatrix::pointwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Neg,
}

impl Pointwise {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Pointwise::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Pointwise::Sigmoid => sigmoid(x),
            Pointwise::Exp => x.exp(),
            Pointwise::Log => x.ln(),
            Pointwise::Neg => -x,
        }
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Dense row-major matrix whose payload is accounted for.
pub struct PrecisionMatrix {
    rows: usize,
    cols: usize,
    storage: Storage,
    allocation: Allocation,
}

impl PrecisionMatrix {
    fn reserve(
        acct: &MemoryAccountant,
        rows: usize,
        cols: usize,
        precision: Precision,
    ) -> Result<Allocation, TensorError> {
        acct.reserve((rows * cols) as u64 * precision.bytes_per_element())
    }

    /// Builds a matrix from `f32` values, narrowing them when `precision` is FP16.
    pub fn from_f32(
        acct: &MemoryAccountant,
        rows: usize,
        cols: usize,
        data: Vec<f32>,
        precision: Precision,
    ) -> Result<PrecisionMatrix, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::ShapeMismatch {
                op: "from_f32",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        let allocation = Self::reserve(acct, rows, cols, precision)?;
        let storage = match precision {
            Precision::Fp32 => Storage::F32(data),
            Precision::Fp16 => Storage::F16(data.into_iter().map(halfnum::narrow).collect()),
        };
        Ok(PrecisionMatrix {
            rows,
            cols,
            storage,
            allocation,
        })
    }

    pub fn from_halves(
        acct: &MemoryAccountant,
        rows: usize,
        cols: usize,
        data: Vec<Half>,
    ) -> Result<PrecisionMatrix, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::ShapeMismatch {
                op: "from_halves",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        let allocation = Self::reserve(acct, rows, cols, Precision::Fp16)?;
        Ok(PrecisionMatrix {
            rows,
            cols,
            storage: Storage::F16(data),
            allocation,
        })
    }

    pub fn zeros(
        acct: &MemoryAccountant,
        rows: usize,
        cols: usize,
        precision: Precision,
    ) -> Result<PrecisionMatrix, TensorError> {
        let allocation = Self::reserve(acct, rows, cols, precision)?;
        let storage = match precision {
            Precision::Fp32 => Storage::F32(vec![0.0; rows * cols]),
            Precision::Fp16 => Storage::F16(vec![Half::ZERO; rows * cols]),
        };
        Ok(PrecisionMatrix {
            rows,
            cols,
            storage,
            allocation,
        })
    }

    /// `rows x cols` matrix with ones on the leading diagonal.
    pub fn identity(
        acct: &MemoryAccountant,
        rows: usize,
        cols: usize,
        precision: Precision,
    ) -> Result<PrecisionMatrix, TensorError> {
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows.min(cols) {
            data[i * cols + i] = 1.0;
        }
        Self::from_f32(acct, rows, cols, data, precision)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn precision(&self) -> Precision {
        match self.storage {
            Storage::F16(_) => Precision::Fp16,
            Storage::F32(_) => Precision::Fp32,
        }
    }

    /// Payload size registered with the accountant.
    pub fn bytes(&self) -> u64 {
        self.allocation.bytes()
    }

    pub fn accountant(&self) -> &MemoryAccountant {
        self.allocation.accountant()
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.storage {
            Storage::F32(v) => Some(v),
            Storage::F16(_) => None,
        }
    }

    pub fn as_f16(&self) -> Option<&[Half]> {
        match &self.storage {
            Storage::F16(v) => Some(v),
            Storage::F32(_) => None,
        }
    }

    /// Element values as `f32` (exact for both precisions).
    pub fn values(&self) -> Cow<'_, [f32]> {
        match &self.storage {
            Storage::F32(v) => Cow::Borrowed(v),
            Storage::F16(v) => {
                let mut out = vec![0.0; v.len()];
                halfnum::widen_slice(v, &mut out);
                Cow::Owned(out)
            }
        }
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.values().into_owned()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        let idx = row * self.cols + col;
        match &self.storage {
            Storage::F32(v) => v[idx],
            Storage::F16(v) => halfnum::widen(v[idx]),
        }
    }

    pub fn row(&self, row: usize) -> Vec<f32> {
        (0..self.cols).map(|c| self.get(row, c)).collect()
    }

    pub fn has_non_finite(&self) -> bool {
        match &self.storage {
            Storage::F32(v) => v.iter().any(|x| !x.is_finite()),
            Storage::F16(v) => v.iter().any(|h| !h.is_finite()),
        }
    }

    /// Accounted deep copy.
    pub fn try_clone(&self) -> Result<PrecisionMatrix, TensorError> {
        let allocation = Self::reserve(self.accountant(), self.rows, self.cols, self.precision())?;
        Ok(PrecisionMatrix {
            rows: self.rows,
            cols: self.cols,
            storage: self.storage.clone(),
            allocation,
        })
    }

    /// A new matrix on the same accountant built from `f32` results, each
    /// rounded to `precision`.
    pub fn new_like(
        &self,
        rows: usize,
        cols: usize,
        data: Vec<f32>,
        precision: Precision,
    ) -> Result<PrecisionMatrix, TensorError> {
        Self::from_f32(self.accountant(), rows, cols, data, precision)
    }

    /// Element-wise narrowing or widening into a new allocation.
    pub fn cast(&self, to: Precision) -> Result<PrecisionMatrix, TensorError> {
        let allocation = Self::reserve(self.accountant(), self.rows, self.cols, to)?;
        let storage = match (&self.storage, to) {
            (Storage::F16(v), Precision::Fp16) => Storage::F16(v.clone()),
            (Storage::F32(v), Precision::Fp32) => Storage::F32(v.clone()),
            (Storage::F32(v), Precision::Fp16) => {
                let mut out = vec![Half::ZERO; v.len()];
                halfnum::narrow_slice(v, &mut out);
                Storage::F16(out)
            }
            (Storage::F16(v), Precision::Fp32) => {
                let mut out = vec![0.0; v.len()];
                halfnum::widen_slice(v, &mut out);
                Storage::F32(out)
            }
        };
        Ok(PrecisionMatrix {
            rows: self.rows,
            cols: self.cols,
            storage,
            allocation,
        })
    }

    /// Applies `f` in `f32` to every element, rounding results to the input
    /// precision.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<PrecisionMatrix, TensorError> {
        let precision = self.precision();
        let allocation = Self::reserve(self.accountant(), self.rows, self.cols, precision)?;
        let storage = match &self.storage {
            Storage::F32(v) => Storage::F32(v.iter().map(|&x| f(x)).collect()),
            Storage::F16(v) => {
                Storage::F16(v.iter().map(|&h| halfnum::narrow(f(halfnum::widen(h)))).collect())
            }
        };
        Ok(PrecisionMatrix {
            rows: self.rows,
            cols: self.cols,
            storage,
            allocation,
        })
    }

    /// Element-wise binary function; operands must agree in shape and precision.
    pub fn zip_map(
        &self,
        other: &PrecisionMatrix,
        op: &'static str,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<PrecisionMatrix, TensorError> {
        self.check_same_shape(other, op)?;
        self.check_same_precision(other, op)?;
        let precision = self.precision();
        let (a, b) = (self.values(), other.values());
        let data: Vec<f32> = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
        Self::from_f32(self.accountant(), self.rows, self.cols, data, precision)
    }

    pub fn pointwise(&self, func: Pointwise) -> Result<PrecisionMatrix, TensorError> {
        self.map(|x| func.apply(x))
    }

    pub fn add(&self, other: &PrecisionMatrix) -> Result<PrecisionMatrix, TensorError> {
        self.zip_map(other, "add", |x, y| x + y)
    }

    pub fn mul_elementwise(&self, other: &PrecisionMatrix) -> Result<PrecisionMatrix, TensorError> {
        self.zip_map(other, "mul", |x, y| x * y)
    }

    pub fn scale(&self, c: f32) -> Result<PrecisionMatrix, TensorError> {
        self.map(|x| x * c)
    }

    pub fn transpose(&self) -> Result<PrecisionMatrix, TensorError> {
        let src = self.values();
        let mut data = vec![0.0; self.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = src[r * self.cols + c];
            }
        }
        Self::from_f32(self.accountant(), self.cols, self.rows, data, self.precision())
    }

    /// Copies out the given rows and, when `cols` is set, the given columns.
    pub fn select(&self, rows: &[usize], cols: Option<&[usize]>) -> Result<PrecisionMatrix, TensorError> {
        let src = self.values();
        let out_cols = cols.map_or(self.cols, |c| c.len());
        let mut data = Vec::with_capacity(rows.len() * out_cols);
        for &r in rows {
            let row = &src[r * self.cols..(r + 1) * self.cols];
            match cols {
                Some(cs) => data.extend(cs.iter().map(|&c| row[c])),
                None => data.extend_from_slice(row),
            }
        }
        Self::from_f32(self.accountant(), rows.len(), out_cols, data, self.precision())
    }

    /// Inverse of [`select`](Self::select): places `self` into a zero matrix
    /// of shape `(rows_total, cols_total)` at the given positions.
    pub fn scatter(
        &self,
        rows_total: usize,
        cols_total: usize,
        rows: &[usize],
        cols: Option<&[usize]>,
    ) -> Result<PrecisionMatrix, TensorError> {
        let src = self.values();
        let mut data = vec![0.0; rows_total * cols_total];
        for (i, &r) in rows.iter().enumerate() {
            let row = &src[i * self.cols..(i + 1) * self.cols];
            match cols {
                Some(cs) => {
                    for (j, &c) in cs.iter().enumerate() {
                        data[r * cols_total + c] = row[j];
                    }
                }
                None => data[r * cols_total..r * cols_total + self.cols].copy_from_slice(row),
            }
        }
        Self::from_f32(self.accountant(), rows_total, cols_total, data, self.precision())
    }

    /// `self * other` with products formed in `f32` from the operands and
    /// summed in `accumulate` precision; the result takes the operand precision.
    pub fn matmul(
        &self,
        other: &PrecisionMatrix,
        accumulate: Precision,
    ) -> Result<PrecisionMatrix, TensorError> {
        gemm::gemm(self, Transpose::No, other, Transpose::No, accumulate)
    }

    /// `op(self) * op(other)` without materialising transposes.
    pub fn gemm(
        &self,
        ta: Transpose,
        other: &PrecisionMatrix,
        tb: Transpose,
        accumulate: Precision,
    ) -> Result<PrecisionMatrix, TensorError> {
        gemm::gemm(self, ta, other, tb, accumulate)
    }

    /// Overwrites every element in place, rounding to the stored precision.
    pub fn assign_f32(&mut self, data: &[f32]) -> Result<(), TensorError> {
        if data.len() != self.len() {
            return Err(TensorError::ShapeMismatch {
                op: "assign",
                left: self.shape(),
                right: (data.len(), 1),
            });
        }
        match &mut self.storage {
            Storage::F32(v) => v.copy_from_slice(data),
            Storage::F16(v) => halfnum::narrow_slice(data, v),
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.values().iter().map(|&x| x as f64).sum()
    }

    fn check_same_shape(&self, other: &PrecisionMatrix, op: &'static str) -> Result<(), TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    fn check_same_precision(&self, other: &PrecisionMatrix, op: &'static str) -> Result<(), TensorError> {
        if self.precision() != other.precision() {
            return Err(TensorError::PrecisionMismatch {
                op,
                left: self.precision(),
                right: other.precision(),
            });
        }
        Ok(())
    }
}

impl fmt::Debug for PrecisionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PrecisionMatrix({}x{} {}", self.rows, self.cols, self.precision())?;
        if self.len() <= 16 {
            write!(f, " {:?}", self.values())?;
        }
        f.write_str(")")
    }
}
