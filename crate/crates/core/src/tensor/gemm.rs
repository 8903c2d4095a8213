use serde::{Deserialize, Serialize};

use super::{Precision, PrecisionMatrix, Storage, TensorError};
use crate::halfnum::{self, Half};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

/// Logical GEMM dimensions: `(m x k) * (k x n)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GemmShape {
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

impl GemmShape {
    pub fn new(m: usize, k: usize, n: usize) -> GemmShape {
        GemmShape { m, k, n }
    }
}

/// Tensor Core rule: FP16 operands and every GEMM dimension divisible by 8.
pub fn tensor_core_eligible(shape: GemmShape, precision: Precision) -> bool {
    precision == Precision::Fp16 && shape.m % 8 == 0 && shape.k % 8 == 0 && shape.n % 8 == 0
}

/// Row/column strides of `op(M)` for a row-major `M`.
struct View<'a> {
    data: &'a [f32],
    rows: usize,
    cols: usize,
    row_stride: usize,
    col_stride: usize,
}

impl View<'_> {
    #[inline]
    fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.row_stride + c * self.col_stride]
    }
}

fn view<'a>(m: &PrecisionMatrix, values: &'a [f32], t: Transpose) -> View<'a> {
    match t {
        Transpose::No => View {
            data: values,
            rows: m.rows,
            cols: m.cols,
            row_stride: m.cols,
            col_stride: 1,
        },
        Transpose::Yes => View {
            data: values,
            rows: m.cols,
            cols: m.rows,
            row_stride: 1,
            col_stride: m.cols,
        },
    }
}

pub(super) fn gemm(
    a: &PrecisionMatrix,
    ta: Transpose,
    b: &PrecisionMatrix,
    tb: Transpose,
    accumulate: Precision,
) -> Result<PrecisionMatrix, TensorError> {
    if a.precision() != b.precision() {
        return Err(TensorError::PrecisionMismatch {
            op: "matmul",
            left: a.precision(),
            right: b.precision(),
        });
    }
    let a_values = a.values();
    let b_values = b.values();
    let av = view(a, &a_values, ta);
    let bv = view(b, &b_values, tb);
    if av.cols != bv.rows {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: (av.rows, av.cols),
            right: (bv.rows, bv.cols),
        });
    }
    let (m, k, n) = (av.rows, av.cols, bv.cols);
    let precision = a.precision();
    let allocation = PrecisionMatrix::reserve(a.accountant(), m, n, precision)?;

    let out = match accumulate {
        Precision::Fp32 => accumulate_f32(&av, &bv, m, k, n),
        Precision::Fp16 => accumulate_f16(&av, &bv, m, k, n),
    };
    let storage = match precision {
        Precision::Fp32 => Storage::F32(out),
        Precision::Fp16 => {
            let mut h = vec![Half::ZERO; out.len()];
            halfnum::narrow_slice(&out, &mut h);
            Storage::F16(h)
        }
    };
    Ok(PrecisionMatrix {
        rows: m,
        cols: n,
        storage,
        allocation,
    })
}

fn accumulate_f32(a: &View<'_>, b: &View<'_>, m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: the views describe in-bounds strided access into slices that
    // outlive the call, and `c` is a distinct m*n buffer with row stride n.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// Sequential dot products whose running sum is rounded to binary16 after
/// every addition.
fn accumulate_f16(a: &View<'_>, b: &View<'_>, m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f32;
            for p in 0..k {
                acc = halfnum::round_to_half(acc + a.at(i, p) * b.at(p, j));
            }
            c[i * n + j] = acc;
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::MemoryAccountant;

    fn mat(acct: &MemoryAccountant, rows: usize, cols: usize, data: &[f32], p: Precision) -> PrecisionMatrix {
        PrecisionMatrix::from_f32(acct, rows, cols, data.to_vec(), p).unwrap()
    }

    #[test]
    fn identity_product() {
        let acct = MemoryAccountant::new();
        let i = mat(&acct, 2, 2, &[1.0, 0.0, 0.0, 1.0], Precision::Fp32);
        let b = mat(&acct, 2, 2, &[5.0, 6.0, 7.0, 8.0], Precision::Fp32);
        let c = i.matmul(&b, Precision::Fp32).unwrap();
        assert_eq!(c.to_vec(), vec![5.0, 6.0, 7.0, 8.0]);
    }

    /// Sequential fp16 sum of `terms` ones, the brute-force reference.
    fn sequential_half_sum(terms: usize) -> f32 {
        let one = Half::ONE;
        let mut acc = Half::ZERO;
        for _ in 0..terms {
            acc = halfnum::binop(acc, halfnum::binop(one, one, halfnum::BinOp::Mul), halfnum::BinOp::Add);
        }
        halfnum::widen(acc)
    }

    #[test]
    fn fp16_accumulate_absorbs_below_ulp() {
        let acct = MemoryAccountant::new();
        for &terms in &[2048usize, 4096] {
            let a = mat(&acct, 1, terms, &vec![1.0; terms], Precision::Fp16);
            let b = mat(&acct, terms, 1, &vec![1.0; terms], Precision::Fp16);
            let c = a.matmul(&b, Precision::Fp16).unwrap();
            assert_eq!(c.get(0, 0), sequential_half_sum(terms));
            assert_eq!(c.get(0, 0), 2048.0);
            let wide = a.matmul(&b, Precision::Fp32).unwrap();
            assert_eq!(wide.get(0, 0), terms as f32);
        }
    }

    #[test]
    fn fp32_accumulate_tenth_dot() {
        let acct = MemoryAccountant::new();
        let a = mat(&acct, 1, 8, &[0.1; 8], Precision::Fp16);
        let b = mat(&acct, 8, 1, &[0.1; 8], Precision::Fp16);
        let c = a.matmul(&b, Precision::Fp32).unwrap();
        let w = halfnum::widen(halfnum::narrow(0.1));
        let expected: f32 = (0..8).map(|_| w * w).sum();
        assert_eq!(c.as_f16().unwrap()[0], halfnum::narrow(expected));
    }

    #[test]
    fn transposed_operands() {
        let acct = MemoryAccountant::new();
        // a: 2x3, b: 2x3 -> a * b^T is 2x2; a^T * b is 3x3.
        let a = mat(&acct, 2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], Precision::Fp32);
        let b = mat(&acct, 2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0], Precision::Fp32);
        let abt = a.gemm(Transpose::No, &b, Transpose::Yes, Precision::Fp32).unwrap();
        assert_eq!(abt.to_vec(), vec![4.0, 2.0, 10.0, 5.0]);
        let atb = a.gemm(Transpose::Yes, &b, Transpose::No, Precision::Fp32).unwrap();
        let explicit = a.transpose().unwrap().matmul(&b, Precision::Fp32).unwrap();
        assert_eq!(atb.to_vec(), explicit.to_vec());
        for acc in [Precision::Fp16, Precision::Fp32] {
            let h = a.cast(Precision::Fp16).unwrap();
            let hb = b.cast(Precision::Fp16).unwrap();
            let hbt = hb.transpose().unwrap();
            let x = h.gemm(Transpose::Yes, &hbt, Transpose::Yes, acc).unwrap();
            let y = h.transpose().unwrap().matmul(&hb, acc).unwrap();
            assert_eq!(x.as_f16(), y.as_f16());
        }
    }

    #[test]
    fn errors() {
        let acct = MemoryAccountant::new();
        let a = mat(&acct, 2, 3, &[0.0; 6], Precision::Fp32);
        let b = mat(&acct, 2, 3, &[0.0; 6], Precision::Fp32);
        assert!(matches!(a.matmul(&b, Precision::Fp32), Err(TensorError::ShapeMismatch { .. })));
        let h = mat(&acct, 3, 2, &[0.0; 6], Precision::Fp16);
        assert!(matches!(a.matmul(&h, Precision::Fp32), Err(TensorError::PrecisionMismatch { .. })));
    }

    #[test]
    fn overflow_in_fp16_product() {
        let acct = MemoryAccountant::new();
        let a = mat(&acct, 1, 1, &[300.0], Precision::Fp16);
        let c = a.matmul(&a, Precision::Fp32).unwrap();
        assert!(c.has_non_finite());
    }

    #[test]
    fn eligibility_rule() {
        assert!(tensor_core_eligible(GemmShape::new(2712, 2712, 16), Precision::Fp16));
        assert!(!tensor_core_eligible(GemmShape::new(2708, 2708, 16), Precision::Fp16));
        assert!(!tensor_core_eligible(GemmShape::new(8, 8, 8), Precision::Fp32));
    }
}
