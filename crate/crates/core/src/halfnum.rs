//! IEEE 754 binary16 in software.
//!
//! [`narrow`] is the single trusted rounding routine: every FP16 code path in
//! the crate funnels through it. Arithmetic is emulated by widening to `f32`,
//! computing there and narrowing once, so each FP16 operation incurs exactly
//! one rounding to binary16.
//!
//! NaN inputs narrow to the canonical quiet NaN `0x7E00` regardless of sign or
//! payload.

use std::cmp::Ordering;
use std::fmt;
use std::sync::OnceLock;

/// A binary16 value stored as its raw bit pattern.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
#[repr(transparent)]
pub struct Half(u16);

impl Half {
    pub const ZERO: Half = Half(0x0000);
    pub const NEG_ZERO: Half = Half(0x8000);
    pub const ONE: Half = Half(0x3C00);
    pub const INFINITY: Half = Half(0x7C00);
    pub const NEG_INFINITY: Half = Half(0xFC00);
    /// Canonical quiet NaN produced by [`narrow`].
    pub const NAN: Half = Half(0x7E00);
    /// Largest finite value, 65504.
    pub const MAX: Half = Half(0x7BFF);
    /// Smallest positive normal value, 2^-14.
    pub const MIN_POSITIVE: Half = Half(0x0400);
    /// Smallest positive subnormal value, 2^-24.
    pub const MIN_POSITIVE_SUBNORMAL: Half = Half(0x0001);

    #[inline]
    pub const fn from_bits(bits: u16) -> Half {
        Half(bits)
    }

    #[inline]
    pub const fn to_bits(self) -> u16 {
        self.0
    }

    #[inline]
    pub fn from_f32(x: f32) -> Half {
        narrow(x)
    }

    #[inline]
    pub fn to_f32(self) -> f32 {
        widen(self)
    }

    #[inline]
    pub fn is_nan(self) -> bool {
        self.0 & 0x7C00 == 0x7C00 && self.0 & 0x03FF != 0
    }

    #[inline]
    pub fn is_infinite(self) -> bool {
        self.0 & 0x7FFF == 0x7C00
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.0 & 0x7C00 != 0x7C00
    }

    #[inline]
    pub fn is_sign_negative(self) -> bool {
        self.0 & 0x8000 != 0
    }

    #[inline]
    pub fn add(self, rhs: Half) -> Half {
        binop(self, rhs, BinOp::Add)
    }

    #[inline]
    pub fn mul(self, rhs: Half) -> Half {
        binop(self, rhs, BinOp::Mul)
    }
}

impl fmt::Debug for Half {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Half({:#06x} = {})", self.0, widen(*self))
    }
}

impl fmt::Display for Half {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&widen(*self), f)
    }
}

impl PartialOrd for Half {
    /// Numeric order; `-0 == +0` and NaN is unordered.
    fn partial_cmp(&self, other: &Half) -> Option<Ordering> {
        widen(*self).partial_cmp(&widen(*other))
    }
}

impl From<Half> for f32 {
    fn from(h: Half) -> f32 {
        widen(h)
    }
}

/// Rounds an `f32` to the nearest binary16, ties to even.
///
/// Magnitudes at or above 65520 become infinity; magnitudes at or below
/// 2^-25 become signed zero.
pub fn narrow(x: f32) -> Half {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let abs = bits & 0x7FFF_FFFF;

    if abs > 0x7F80_0000 {
        return Half::NAN;
    }
    if abs == 0x7F80_0000 {
        return Half(sign | 0x7C00);
    }

    let biased = (abs >> 23) as i32;
    let mantissa = abs & 0x007F_FFFF;

    // Normal binary16 range starts at 2^-14 (f32 biased exponent 113).
    if biased >= 113 {
        let exp = biased - 127 + 15;
        if exp >= 31 {
            return Half(sign | 0x7C00);
        }
        let mut h = ((exp as u32) << 10) | (mantissa >> 13);
        let rest = mantissa & 0x1FFF;
        if rest > 0x1000 || (rest == 0x1000 && h & 1 == 1) {
            // A carry out of the mantissa bumps the exponent; from the top
            // binade it lands exactly on the infinity pattern.
            h += 1;
        }
        return Half(sign | h as u16);
    }

    // f32 subnormals are far below half the smallest binary16 subnormal.
    if biased == 0 {
        return Half(sign);
    }

    // Value = full * 2^(biased - 150); binary16 subnormal unit is 2^-24.
    let full = mantissa | 0x0080_0000;
    let shift = (126 - biased) as u32;
    if shift > 24 {
        return Half(sign);
    }
    let mut q = full >> shift;
    let rest = full & ((1u32 << shift) - 1);
    let halfway = 1u32 << (shift - 1);
    if rest > halfway || (rest == halfway && q & 1 == 1) {
        q += 1;
    }
    Half(sign | q as u16)
}

/// Exact embedding of a binary16 into `f32`.
pub fn widen(h: Half) -> f32 {
    let bits = h.0 as u32;
    let sign = (bits & 0x8000) << 16;
    let exp = (bits >> 10) & 0x1F;
    let mantissa = bits & 0x03FF;

    let out = match (exp, mantissa) {
        (0, 0) => sign,
        (0, _) => {
            // Subnormal: shift the leading one into the implicit position.
            let lz = mantissa.leading_zeros() - 21;
            let m = (mantissa << lz) & 0x03FF;
            let e = 113 - lz;
            sign | (e << 23) | (m << 13)
        }
        (31, 0) => sign | 0x7F80_0000,
        (31, _) => sign | 0x7FC0_0000 | (mantissa << 13),
        _ => sign | ((exp + 112) << 23) | (mantissa << 13),
    };
    f32::from_bits(out)
}

fn widen_table() -> &'static [f32] {
    static TABLE: OnceLock<Vec<f32>> = OnceLock::new();
    TABLE.get_or_init(|| (0..=u16::MAX).map(|b| widen(Half(b))).collect())
}

/// Widens a slice through a lookup table built from [`widen`].
pub fn widen_slice(src: &[Half], dst: &mut [f32]) {
    assert_eq!(src.len(), dst.len());
    let table = widen_table();
    for (d, s) in dst.iter_mut().zip(src) {
        *d = table[s.0 as usize];
    }
}

pub fn narrow_slice(src: &[f32], dst: &mut [Half]) {
    assert_eq!(src.len(), dst.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = narrow(s);
    }
}

/// `f32 -> binary16 -> f32`, the rounding applied after each emulated FP16 op.
#[inline]
pub fn round_to_half(x: f32) -> f32 {
    widen(narrow(x))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Mul,
}

/// FP16 arithmetic: widen both operands, compute in `f32`, narrow once.
#[inline]
pub fn binop(a: Half, b: Half, op: BinOp) -> Half {
    let (x, y) = (widen(a), widen(b));
    narrow(match op {
        BinOp::Add => x + y,
        BinOp::Mul => x * y,
    })
}
