//! Floating-point formats and round-to-format emulation.
//!
//! Every value is stored in a native binary type; "computing at precision p"
//! means performing each elementary operation natively and then rounding the
//! result to p with round-to-nearest, ties-to-even. Subnormals of the target
//! format are honoured and overflow produces a signed infinity.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::matrix::DenseMatrix;
use crate::scalar::Real;

/// The four supported binary formats.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Bf16,
    Fp16,
    Fp32,
    Fp64,
}

impl Format {
    pub const ALL: [Format; 4] = [Format::Bf16, Format::Fp16, Format::Fp32, Format::Fp64];

    pub fn name(self) -> &'static str {
        match self {
            Format::Bf16 => "bf16",
            Format::Fp16 => "fp16",
            Format::Fp32 => "fp32",
            Format::Fp64 => "fp64",
        }
    }

    /// (significand bits incl. implicit bit, exponent bits).
    pub fn bits(self) -> (u32, u32) {
        match self {
            Format::Bf16 => (8, 8),
            Format::Fp16 => (11, 5),
            Format::Fp32 => (24, 8),
            Format::Fp64 => (53, 11),
        }
    }

    pub fn params(self) -> PrecisionFormat {
        PrecisionFormat::new(self)
    }

    pub fn unit_roundoff(self) -> f64 {
        pow2(-(self.bits().0 as i32))
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bf16" | "bfloat16" => Ok(Format::Bf16),
            "fp16" | "half" => Ok(Format::Fp16),
            "fp32" | "single" => Ok(Format::Fp32),
            "fp64" | "double" => Ok(Format::Fp64),
            _ => Err(Error::UnknownFormat(s.to_string())),
        }
    }
}

/// Parameters of a binary floating-point format.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrecisionFormat {
    pub name: Format,
    /// Significand bits, implicit bit included.
    pub t: u32,
    /// Exponent bits.
    pub e: u32,
    /// Unit roundoff 2^-t.
    pub u: f64,
    /// Smallest positive normalized number.
    pub x_min: f64,
    /// Largest finite number.
    pub x_max: f64,
    emin: i32,
}

impl PrecisionFormat {
    pub fn new(name: Format) -> Self {
        let (t, e) = name.bits();
        let emax = (1i32 << (e - 1)) - 1;
        let emin = 1 - emax;
        // 2^emax * (2 - 2^(1-t)) written as (2^t - 1) * 2^(emax - t + 1) to stay exact
        let x_max = ((1u64 << t) - 1) as f64 * pow2(emax - t as i32 + 1);
        Self {
            name,
            t,
            e,
            u: pow2(-(t as i32)),
            x_min: pow2(emin),
            x_max,
            emin,
        }
    }

    /// Smallest positive subnormal number.
    pub fn x_min_subnormal(&self) -> f64 {
        pow2(self.emin - self.t as i32 + 1)
    }

    /// Rounds `x` to the nearest value of this format.
    pub fn round_f64(&self, x: f64) -> f64 {
        if self.name == Format::Fp64 || x == 0.0 || !x.is_finite() {
            return x;
        }
        let ax = x.abs();
        let exp = if ax >= self.x_min {
            ((ax.to_bits() >> 52) & 0x7ff) as i32 - 1023
        } else {
            self.emin
        };
        let q = exp - (self.t as i32 - 1);
        let r = (ax * pow2(-q)).round_ties_even() * pow2(q);
        let r = if r > self.x_max { f64::INFINITY } else { r };
        r.copysign(x)
    }

    #[inline]
    pub fn round<T: Real>(&self, x: T) -> T {
        if self.t >= T::MANTISSA_BITS {
            // storage is no wider than the format: nothing to do
            return x;
        }
        T::of(self.round_f64(x.f64()))
    }
}

impl From<Format> for PrecisionFormat {
    fn from(f: Format) -> Self {
        PrecisionFormat::new(f)
    }
}

/// 2^k for k in `-1074..=1023`, built from bits.
#[inline]
pub(crate) fn pow2(k: i32) -> f64 {
    debug_assert!((-1074..=1023).contains(&k));
    if k >= -1022 {
        f64::from_bits(((k + 1023) as u64) << 52)
    } else {
        f64::from_bits(1u64 << (k + 1074))
    }
}

pub fn round_scalar(x: f64, fmt: Format) -> f64 {
    fmt.params().round_f64(x)
}

pub fn round_matrix<T: Real>(a: &DenseMatrix<T>, fmt: Format) -> DenseMatrix<T> {
    let p = fmt.params();
    a.map(|x| p.round(x))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Sqrt,
}

/// One elementary operation evaluated natively and rounded to `fmt`.
/// `b` is ignored for `Sqrt`.
pub fn fp_op(op: Op, a: f64, b: f64, fmt: Format) -> f64 {
    let exact = match op {
        Op::Add => a + b,
        Op::Sub => a - b,
        Op::Mul => a * b,
        Op::Div => a / b,
        Op::Sqrt => a.sqrt(),
    };
    round_scalar(exact, fmt)
}
