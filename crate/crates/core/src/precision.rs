//! Accumulation precision for collective reductions.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::scalar::Scalar;

/// Largest finite bfloat16 value, `(2 - 2^-7)·2^127`.
pub const BF16_MAX: f64 = 3.389_531_389_251_535_5e38;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PrecisionMode {
    /// Native arithmetic, no rounding.
    #[default]
    Full64,
    /// Operands and every partial sum are rounded to bfloat16
    /// (8 exponent bits, 7 mantissa bits, round-to-nearest-even).
    Emulated16,
}

impl PrecisionMode {
    #[inline]
    pub fn round<T: Scalar>(self, v: T) -> T {
        match self {
            PrecisionMode::Full64 => v,
            PrecisionMode::Emulated16 => T::cst(round_bf16(v.to_f64_lossless())),
        }
    }

    /// One accumulation step `acc + v` under this mode.
    #[inline]
    pub fn accumulate<T: Scalar>(self, acc: T, v: T) -> T {
        match self {
            PrecisionMode::Full64 => acc + v,
            PrecisionMode::Emulated16 => self.round(acc + self.round(v)),
        }
    }

    /// Width label used for communication accounting.
    pub fn wire_bits(self) -> u8 {
        match self {
            PrecisionMode::Full64 => 32,
            PrecisionMode::Emulated16 => 16,
        }
    }
}

impl fmt::Display for PrecisionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrecisionMode::Full64 => "full64",
            PrecisionMode::Emulated16 => "emulated16",
        })
    }
}

impl FromStr for PrecisionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full64" => Ok(PrecisionMode::Full64),
            "emulated16" => Ok(PrecisionMode::Emulated16),
            other => Err(Error::Config(format!(
                "unknown precision mode `{other}` (expected full64 or emulated16)"
            ))),
        }
    }
}

/// Rounds to the nearest bfloat16 value, ties to even, with bfloat16
/// subnormals and overflow to infinity.
pub fn round_bf16(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    let biased = ((x.to_bits() >> 52) & 0x7ff) as i32;
    if biased == 0 {
        // f64 subnormals are far below half the smallest bfloat16 subnormal.
        return 0.0f64.copysign(x);
    }
    let exponent = biased - 1023;
    let quantum_exp = exponent.max(-126) - 7;
    let quantum = f64::from_bits(((quantum_exp + 1023) as u64) << 52);
    let y = (x / quantum).round_ties_even() * quantum;
    if y.abs() > BF16_MAX {
        f64::INFINITY.copysign(x)
    } else {
        y
    }
}
