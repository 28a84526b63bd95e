//! Bit-exact software emulation of the minifloat formats used for training:
//! FP8 E4M3 and E5M2, plus BF16 and FP16.
//!
//! All arithmetic runs in `f64`, which represents every value of every
//! supported format exactly, so decoding never rounds and encoding rounds
//! exactly once (round-to-nearest, ties to even mantissa).
//!
//! E4M3 follows the OCP FP8 convention: bias 7, no infinities, and a single
//! NaN pattern per sign (`S.1111.111`), which extends the normal range up to
//! 448. E5M2, BF16 and FP16 are IEEE-like: the all-ones exponent holds
//! infinities and NaNs.

use std::fmt;

/// Supported storage formats.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Format {
    E4M3,
    E5M2,
    BF16,
    FP16,
}

impl Format {
    pub const ALL: [Format; 4] = [Format::E4M3, Format::E5M2, Format::BF16, Format::FP16];

    pub fn spec(self) -> &'static FormatSpec {
        match self {
            Format::E4M3 => &E4M3,
            Format::E5M2 => &E5M2,
            Format::BF16 => &BF16,
            Format::FP16 => &FP16,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Format::E4M3 => "e4m3",
            Format::E5M2 => "e5m2",
            Format::BF16 => "bf16",
            Format::FP16 => "fp16",
        }
    }

    pub fn parse(s: &str) -> Option<Format> {
        match s.to_ascii_lowercase().as_str() {
            "e4m3" => Some(Format::E4M3),
            "e5m2" => Some(Format::E5M2),
            "bf16" => Some(Format::BF16),
            "fp16" => Some(Format::FP16),
            _ => None,
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How NaN is encoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NanPolicy {
    /// Only `S.1..1.1..1` is NaN; the all-ones exponent otherwise holds normals.
    AllOnesOnly,
    /// IEEE 754: all-ones exponent with non-zero mantissa.
    Ieee,
}

/// What happens to finite values that round above `max_normal`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OverflowMode {
    /// Clamp to `±max_normal`.
    #[default]
    Saturate,
    /// Map to the overflow special: `±inf` when the format has it, NaN otherwise.
    ToSpecial,
}

/// Static description of a minifloat format.
#[derive(Clone, Debug, PartialEq)]
pub struct FormatSpec {
    pub name: Format,
    pub exponent_bits: u32,
    pub mantissa_bits: u32,
    pub bias: i32,
    pub has_infinity: bool,
    pub nan_policy: NanPolicy,
    pub max_normal: f64,
    pub min_subnormal: f64,
}

pub static E4M3: FormatSpec = FormatSpec {
    name: Format::E4M3,
    exponent_bits: 4,
    mantissa_bits: 3,
    bias: 7,
    has_infinity: false,
    nan_policy: NanPolicy::AllOnesOnly,
    max_normal: 448.0,
    min_subnormal: 1.0 / 512.0,
};

pub static E5M2: FormatSpec = FormatSpec {
    name: Format::E5M2,
    exponent_bits: 5,
    mantissa_bits: 2,
    bias: 15,
    has_infinity: true,
    nan_policy: NanPolicy::Ieee,
    max_normal: 57344.0,
    min_subnormal: 1.0 / 65536.0,
};

pub static BF16: FormatSpec = FormatSpec {
    name: Format::BF16,
    exponent_bits: 8,
    mantissa_bits: 7,
    bias: 127,
    has_infinity: true,
    nan_policy: NanPolicy::Ieee,
    // (2 - 2^-7) * 2^127
    max_normal: 3.389_531_389_251_535_5e38,
    // 2^-133
    min_subnormal: 9.183_549_615_799_121e-41,
};

pub static FP16: FormatSpec = FormatSpec {
    name: Format::FP16,
    exponent_bits: 5,
    mantissa_bits: 10,
    bias: 15,
    has_infinity: true,
    nan_policy: NanPolicy::Ieee,
    max_normal: 65504.0,
    // 2^-24
    min_subnormal: 5.960_464_477_539_063e-8,
};

/// Exact `2^n` for `n` in the normal `f64` exponent range.
#[inline]
pub(crate) fn exp2i(n: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&n));
    f64::from_bits(((n + 1023) as u64) << 52)
}

/// Unbiased binary exponent of a positive finite `f64` (floor of log2).
#[inline]
fn ilog2(a: f64) -> i32 {
    let bits = a.to_bits();
    let e = ((bits >> 52) & 0x7ff) as i32;
    if e == 0 {
        // f64 subnormal; far below every supported format's range.
        -1075
    } else {
        e - 1023
    }
}

/// Result of rounding a single value into a format.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rounded {
    pub value: f64,
    /// A finite input beyond `max_normal` was clamped or sent to a special.
    pub saturated: bool,
    /// A non-zero finite input rounded to zero.
    pub underflowed: bool,
}

impl FormatSpec {
    pub fn width(&self) -> u32 {
        1 + self.exponent_bits + self.mantissa_bits
    }

    pub fn code_count(&self) -> usize {
        1usize << self.width()
    }

    /// Smallest normal exponent (unbiased).
    pub fn min_exponent(&self) -> i32 {
        1 - self.bias
    }

    fn sign_mask(&self) -> u16 {
        1 << (self.exponent_bits + self.mantissa_bits)
    }

    fn exp_field_max(&self) -> u16 {
        (1 << self.exponent_bits) - 1
    }

    fn mant_mask(&self) -> u16 {
        (1 << self.mantissa_bits) - 1
    }

    /// Canonical positive NaN code.
    pub fn nan_code(&self) -> u16 {
        match self.nan_policy {
            NanPolicy::AllOnesOnly => (self.exp_field_max() << self.mantissa_bits) | self.mant_mask(),
            NanPolicy::Ieee => {
                (self.exp_field_max() << self.mantissa_bits) | (1 << (self.mantissa_bits - 1))
            }
        }
    }

    fn inf_code(&self) -> Option<u16> {
        self.has_infinity.then(|| self.exp_field_max() << self.mantissa_bits)
    }

    /// Code of `+max_normal`.
    pub fn max_code(&self) -> u16 {
        match self.nan_policy {
            NanPolicy::AllOnesOnly => {
                (self.exp_field_max() << self.mantissa_bits) | (self.mant_mask() - 1)
            }
            NanPolicy::Ieee => ((self.exp_field_max() - 1) << self.mantissa_bits) | self.mant_mask(),
        }
    }

    pub fn is_nan_code(&self, bits: u16) -> bool {
        let mag = bits & !self.sign_mask();
        let e = mag >> self.mantissa_bits;
        let m = mag & self.mant_mask();
        match self.nan_policy {
            NanPolicy::AllOnesOnly => e == self.exp_field_max() && m == self.mant_mask(),
            NanPolicy::Ieee => e == self.exp_field_max() && m != 0,
        }
    }

    /// Spacing of representable values around `v` (for finite `v` within range).
    pub fn ulp(&self, v: f64) -> f64 {
        let a = v.abs();
        let e = if a == 0.0 { self.min_exponent() } else { ilog2(a).max(self.min_exponent()) };
        exp2i(e - self.mantissa_bits as i32)
    }

    /// Round to the nearest representable value, ties to even.
    #[inline]
    pub fn round(&self, v: f64, overflow: OverflowMode) -> f64 {
        self.round_counted(v, overflow).value
    }

    #[inline]
    pub fn round_counted(&self, v: f64, overflow: OverflowMode) -> Rounded {
        let (code, sat, under) = self.encode_inner(v, overflow);
        Rounded { value: self.decode_bits(code), saturated: sat, underflowed: under }
    }

    /// Rounds the magnitude, returning (unbiased exponent, integer significand)
    /// with `value = q * 2^(e - mantissa_bits)`. `a` must be positive and finite.
    #[inline]
    fn round_magnitude(&self, a: f64) -> (i32, u64) {
        let m = self.mantissa_bits as i32;
        let mut e = ilog2(a).max(self.min_exponent());
        // Scaling by a power of two is exact; only the rounding step is inexact.
        let mut q = (a * exp2i(m - e)).round_ties_even() as u64;
        if q == 1u64 << (m + 1) {
            q >>= 1;
            e += 1;
        }
        (e, q)
    }

    /// Encode to raw bits, also reporting (saturated, underflowed).
    #[inline]
    pub fn encode_counted(&self, v: f64, overflow: OverflowMode) -> (u16, bool, bool) {
        self.encode_inner(v, overflow)
    }

    #[inline]
    fn encode_inner(&self, v: f64, overflow: OverflowMode) -> (u16, bool, bool) {
        if v.is_nan() {
            return (self.nan_code(), false, false);
        }
        let sign = if v.is_sign_negative() { self.sign_mask() } else { 0 };
        let a = v.abs();
        if a == 0.0 {
            return (sign, false, false);
        }
        // Overflow follows IEEE: only values whose rounding on an unbounded
        // exponent grid lands above max_normal overflow.
        let (e, q) = if a.is_finite() { self.round_magnitude(a) } else { (i32::MAX, 0) };
        if e == i32::MAX || q as f64 * exp2i(e - self.mantissa_bits as i32) > self.max_normal {
            let saturated = a.is_finite();
            let mag = match overflow {
                OverflowMode::Saturate => self.max_code(),
                OverflowMode::ToSpecial => match self.inf_code() {
                    Some(inf) => inf,
                    None => return (self.nan_code() | sign, saturated, false),
                },
            };
            return (sign | mag, saturated, false);
        }
        let m = self.mantissa_bits;
        let hidden = 1u64 << m;
        let mag = if q < hidden {
            // Subnormal (e == min_exponent), possibly zero.
            q as u16
        } else {
            let biased = (e + self.bias) as u16;
            (biased << m) | (q - hidden) as u16
        };
        (sign | mag, false, mag == 0)
    }

    /// Exact value of a code.
    #[inline]
    pub fn decode_bits(&self, bits: u16) -> f64 {
        let negative = bits & self.sign_mask() != 0;
        let mag = bits & !self.sign_mask();
        let e = mag >> self.mantissa_bits;
        let m = (mag & self.mant_mask()) as f64;
        let mbits = self.mantissa_bits as i32;
        let value = if e == self.exp_field_max() && self.nan_policy == NanPolicy::Ieee {
            if m == 0.0 {
                f64::INFINITY
            } else {
                return f64::NAN;
            }
        } else if self.is_nan_code(bits) {
            return f64::NAN;
        } else if e == 0 {
            m * exp2i(self.min_exponent() - mbits)
        } else {
            let hidden = (1u64 << mbits) as f64;
            (hidden + m) * exp2i(e as i32 - self.bias - mbits)
        };
        if negative {
            -value
        } else {
            value
        }
    }
}

/// An encoded value in a given format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CodePoint {
    pub bits: u16,
    pub format: Format,
}

impl CodePoint {
    pub fn new(bits: u16, format: Format) -> Self {
        debug_assert!((bits as usize) < format.spec().code_count());
        CodePoint { bits, format }
    }

    pub fn decode(self) -> f64 {
        decode(self)
    }

    pub fn sign(self) -> u16 {
        let s = self.format.spec();
        self.bits >> (s.exponent_bits + s.mantissa_bits)
    }

    pub fn exponent_field(self) -> u16 {
        let s = self.format.spec();
        (self.bits >> s.mantissa_bits) & s.exp_field_max()
    }

    pub fn mantissa_field(self) -> u16 {
        self.bits & self.format.spec().mant_mask()
    }

    pub fn is_nan(self) -> bool {
        self.format.spec().is_nan_code(self.bits)
    }
}

/// Encode `value` with round-to-nearest-even.
pub fn encode(value: f64, format: Format, overflow: OverflowMode) -> CodePoint {
    let (bits, _, _) = format.spec().encode_inner(value, overflow);
    CodePoint { bits, format }
}

/// Exact value of a code point.
pub fn decode(code: CodePoint) -> f64 {
    code.format.spec().decode_bits(code.bits)
}

/// All codes of a format with their values: non-NaN codes sorted ascending
/// (with `-0` before `+0`), followed by the NaN codes in code order.
pub fn enumerate_values(format: Format) -> Vec<(CodePoint, f64)> {
    let spec = format.spec();
    let (mut ordered, nans): (Vec<_>, Vec<_>) = (0..spec.code_count() as u32)
        .map(|b| {
            let c = CodePoint::new(b as u16, format);
            (c, decode(c))
        })
        .partition(|(_, v)| !v.is_nan());
    ordered.sort_by(|a, b| a.1.total_cmp(&b.1));
    ordered.extend(nans);
    ordered
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_and_one() {
        assert_eq!(encode(0.0, Format::E4M3, OverflowMode::Saturate).bits, 0x00);
        assert_eq!(encode(-0.0, Format::E4M3, OverflowMode::Saturate).bits, 0x80);
        let one = encode(1.0, Format::E4M3, OverflowMode::Saturate);
        assert_eq!(one.exponent_field(), 7);
        assert_eq!(one.mantissa_field(), 0);
        assert_eq!(one.decode(), 1.0);
        assert_eq!(decode(CodePoint::new(0x00, Format::E5M2)), 0.0);
    }

    #[test]
    fn known_bit_patterns() {
        // E4M3 max 0x7E = 448, NaN 0x7F; E5M2 max 0x7B, inf 0x7C.
        assert_eq!(E4M3.decode_bits(0x7E), 448.0);
        assert!(E4M3.decode_bits(0x7F).is_nan());
        assert!(E4M3.decode_bits(0xFF).is_nan());
        assert_eq!(E4M3.decode_bits(0x78), 256.0);
        assert_eq!(E5M2.decode_bits(0x7B), 57344.0);
        assert_eq!(E5M2.decode_bits(0x7C), f64::INFINITY);
        assert_eq!(E5M2.decode_bits(0xFC), f64::NEG_INFINITY);
        assert_eq!(E5M2.decode_bits(0x01), 2f64.powi(-16));
        assert_eq!(FP16.decode_bits(0x3C00), 1.0);
        assert_eq!(FP16.decode_bits(0x7BFF), 65504.0);
        assert_eq!(BF16.decode_bits(0x3F80), 1.0);
        assert_eq!(BF16.decode_bits(0x7F7F), BF16.max_normal);
        assert_eq!(BF16.decode_bits(0x0001), BF16.min_subnormal);
        assert_eq!(FP16.decode_bits(0x0001), FP16.min_subnormal);
    }

    #[test]
    fn overflow_modes() {
        let sat = encode(1e6, Format::E4M3, OverflowMode::Saturate);
        assert_eq!(sat.decode(), 448.0);
        assert_eq!(encode(-1e6, Format::E4M3, OverflowMode::Saturate).decode(), -448.0);
        assert!(encode(1e6, Format::E4M3, OverflowMode::ToSpecial).is_nan());
        assert_eq!(encode(1e6, Format::E5M2, OverflowMode::ToSpecial).decode(), f64::INFINITY);
        assert_eq!(encode(-1e6, Format::E5M2, OverflowMode::ToSpecial).decode(), f64::NEG_INFINITY);
        assert_eq!(encode(f64::INFINITY, Format::E5M2, OverflowMode::Saturate).decode(), 57344.0);
        // 449 and the 464 tie round to 448 (even mantissa) and are not overflow.
        for v in [449.0, 464.0] {
            let r = E4M3.round_counted(v, OverflowMode::ToSpecial);
            assert_eq!(r.value, 448.0);
            assert!(!r.saturated);
        }
        let r = E4M3.round_counted(464.5, OverflowMode::Saturate);
        assert_eq!(r.value, 448.0);
        assert!(r.saturated);
        // E5M2's max has an odd mantissa, so its overflow tie goes to infinity.
        assert_eq!(E5M2.round(61440.0, OverflowMode::ToSpecial), f64::INFINITY);
        assert_eq!(E5M2.round(61439.0, OverflowMode::ToSpecial), 57344.0);
    }

    #[test]
    fn nan_is_canonical() {
        for f in Format::ALL {
            let c = encode(f64::NAN, f, OverflowMode::Saturate);
            assert!(c.is_nan());
            assert_eq!(c.bits, f.spec().nan_code());
        }
    }

    #[test]
    fn subnormal_rounding() {
        // Half of the smallest subnormal ties to zero (even), just above goes up.
        let min = E4M3.min_subnormal;
        let r = E4M3.round_counted(min / 2.0, OverflowMode::Saturate);
        assert_eq!(r.value, 0.0);
        assert!(r.underflowed);
        assert_eq!(E4M3.round(min * 0.51, OverflowMode::Saturate), min);
        assert_eq!(E4M3.round(min * 1.5, OverflowMode::Saturate), 2.0 * min);
        // Largest subnormal rounds up into the first normal binade.
        let min_normal = exp2i(E4M3.min_exponent());
        assert_eq!(E4M3.round(min_normal - min / 4.0, OverflowMode::Saturate), min_normal);
    }

    #[test]
    fn code_fields() {
        let c = CodePoint::new(0xBA, Format::E4M3);
        assert_eq!(c.sign(), 1);
        assert_eq!(c.exponent_field(), 0b0111);
        assert_eq!(c.mantissa_field(), 0b010);
        assert_eq!(c.decode(), -1.25);
    }
}
