use std::sync::OnceLock;

use proptest::prelude::*;
use smoothfp8::numerics::{encode, enumerate_values, Format, OverflowMode};

const FP8: [Format; 2] = [Format::E4M3, Format::E5M2];

/// Value of a code computed straight from its bit fields.
fn field_value(bits: u16, ebits: u32, mbits: u32, bias: i32) -> f64 {
    let sign = if bits >> (ebits + mbits) & 1 == 1 { -1.0 } else { 1.0 };
    let e = (bits >> mbits) & ((1 << ebits) - 1);
    let m = (bits & ((1 << mbits) - 1)) as f64 / (1u32 << mbits) as f64;
    if e == 0 {
        sign * m * 2f64.powi(1 - bias)
    } else {
        sign * (1.0 + m) * 2f64.powi(e as i32 - bias)
    }
}

fn layout(f: Format) -> (u32, u32, i32) {
    match f {
        Format::E4M3 => (4, 3, 7),
        Format::E5M2 => (5, 2, 15),
        Format::BF16 => (8, 7, 127),
        Format::FP16 => (5, 10, 15),
    }
}

/// Finite non-negative grid values paired with their codes, ascending.
fn positive_grid(f: Format) -> Vec<(u16, f64)> {
    let mut g: Vec<(u16, f64)> = enumerate_values(f)
        .into_iter()
        .filter(|(c, v)| v.is_finite() && v.is_sign_positive() && !c.is_nan())
        .map(|(c, v)| (c.bits, v))
        .collect();
    g.dedup_by(|a, b| a.1 == b.1);
    g
}

fn cached_grid(f: Format) -> &'static [(u16, f64)] {
    static GRIDS: [OnceLock<Vec<(u16, f64)>>; 4] = [OnceLock::new(), OnceLock::new(), OnceLock::new(), OnceLock::new()];
    let i = Format::ALL.iter().position(|&g| g == f).unwrap();
    GRIDS[i].get_or_init(|| positive_grid(f))
}

/// Nearest grid value with ties to the even code, saturating at the top.
fn oracle_round(grid: &[(u16, f64)], x: f64) -> f64 {
    let a = x.abs();
    let top = grid.last().unwrap().1;
    let r = if a >= top {
        top
    } else {
        let i = grid.partition_point(|&(_, v)| v <= a);
        let (lo, hi) = (grid[i - 1], grid[i]);
        let (dl, dh) = (a - lo.1, hi.1 - a);
        if dl < dh || (dl == dh && lo.0 & 1 == 0) {
            lo.1
        } else {
            hi.1
        }
    };
    if x.is_sign_negative() {
        -r
    } else {
        r
    }
}

#[test]
fn decode_matches_bit_fields() {
    for f in Format::ALL {
        let (e, m, b) = layout(f);
        let spec = f.spec();
        for bits in 0..spec.code_count() as u32 {
            let bits = bits as u16;
            let v = spec.decode_bits(bits);
            let exp_field = (bits >> m) & ((1 << e) - 1);
            if v.is_nan() || v.is_infinite() {
                continue;
            }
            if f == Format::E4M3 || exp_field != (1 << e) - 1 {
                assert_eq!(v, field_value(bits, e, m, b), "{f} {bits:#x}");
            }
        }
    }
}

#[test]
fn special_codes() {
    let e4 = Format::E4M3.spec();
    let nans: Vec<u16> = (0..256).filter(|&b| e4.decode_bits(b).is_nan()).collect();
    assert_eq!(nans, vec![0x7F, 0xFF]);
    assert!((0..256).all(|b| e4.decode_bits(b).is_finite() || e4.decode_bits(b).is_nan()));
    let e5 = Format::E5M2.spec();
    assert_eq!(e5.decode_bits(0x7C), f64::INFINITY);
    assert_eq!(e5.decode_bits(0xFC), f64::NEG_INFINITY);
    assert_eq!((0..256).filter(|&b| e5.decode_bits(b).is_nan()).count(), 6);
}

#[test]
fn extremes_from_enumeration() {
    for f in Format::ALL {
        let g = positive_grid(f);
        let spec = f.spec();
        assert_eq!(spec.max_normal, g.last().unwrap().1, "{f}");
        assert_eq!(spec.min_subnormal, g[1].1, "{f}");
    }
    assert_eq!(Format::E4M3.spec().max_normal, 448.0);
    assert_eq!(Format::E5M2.spec().max_normal, 57344.0);
    assert_eq!(Format::E4M3.spec().min_subnormal, 2f64.powi(-9));
    assert_eq!(Format::E5M2.spec().min_subnormal, 2f64.powi(-16));
}

#[test]
fn every_code_round_trips() {
    for f in Format::ALL {
        for (c, v) in enumerate_values(f) {
            if c.is_nan() {
                assert!(encode(v, f, OverflowMode::Saturate).is_nan());
                continue;
            }
            let mode = if v.is_infinite() { OverflowMode::ToSpecial } else { OverflowMode::Saturate };
            assert_eq!(encode(v, f, mode).bits, c.bits, "{f} {v}");
        }
    }
}

#[test]
fn midpoints_tie_to_even_and_order_is_kept() {
    for f in FP8 {
        let grid = positive_grid(f);
        let spec = f.spec();
        let mut prev = f64::NEG_INFINITY;
        for w in grid.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            let mid = 0.5 * (lo.1 + hi.1);
            let expect = if lo.0 & 1 == 0 { lo.1 } else { hi.1 };
            for s in [1.0, -1.0] {
                assert_eq!(spec.round(s * mid, OverflowMode::Saturate), s * expect, "{f} mid {mid}");
            }
            // Just off the midpoint the nearer neighbour wins.
            let below = mid - (hi.1 - lo.1) * 1e-6;
            let above = mid + (hi.1 - lo.1) * 1e-6;
            assert_eq!(spec.round(below, OverflowMode::Saturate), lo.1);
            assert_eq!(spec.round(above, OverflowMode::Saturate), hi.1);
            let r = spec.round(mid, OverflowMode::Saturate);
            assert!(r >= prev);
            prev = r;
        }
    }
}

fn finite_in(f: Format) -> impl Strategy<Value = f64> {
    let m = f.spec().max_normal;
    prop_oneof![
        -m * 1.5..m * 1.5,
        (-40i32..20, -1.0f64..1.0).prop_map(|(e, x)| x * 2f64.powi(e)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn rounding_matches_enumeration(x in finite_in(Format::E4M3), y in finite_in(Format::E5M2)) {
        prop_assert_eq!(Format::E4M3.spec().round(x, OverflowMode::Saturate), oracle_round(cached_grid(Format::E4M3), x));
        prop_assert_eq!(Format::E5M2.spec().round(y, OverflowMode::Saturate), oracle_round(cached_grid(Format::E5M2), y));
    }

    #[test]
    fn rounding_is_monotone(a in finite_in(Format::E4M3), b in finite_in(Format::E4M3)) {
        for f in Format::ALL {
            let spec = f.spec();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(spec.round(lo, OverflowMode::Saturate) <= spec.round(hi, OverflowMode::Saturate));
        }
    }

    #[test]
    fn rounding_error_within_half_ulp(x in finite_in(Format::E4M3)) {
        for f in Format::ALL {
            let spec = f.spec();
            if x.abs() > spec.max_normal {
                continue;
            }
            let r = spec.round(x, OverflowMode::Saturate);
            prop_assert!((r - x).abs() <= 0.5 * spec.ulp(x), "{} {} -> {}", f, x, r);
        }
    }

    #[test]
    fn rounding_is_idempotent_and_odd(x in finite_in(Format::E5M2)) {
        for f in Format::ALL {
            let spec = f.spec();
            let r = spec.round(x, OverflowMode::Saturate);
            prop_assert_eq!(spec.round(r, OverflowMode::Saturate), r);
            prop_assert_eq!(spec.round(-x, OverflowMode::Saturate), -r);
        }
    }

    #[test]
    fn bf16_matches_f32_truncation_oracle(x in -1e30f64..1e30) {
        // BF16 is the top half of an f32, so RNE on the bits of an f32 input
        // is an oracle.
        let f = x as f32 as f64;
        let bits = (f as f32).to_bits();
        let lower = bits & 0xFFFF;
        let mut upper = bits >> 16;
        if lower > 0x8000 || (lower == 0x8000 && upper & 1 == 1) {
            upper += 1;
        }
        let oracle = f32::from_bits(upper << 16) as f64;
        prop_assert_eq!(Format::BF16.spec().round(f, OverflowMode::Saturate), oracle);
    }

    #[test]
    fn fp16_matches_half_oracle(x in -70000f64..70000.0) {
        prop_assert_eq!(Format::FP16.spec().round(x, OverflowMode::Saturate), oracle_round(cached_grid(Format::FP16), x));
    }
}
