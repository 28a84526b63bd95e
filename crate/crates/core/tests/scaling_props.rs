use proptest::prelude::*;
use smoothfp8::numerics::Format;
use smoothfp8::scaling::{
    delayed_scale, fake_quantize, jit_scale, per_channel_scales, quantize, AmaxHistory, Reduction, Scale,
};
use smoothfp8::Tensor;

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    let mags = proptest::collection::vec(-12i32..12, cols);
    let vals = proptest::collection::vec(-1.0f64..1.0, rows * cols);
    (mags, vals).prop_map(move |(m, v)| {
        Tensor::from_fn(rows, cols, |r, c| v[r * cols + c] * 2f64.powi(m[c]))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn fake_quantize_equals_dequantize_of_quantize(t in tensor(5, 4), s in 0.001f64..1000.0) {
        for f in Format::ALL {
            let q = quantize(&t, &Scale::Tensor(s), f).unwrap();
            let (fq, stats) = fake_quantize(&t, &Scale::Tensor(s), f).unwrap();
            prop_assert_eq!(q.dequantize(), fq);
            prop_assert_eq!(q.stats, stats);
        }
    }

    #[test]
    fn jit_quantization_never_saturates(t in tensor(6, 3), margin in 0.01f64..=1.0) {
        for f in Format::ALL {
            let s = jit_scale(t.data(), f, margin).unwrap();
            let q = quantize(&t, &Scale::Tensor(s), f).unwrap();
            prop_assert_eq!(q.stats.saturations, 0);
        }
    }

    #[test]
    fn per_channel_quantization_never_saturates(t in tensor(7, 5), margin in 0.01f64..=1.0) {
        let s = per_channel_scales(&t, Format::E4M3, margin).unwrap();
        let q = quantize(&t, &Scale::Channel(s), Format::E4M3).unwrap();
        prop_assert_eq!(q.stats.saturations, 0);
    }

    #[test]
    fn dequantize_within_half_ulp(t in tensor(4, 4), s in 0.01f64..100.0) {
        for f in Format::ALL {
            let spec = f.spec();
            prop_assume!(s * t.amax() <= spec.max_normal);
            let (d, _) = fake_quantize(&t, &Scale::Tensor(s), f).unwrap();
            for (x, y) in t.data().iter().zip(d.data()) {
                // The half-ulp bound lives on the scaled grid.
                let err = (s * x - s * y).abs();
                prop_assert!(err <= 0.5 * spec.ulp(s * x) * (1.0 + 1e-12), "{} {} {} {}", f, x, y, s);
            }
        }
    }

    #[test]
    fn representable_constant_round_trips(code in 0u16..0x7E, s in 0.001f64..1000.0) {
        let spec = Format::E4M3.spec();
        let c = spec.decode_bits(code) / s;
        let t = Tensor::filled(vec![3, 2], c);
        let (d, _) = fake_quantize(&t, &Scale::Tensor(s), Format::E4M3).unwrap();
        for &y in d.data() {
            prop_assert!((y - c).abs() * s <= 0.5 * spec.ulp(s * c) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn delayed_scale_ignores_window_order(mut w in proptest::collection::vec(0.0f64..1e4, 1..16), seed in any::<u64>()) {
        let mut h1 = AmaxHistory::new(16, Reduction::Max).unwrap();
        for &a in &w {
            h1.record(a).unwrap();
        }
        // Deterministic shuffle.
        let mut state = seed | 1;
        for i in (1..w.len()).rev() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            w.swap(i, (state % (i as u64 + 1)) as usize);
        }
        let mut h2 = AmaxHistory::new(16, Reduction::Max).unwrap();
        for &a in &w {
            h2.record(a).unwrap();
        }
        for f in Format::ALL {
            prop_assert_eq!(delayed_scale(&h1, f, 1.0).unwrap(), delayed_scale(&h2, f, 1.0).unwrap());
        }
    }

    #[test]
    fn history_keeps_last_capacity_values(vals in proptest::collection::vec(0.0f64..1e6, 0..40), cap in 1usize..10) {
        let mut h = AmaxHistory::new(cap, Reduction::Max).unwrap();
        for &v in &vals {
            h.record(v).unwrap();
        }
        let tail: Vec<f64> = vals.iter().rev().take(cap).rev().copied().collect();
        prop_assert_eq!(h.values().collect::<Vec<_>>(), tail.clone());
        let max = tail.iter().copied().fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
        prop_assert_eq!(h.effective_amax(), max);
    }

    #[test]
    fn saturation_count_matches_scalar_resimulation(t in tensor(4, 6), s in 0.01f64..1e4) {
        for f in [Format::E4M3, Format::E5M2] {
            let spec = f.spec();
            let q = quantize(&t, &Scale::Tensor(s), f).unwrap();
            // Overflow threshold: halfway to the next binade step, where the tie
            // goes up only if max_normal has an odd mantissa.
            let half = spec.max_normal + 0.5 * spec.ulp(spec.max_normal);
            let odd = spec.max_code() & 1 == 1;
            let sat = t.data().iter().filter(|&&x| {
                let a = (s * x).abs();
                a > half || (a == half && odd)
            }).count();
            // Half the smallest subnormal ties to the even code, zero.
            let under = t.data().iter().filter(|&&x| x != 0.0 && (s * x).abs() <= 0.5 * spec.min_subnormal).count();
            prop_assert_eq!(q.stats.saturations as usize, sat);
            prop_assert_eq!(q.stats.underflows as usize, under);
        }
    }
}

#[test]
fn channel_scales_independent_of_pool_size() {
    let t = Tensor::from_fn(512, 64, |r, c| ((r * 37 + c * 101) % 97) as f64 * 2f64.powi((c % 9) as i32 - 4));
    let one = per_channel_scales(&t, Format::E4M3, 1.0).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let four = pool.install(|| per_channel_scales(&t, Format::E4M3, 1.0).unwrap());
    assert_eq!(one, four);
}
