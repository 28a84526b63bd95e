use proptest::prelude::*;
use smoothfp8::diagnostics::{channel_correlation, input_magnitude_histogram, AmaxTrace};
use smoothfp8::Tensor;

fn vec_nonzero(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-10.0f64..10.0, n).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

proptest! {
    #[test]
    fn correlation_is_scale_invariant(a in vec_nonzero(6), b in vec_nonzero(6), ka in -1e3f64..1e3, kb in -1e3f64..1e3) {
        prop_assume!(ka.abs() > 1e-3 && kb.abs() > 1e-3);
        let base = channel_correlation(&a, &b).unwrap();
        let sa: Vec<f64> = a.iter().map(|v| v * ka).collect();
        let sb: Vec<f64> = b.iter().map(|v| v * kb).collect();
        let scaled = channel_correlation(&sa, &sb).unwrap();
        prop_assert!((scaled - (ka * kb).signum() * base).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&scaled));
    }

    #[test]
    fn histogram_counts_every_token(rows in 1usize..40, seed in any::<u64>()) {
        let mut s = seed | 1;
        let mut next = || { s ^= s << 13; s ^= s >> 7; s ^= s << 17; (s % 2001) as f64 / 100.0 - 10.0 };
        let x = Tensor::from_fn(rows, 3, |_, _| next());
        let w2 = [next(), next(), 0.0];
        let h = input_magnitude_histogram(&x, &w2, -5.0, 5.0, 20).unwrap();
        prop_assert_eq!(h.counts.iter().sum::<u64>(), rows as u64);
        prop_assert_eq!(h.total, rows as u64);
        prop_assert!(h.fraction_below_1 <= h.fraction_below_e);
    }

    #[test]
    fn amax_of_concatenation(a in proptest::collection::vec(-1e3f64..1e3, 0..20), b in proptest::collection::vec(-1e3f64..1e3, 0..20)) {
        let mut tr = AmaxTrace::new();
        let ma = tr.record_amax("a", 0, &a).unwrap();
        let mb = tr.record_amax("b", 0, &b).unwrap();
        let joined: Vec<f64> = a.iter().chain(&b).copied().collect();
        prop_assert_eq!(tr.record_amax("ab", 0, &joined).unwrap(), ma.max(mb));
    }
}
