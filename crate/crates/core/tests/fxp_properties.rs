use proptest::prelude::*;
use rwm_mpc::fxp::{
    fx_add, fx_mul, quantize, tree_matvec, FixedFormat, FixedMatrix, FixedVector, Overflow, Rounding, TreeSchedule,
};

fn format() -> impl Strategy<Value = FixedFormat> {
    (2u32..=48, -8i32..=16).prop_filter_map("valid format", |(w, i)| FixedFormat::new(w, i).ok())
}

proptest! {
    #[test]
    fn rounding_within_half_ulp(f in format(), t in 0.0f64..1.0) {
        let x = f.min_value() + t * (f.max_value() - f.min_value());
        let q = quantize(x, f).unwrap();
        prop_assert!((q.to_f64() - x).abs() <= 0.5 * f.ulp());
    }

    #[test]
    fn saturation_clamps(f in format(), over in 1.0f64..1e6) {
        prop_assert_eq!(quantize(f.max_value() + over * f.ulp(), f).unwrap().raw(), f.max_raw());
        prop_assert_eq!(quantize(f.min_value() - over * f.ulp(), f).unwrap().raw(), f.min_raw());
    }

    #[test]
    fn wrap_is_modular(w in 4u32..=32, k in -1000i64..1000) {
        let f = FixedFormat::with_modes(w, w as i32, Rounding::RoundHalfUp, Overflow::Wrap).unwrap();
        let m = 1i128 << w;
        let raw = quantize(k as f64, f).unwrap().raw();
        prop_assert_eq!((raw - k as i128).rem_euclid(m), 0);
        prop_assert!(raw >= f.min_raw() && raw <= f.max_raw());
    }

    #[test]
    fn truncation_rounds_down(f in format(), t in 0.0f64..1.0) {
        let tf = FixedFormat::with_modes(f.width(), f.int_bits(), Rounding::Truncate, Overflow::Saturate).unwrap();
        let x = tf.min_value() + t * (tf.max_value() - tf.min_value());
        let q = quantize(x, tf).unwrap().to_f64();
        prop_assert!(q <= x && x - q < tf.ulp());
    }

    #[test]
    fn add_and_mul_commute(a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let f = FixedFormat::new(20, 2).unwrap();
        let (qa, qb) = (quantize(a, f).unwrap(), quantize(b, f).unwrap());
        prop_assert_eq!(fx_add(qa, qb, f).unwrap().raw(), fx_add(qb, qa, f).unwrap().raw());
        prop_assert_eq!(fx_mul(qa, qb, f).unwrap().raw(), fx_mul(qb, qa, f).unwrap().raw());
    }

    #[test]
    fn tree_matvec_repeatable_and_close(
        n in 1usize..12,
        seed in proptest::collection::vec(-0.5f64..0.5, 144),
        v in proptest::collection::vec(-1.0f64..1.0, 12),
    ) {
        let hf = FixedFormat::new(27, 0).unwrap();
        let vf = FixedFormat::new(27, 2).unwrap();
        let of = FixedFormat::covering(27, n as f64 * 0.5).unwrap();
        let h = FixedMatrix::quantize(n, n, &seed[..n * n], hf).unwrap();
        let x = FixedVector::quantize(&v[..n], vf).unwrap();
        let s = TreeSchedule::widening(hf, vf, of, 35, n).unwrap();
        let a = tree_matvec(&h, &x, &s).unwrap();
        let b = tree_matvec(&h, &x, &s).unwrap();
        prop_assert_eq!(a.raw(), b.raw());
        let xq = x.to_f64();
        for i in 0..n {
            let exact: f64 = (0..n).map(|j| h.get(i, j).to_f64() * xq[j]).sum();
            // one output rounding plus a half ulp per level of internal narrowing
            prop_assert!((a.get(i).to_f64() - exact).abs() <= (n as f64 + 1.0) * of.ulp());
        }
    }
}
