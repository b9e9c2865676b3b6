use proptest::prelude::*;
use tdmr::chansim::{iti_weights, noiseless_readback, ChannelParams, ReaderGeometry, N_TRACKS};
use tdmr::detector::{brute_force_llr, build_trellis, maxlog_llr, viterbi_hard};
use tdmr::equalizer::PrTarget;
use tdmr::grad::ParamSet;
use tdmr::training::{adam_step, ce_term, AdamConfig, AdamState};

fn monic_taps() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, 1..5).prop_map(|rest| {
        let mut taps = vec![1.0];
        taps.extend(rest);
        taps
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn readback_is_linear_in_levels(
        a in prop::collection::vec(-2.0..2.0f64, 40),
        b in prop::collection::vec(-2.0..2.0f64, 40),
        jitter in prop::collection::vec(-0.49..0.49f64, 40),
        alpha in -3.0..3.0f64,
        beta in -3.0..3.0f64,
        pw50 in 0.8..3.0f64,
    ) {
        let params = ChannelParams { pw50_over_t: pw50, ..Default::default() };
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| alpha * x + beta * y).collect();
        let ra = noiseless_readback(&a, 0.5, &jitter, &params);
        let rb = noiseless_readback(&b, -1.0, &jitter, &params);
        let rm = noiseless_readback(&mix, 0.5 * alpha - beta, &jitter, &params);
        for k in 0..40 {
            prop_assert!((rm[k] - (alpha * ra[k] + beta * rb[k])).abs() < 1e-9);
        }
    }

    #[test]
    fn iti_weights_sum_to_one_and_mirror(cts in 0.0..80.0f64, sigma in 0.05..1.5f64) {
        let w = iti_weights(&ReaderGeometry { cts_percent: cts, crosstrack_sigma: sigma, ..Default::default() }).unwrap();
        for reader in &w {
            prop_assert!((reader.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(reader.iter().all(|&x| x >= 0.0));
        }
        for i in 0..N_TRACKS {
            prop_assert!((w[0][i] - w[1][N_TRACKS - 1 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn maxlog_matches_exhaustive_search(taps in monic_taps(), y in prop::collection::vec(-4.0..4.0f64, 1..9)) {
        prop_assume!(y.len() >= taps.len());
        let trellis = build_trellis(&PrTarget::fixed(&taps).unwrap()).unwrap();
        let soft = maxlog_llr(&trellis, &y).unwrap();
        let oracle = brute_force_llr(&trellis, &y).unwrap();
        prop_assert_eq!(&soft.llr, &oracle.llr);
        prop_assert_eq!(&soft.hard_bits, &oracle.hard_bits);
        prop_assert_eq!(viterbi_hard(&trellis, &y).unwrap(), oracle.hard_bits);
    }

    #[test]
    fn llr_sign_agrees_with_hard_decision(taps in monic_taps(), y in prop::collection::vec(-4.0..4.0f64, 5..60)) {
        let trellis = build_trellis(&PrTarget::fixed(&taps).unwrap()).unwrap();
        let soft = maxlog_llr(&trellis, &y).unwrap();
        for (l, b) in soft.llr.iter().zip(&soft.hard_bits) {
            if l.abs() > 1e-9 {
                prop_assert_eq!(*l > 0.0, *b > 0);
            }
        }
    }

    #[test]
    fn llr_scales_quadratically(taps in monic_taps(), y in prop::collection::vec(-4.0..4.0f64, 5..40), c in 0.25..4.0f64) {
        let base = maxlog_llr(&build_trellis(&PrTarget::fixed(&taps).unwrap()).unwrap(), &y).unwrap();
        let scaled_taps: Vec<f64> = taps.iter().map(|g| c * g).collect();
        let scaled_y: Vec<f64> = y.iter().map(|v| c * v).collect();
        let scaled = maxlog_llr(&build_trellis(&PrTarget::fixed(&scaled_taps).unwrap()).unwrap(), &scaled_y).unwrap();
        for (a, b) in base.llr.iter().zip(&scaled.llr) {
            prop_assert!((b - c * c * a).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn adam_with_zero_rate_is_identity(
        values in prop::collection::vec(-5.0..5.0f64, 1..30),
        grads in prop::collection::vec(-5.0..5.0f64, 30),
        steps in 1usize..20,
    ) {
        let mut set = ParamSet::new();
        set.push_group("w", &values);
        let mut state = AdamState::new(values.len());
        for _ in 0..steps {
            adam_step(&mut set, &grads[..values.len()], &mut state, &AdamConfig::default(), 0.0).unwrap();
        }
        prop_assert_eq!(set.values(), &values[..]);
    }

    #[test]
    fn ce_extremes_at_clip(bit in prop::bool::ANY, clip in 1.0..60.0f64, overshoot in 0.0..100.0f64) {
        let u: i8 = if bit { 1 } else { -1 };
        let confident = f64::from(u) * (clip + overshoot);
        let right = ce_term(confident, u, clip);
        let wrong = ce_term(-confident, u, clip);
        prop_assert!(right <= (-clip).exp().ln_1p() + 1e-15);
        prop_assert!(wrong >= clip);
    }
}
