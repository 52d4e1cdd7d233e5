use polyattn::analysis::{mean_std, spearman, SweepParameter, SweepResult, SweepSpec};
use polyattn::attention::{AttentionConfig, Variant};
use polyattn::gradcheck::{grad_check, smooth_input, RowOp};
use polyattn::polyapprox::goldschmidt::reciprocal_circuit;
use polyattn::polyapprox::{
    depth_of, eval_poly, fit_sigmoid, goldschmidt_inv_sqrt, goldschmidt_reciprocal, reciprocal_error_bound,
    DepthLedger, DepthOp, Evaluator, GoldschmidtConfig, PlainEvaluator, TraceEvaluator,
};
use polyattn::polymodel::{exact_block, layernorm_exact, range_penalty, BlockWeights};
use polyattn::Matrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn depth_op() -> impl Strategy<Value = DepthOp> {
    prop_oneof![
        (1u32..64).prop_map(DepthOp::Power),
        (1u32..20).prop_map(DepthOp::Goldschmidt),
        (0usize..64).prop_map(DepthOp::Poly),
        Just(DepthOp::Matmul),
        Just(DepthOp::Mul),
        Just(DepthOp::Add),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ledger_total_is_sum_of_entries(ops in proptest::collection::vec(depth_op(), 0..40), split in 0usize..40) {
        let mut a = DepthLedger::new();
        let mut b = DepthLedger::new();
        let cut = split.min(ops.len());
        for (i, op) in ops.iter().enumerate() {
            if i < cut {
                a.record(format!("a{i}"), *op);
            } else {
                b.record(format!("b{i}"), *op);
            }
        }
        let expected: u32 = ops.iter().map(|op| depth_of(*op)).sum();
        a.then(&b);
        prop_assert_eq!(a.total(), expected);
        prop_assert_eq!(a.entries().len(), ops.len());
    }

    #[test]
    fn goldschmidt_within_bound(k in 1u32..12, lo in 1e-3f64..1.0, width in 1e-3f64..20.0, t in 0.0f64..=1.0) {
        let hi = lo + width;
        let cfg = GoldschmidtConfig::new(k, lo, hi).unwrap();
        let x = (lo + t * width).min(hi);
        let s = cfg.scale();
        let r = goldschmidt_reciprocal(x, &cfg).unwrap();
        let err = (r / s - 1.0 / (x * s)).abs();
        let slack = 2f64.powi(k as i32 + 1) * f64::EPSILON / (x * s);
        prop_assert!(err <= reciprocal_error_bound(x, &cfg) + slack);
    }

    #[test]
    fn reciprocal_circuit_is_polynomial_and_shallow(k in 1u32..10, x in 0.2f64..1.8) {
        let cfg = GoldschmidtConfig::new(k, 0.1, 1.9).unwrap();
        let mut tr = TraceEvaluator::new();
        let xv = tr.input(x);
        let traced = reciprocal_circuit(&mut tr, &xv, &cfg);
        let plain = reciprocal_circuit(&mut PlainEvaluator, &x, &cfg);
        prop_assert_eq!(tr.peek(&traced), plain);
        prop_assert!(traced.depth <= depth_of(DepthOp::Goldschmidt(k)));
        prop_assert_eq!(tr.counts().non_polynomial(), 0);
    }

    #[test]
    fn inv_sqrt_converges(x in 0.25f64..4.0) {
        let cfg = GoldschmidtConfig::new(8, 0.25, 4.0).unwrap();
        let r = goldschmidt_inv_sqrt(x, &cfg).unwrap();
        prop_assert!((r * r * x - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sigmoid_fit_is_certified_on_its_grid(half in 0.5f64..12.0, degree in 1usize..24) {
        let fit = fit_sigmoid(-half, half, degree).unwrap();
        let n = 257;
        for i in 0..n {
            let x = (-half + 2.0 * half * i as f64 / (n - 1) as f64).min(half);
            let exact = 1.0 / (1.0 + (-x).exp());
            // off the certification grid the error may overshoot it slightly
            prop_assert!((eval_poly(&fit, x).unwrap() - exact).abs() <= fit.max_error() * 1.05 + 1e-12);
        }
    }

    #[test]
    fn spearman_is_bounded_and_symmetric(
        pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..40)
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let ab = spearman(&a, &b).unwrap();
        let ba = spearman(&b, &a).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&ab));
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((spearman(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_std_is_shift_equivariant(xs in proptest::collection::vec(-100.0f64..100.0, 1..50), c in -50.0f64..50.0) {
        let (m, s) = mean_std(&xs);
        let shifted: Vec<f64> = xs.iter().map(|v| v + c).collect();
        let (m2, s2) = mean_std(&shifted);
        prop_assert!((m2 - m - c).abs() < 1e-9);
        prop_assert!((s2 - s).abs() < 1e-8);
        prop_assert!(s >= 0.0);
    }

    #[test]
    fn sweep_csv_has_one_line_per_row(values in proptest::collection::btree_set(0i32..1000, 1..12)) {
        let values: Vec<f64> = values.into_iter().map(f64::from).collect();
        let spec = SweepSpec::new(SweepParameter::Length, values.clone(), 1, 0).unwrap();
        let mut r = SweepResult::new(spec);
        for v in &values {
            r.rows.push(polyattn::analysis::SweepRow { value: *v, metric: "m".into(), mean: *v, std: 0.0 });
        }
        let csv = r.to_csv();
        prop_assert_eq!(csv.lines().count(), values.len() + 1);
        let back: SweepResult = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, r);
    }

    #[test]
    fn range_penalty_is_absolutely_homogeneous(
        seed in any::<u64>(), layers in 1usize..4, heads in 1usize..4, lambda in -10.0f64..10.0
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zs: Vec<Vec<Matrix>> = (0..layers)
            .map(|_| (0..heads).map(|_| Matrix::random_normal(3, 3, 1.0, &mut rng)).collect())
            .collect();
        let scaled: Vec<Vec<Matrix>> = zs
            .iter()
            .map(|hs| hs.iter().map(|m| m.scale(lambda).unwrap()).collect())
            .collect();
        let a = range_penalty(&zs).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((range_penalty(&scaled).unwrap() - lambda.abs() * a).abs() <= 1e-12 * (1.0 + a * lambda.abs()));
    }

    #[test]
    fn layernorm_output_is_standardized(xs in proptest::collection::vec(-10.0f64..10.0, 2..32)) {
        let n = xs.len();
        let spread = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - xs.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1.0);
        let y = layernorm_exact(&xs, &vec![1.0; n], &vec![0.0; n]).unwrap();
        let mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn weights_roundtrip(seed in any::<u64>(), heads in 1usize..4, per_head in 1usize..5, d_ff in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = BlockWeights::random(heads * per_head, heads, d_ff, &mut rng).unwrap();
        let mut buf = Vec::new();
        w.write_to(&mut buf).unwrap();
        prop_assert_eq!(BlockWeights::read_from(buf.as_slice()).unwrap(), w);
    }

    #[test]
    fn normalizer_gradients_match_differences(seed in any::<u64>(), p in (1u32..=4).prop_map(|h| 2 * h)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = smooth_input(2, 5, &mut rng);
        for op in [RowOp::power_softmax(p), RowOp::stable(p, 1e-6, 1e-3), RowOp::lipschitz(p, 1e-3)] {
            let r = grad_check(&op, &x, 1e-5).unwrap();
            prop_assert!(r.passed(), "{}", r.max_rel_err);
        }
    }

    #[test]
    fn power_block_ignores_the_sign_of_scores(seed in any::<u64>()) {
        // negating Wq flips every score; even powers make the block invariant
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = BlockWeights::random(8, 2, 8, &mut rng).unwrap();
        let x = Matrix::random_normal(4, 8, 1.0, &mut rng);
        let mut neg = w.clone();
        neg.wq = w.wq.scale(-1.0).unwrap();
        for variant in [Variant::Power, Variant::PowerStable, Variant::LengthAgnostic] {
            let cfg = AttentionConfig::new(variant, 4);
            let a = exact_block(&x, &w, &cfg).unwrap();
            let b = exact_block(&x, &neg, &cfg).unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        }
    }
}
