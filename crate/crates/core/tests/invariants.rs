use entangle_core::attribution::{bilinear_resize, AttributionMap, BlockScope, StepScope};
use entangle_core::denoiser::{attention_probs, TokenId};
use entangle_core::guidance::{cfg_combine, energy_correct};
use entangle_core::metrics::{iou, quantile_threshold, risk_difference, BinaryMask};
use entangle_core::softselect::{selection_size, sinkhorn_solve, soft_iou, soft_top_k, Stopping, TransportProblem};
use entangle_core::Mat;
use proptest::prelude::*;

fn map(values: Vec<f64>, side: usize) -> AttributionMap {
    AttributionMap {
        values,
        height: side,
        width: side,
        concept: TokenId(2),
        scope: BlockScope::All,
        steps: StepScope::All,
    }
}

fn mask(values: Vec<u8>, side: usize) -> BinaryMask {
    BinaryMask {
        values,
        height: side,
        width: side,
        q: 0.7,
        concept: TokenId(2),
    }
}

fn square_map() -> impl Strategy<Value = (Vec<f64>, usize)> {
    (2usize..9).prop_flat_map(|s| (prop::collection::vec(0.0f64..10.0, s * s), Just(s)))
}

fn mask_pair() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (prop::collection::vec(0u8..2, 64), prop::collection::vec(0u8..2, 64))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn quantile_mask_selects_at_least_the_tail((values, s) in square_map(), q in 0.05f64..0.95) {
        let m = quantile_threshold(&map(values.clone(), s), q).unwrap();
        prop_assert!(m.values.iter().all(|&v| v <= 1));
        let k = selection_size(values.len(), q);
        // ties at the threshold can only add pixels
        prop_assert!(m.ones() >= k.max(1));
        let thr = values.iter().zip(&m.values).filter(|(_, &b)| b == 1).map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
        let strictly_above = values.iter().filter(|&&v| v > thr).count();
        prop_assert!(strictly_above <= k);
    }

    #[test]
    fn quantile_mask_ignores_positive_scale((values, s) in square_map(), q in 0.05f64..0.95, c in 1e-3f64..1e3) {
        let a = quantile_threshold(&map(values.clone(), s), q).unwrap();
        let b = quantile_threshold(&map(values.iter().map(|v| v * c).collect(), s), q).unwrap();
        prop_assert_eq!(a.values, b.values);
    }

    #[test]
    fn iou_is_symmetric_and_bounded((a, b) in mask_pair()) {
        let (ma, mb) = (mask(a, 8), mask(b, 8));
        let x = iou(&ma, &mb).unwrap();
        prop_assert_eq!(x, iou(&mb, &ma).unwrap());
        prop_assert!((0.0..=1.0).contains(&x));
        let self_iou = iou(&ma, &ma).unwrap();
        prop_assert_eq!(self_iou, if ma.ones() == 0 { 0.0 } else { 1.0 });
    }

    #[test]
    fn soft_iou_is_bounded(a in prop::collection::vec(0.0f64..=1.0, 16), b in prop::collection::vec(0.0f64..=1.0, 16)) {
        let v = soft_iou(&a, &b).unwrap().value;
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
    }

    #[test]
    fn sinkhorn_plan_is_feasible(values in prop::collection::vec(0.0f64..=1.0, 4..40), kf in 0.05f64..0.95, tau in 0.05f64..1.0) {
        let n = values.len();
        let k = ((kf * n as f64) as usize).clamp(1, n - 1);
        let plan = sinkhorn_solve(&TransportProblem::new(values, k, tau).unwrap(), 500, 1e-9);
        prop_assert!(plan.gamma.data().iter().all(|&g| g >= 0.0 && g.is_finite()));
        if plan.converged {
            for i in 0..n {
                prop_assert!((plan.gamma.row(i).iter().sum::<f64>() - 1.0 / n as f64).abs() < 1e-8);
            }
            let cols = plan.gamma.col_sums();
            prop_assert!((cols.data()[1] - k as f64 / n as f64).abs() < 1e-8);
        }
    }

    #[test]
    fn soft_mask_sums_to_k(values in prop::collection::vec(0.0f64..5.0, 8..64), kf in 0.1f64..0.9) {
        let n = values.len();
        let k = ((kf * n as f64) as usize).clamp(1, n - 1);
        let (m, degenerate) = soft_top_k(&values, k, 0.1, Stopping::Tolerance { max_iters: 500, tol: 1e-10 }).unwrap();
        prop_assume!(m.converged && !degenerate);
        prop_assert!(m.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((m.sum() - k as f64).abs() < 1e-6);
    }

    #[test]
    fn resize_stays_within_range((values, s) in square_map(), dh in 1usize..20, dw in 1usize..20) {
        let out = bilinear_resize(&values, s, s, dh, dw).unwrap();
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(out.len(), dh * dw);
        prop_assert!(out.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn attention_rows_are_distributions(q in prop::collection::vec(-3.0f64..3.0, 5 * 16), k in prop::collection::vec(-3.0f64..3.0, 3 * 16)) {
        let probs = attention_probs(&Mat::from_vec(5, 16, q), &Mat::from_vec(3, 16, k), 2, 8);
        for p in probs {
            for r in 0..p.rows() {
                prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(p.row(r).iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn cfg_endpoints_are_exact(u in prop::collection::vec(-5.0f64..5.0, 12), c in prop::collection::vec(-5.0f64..5.0, 12)) {
        let (mu, mc) = (Mat::from_vec(4, 3, u), Mat::from_vec(4, 3, c));
        prop_assert_eq!(cfg_combine(&mu, &mc, 0.0).unwrap(), mu.clone());
        prop_assert_eq!(cfg_combine(&mu, &mc, 1.0).unwrap(), mc);
        let g = Mat::filled(4, 3, 1.0);
        prop_assert_eq!(energy_correct(&mu, &g, 0.0, 0.5).unwrap(), mu.clone());
        prop_assert_eq!(energy_correct(&mu, &g, 100.0, 1.0).unwrap(), mu);
    }

    #[test]
    fn risk_difference_is_bounded(labels in prop::collection::vec(0u8..3, 1..60)) {
        let rd = risk_difference(&labels, &0, &1).unwrap();
        prop_assert!((0.0..=1.0).contains(&rd));
        prop_assert_eq!(rd, risk_difference(&labels, &1, &0).unwrap());
    }
}
