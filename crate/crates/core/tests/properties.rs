use optmm::market_sim::{apply_fills, intensities, FillEvent};
use optmm::policy::{closed_form_policy, entropy_constant, policy_variance};
use optmm::pricing::{bs_call, OptionGrid};
use optmm::{Inventory, Matrix};
use proptest::prelude::*;

proptest! {
    #[test]
    fn call_price_bounds(s in 10.0..300.0f64, k in 10.0..300.0f64, tau in 0.01..5.0f64, sigma in 0.01..1.0f64) {
        let g = bs_call(s, k, tau, sigma, 0.0).unwrap();
        prop_assert!(g.price >= (s - k).max(0.0) - 1e-9);
        prop_assert!(g.price <= s + 1e-9);
        prop_assert!((0.0..=1.0).contains(&g.delta));
        prop_assert!(g.gamma >= 0.0);
        prop_assert!(g.theta <= 0.0);
    }

    #[test]
    fn intensities_are_non_negative(eps in proptest::collection::vec(-5.0..50.0f64, 2)) {
        let grid = OptionGrid::default_atm_single();
        let l = intensities(&eps, &grid).unwrap();
        for (li, e) in l.iter().zip(&eps) {
            prop_assert!(*li >= 0.0);
            prop_assert!((*li - (56.0 - 5.0 * e).max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn capped_inventory_stays_in_band(
        q in proptest::collection::vec(-4i64..=4, 6),
        plus in proptest::collection::vec(0u8..=1, 6),
        minus in proptest::collection::vec(0u8..=1, 6),
    ) {
        let q: Inventory = Matrix::from_flat(2, 3, q).unwrap();
        let f = FillEvent { dn_plus: Matrix::from_flat(2, 3, plus).unwrap(), dn_minus: Matrix::from_flat(2, 3, minus).unwrap() };
        let (next, kept) = apply_fills(&q, &f, Some(4)).unwrap();
        prop_assert!(next.as_slice().iter().all(|v| v.abs() <= 4));
        let (free, _) = apply_fills(&q, &f, None).unwrap();
        let net: i64 = q.as_slice().iter().sum::<i64>() + kept.dn_plus.as_slice().iter().map(|&x| i64::from(x)).sum::<i64>()
            - kept.dn_minus.as_slice().iter().map(|&x| i64::from(x)).sum::<i64>();
        prop_assert_eq!(net, next.as_slice().iter().sum::<i64>());
        prop_assert!(kept.count() <= f.count());
        if kept.count() == f.count() {
            prop_assert_eq!(free, next);
        }
    }

    #[test]
    fn closed_form_is_linear_in_value_differences(
        table in proptest::collection::vec(-10.0..10.0f64, 3),
        a in 10.0..100.0f64,
        b in 0.5..10.0f64,
    ) {
        let grid = OptionGrid::single(100.0, 2.0, 0.2, a, b);
        let v = |_t: f64, q: &Inventory| Ok(table[(q[(0, 0)] + 1) as usize]);
        let p = closed_form_policy(v, 0.0, &Inventory::zeros(1, 1), &grid, 0.01, None).unwrap();
        prop_assert!((p.mean[0] - (a / (2.0 * b) + 0.5 * (table[1] - table[2]))).abs() < 1e-12);
        prop_assert!((p.mean[1] - (a / (2.0 * b) + 0.5 * (table[1] - table[0]))).abs() < 1e-12);
        // bid plus ask mean depends only on the curvature of V
        let curv = table[0] + table[2] - 2.0 * table[1];
        prop_assert!((p.mean[0] + p.mean[1] - (a / b - 0.5 * curv)).abs() < 1e-12);
    }

    #[test]
    fn entropy_matches_log_det(gamma in 1e-4..1.0f64, b in proptest::collection::vec(0.5..10.0f64, 4)) {
        let mut grid = OptionGrid::single(100.0, 2.0, 0.2, 50.0, 5.0);
        grid.strikes = vec![95.0, 105.0];
        grid.maturities = vec![2.0, 3.0];
        grid.vol_surface = Matrix::filled(2, 2, 0.2);
        grid.a = Matrix::filled(2, 2, 50.0);
        grid.b = Matrix::from_flat(2, 2, b.clone()).unwrap();
        let closed = 4.0 * (1.0 + (2.0 * std::f64::consts::PI).ln())
            + b.iter().map(|bi| (gamma / (2.0 * bi)).ln()).sum::<f64>();
        let var = policy_variance(&grid, gamma);
        let log_det: f64 = var.iter().map(|v| (2.0 * std::f64::consts::PI * std::f64::consts::E * v).ln()).sum();
        prop_assert!((entropy_constant(&grid, gamma) - closed).abs() < 1e-10);
        prop_assert!((0.5 * log_det - closed).abs() < 1e-10);
    }
}
