use ndarray::{Array2, Axis};
use proptest::prelude::*;
use tdm_core::data::{destandardize, read_csv, standardize, write_csv_to};
use tdm_core::imputer::effective_batch_size;
use tdm_core::inn::{TransformStack, DEFAULT_CLAMP};
use tdm_core::mask::{apply_mask, gen_mcar};
use tdm_core::metrics::{mae, rmse};
use tdm_core::optim::RmsProp;
use tdm_core::ot::{exact_ot_uniform, pairwise_sq_cost, sinkhorn_uniform, SinkhornConfig};
use tdm_core::rng::seeded_rng;
use tdm_core::{Dataset, MissingMask};

fn matrix(rows: std::ops::RangeInclusive<usize>, cols: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Array2<f64>> {
    (rows, cols).prop_flat_map(|(n, d)| {
        prop::collection::vec(-5.0f64..5.0, n * d).prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap())
    })
}

/// Two clouds with the same shape.
fn cloud_pair(max_rows: usize) -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (1..=max_rows, 1usize..=4).prop_flat_map(|(n, d)| {
        let cell = prop::collection::vec(-5.0f64..5.0, n * d);
        (cell.clone(), cell).prop_map(move |(a, b)| {
            (
                Array2::from_shape_vec((n, d), a).unwrap(),
                Array2::from_shape_vec((n, d), b).unwrap(),
            )
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_plan_is_a_scaled_permutation((a, b) in cloud_pair(12)) {
        let cost = pairwise_sq_cost(a.view(), b.view()).unwrap();
        let ot = exact_ot_uniform(&cost).unwrap();
        let n = a.nrows();
        let w = 1.0 / n as f64;
        for s in ot.plan.entries.sum_axis(Axis(0)).iter().chain(ot.plan.entries.sum_axis(Axis(1)).iter()) {
            prop_assert!((s - w).abs() < 1e-12);
        }
        prop_assert!(ot.plan.entries.iter().all(|&p| p == 0.0 || p == w));
        prop_assert!(ot.distance >= 0.0);
        let identity: f64 = (0..n).map(|i| cost.entries()[[i, i]]).sum::<f64>() * w;
        prop_assert!(ot.distance <= identity + 1e-12);
    }

    #[test]
    fn exact_distance_is_symmetric((a, b) in cloud_pair(10)) {
        let ab = exact_ot_uniform(&pairwise_sq_cost(a.view(), b.view()).unwrap()).unwrap().distance;
        let ba = exact_ot_uniform(&pairwise_sq_cost(b.view(), a.view()).unwrap()).unwrap().distance;
        prop_assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0));
        let aa = exact_ot_uniform(&pairwise_sq_cost(a.view(), a.view()).unwrap()).unwrap().distance;
        prop_assert!(aa.abs() < 1e-12);
    }

    #[test]
    fn sinkhorn_plan_is_feasible_and_not_below_exact((a, b) in cloud_pair(10), factor in 0.01f64..1.0) {
        let cost = pairwise_sq_cost(a.view(), b.view()).unwrap();
        let exact = exact_ot_uniform(&cost).unwrap().distance;
        let eps = (factor * cost.median()).max(1e-6);
        let ot = sinkhorn_uniform(&cost, &SinkhornConfig::new(eps)).unwrap();
        prop_assert!(ot.plan.marginal_violation() <= 1e-8);
        prop_assert!(ot.plan.entries.iter().all(|&p| p >= 0.0));
        prop_assert!(ot.plan.cost(&cost) >= exact - 1e-12 * exact.max(1.0));
    }

    #[test]
    fn rmse_bounds_mae_and_both_ignore_row_order(
        truth in matrix(2..=20, 1..=4),
        noise in prop::collection::vec(-3.0f64..3.0, 80),
        seed in any::<u64>(),
    ) {
        let (n, d) = truth.dim();
        let imputed = Array2::from_shape_fn((n, d), |(i, j)| truth[[i, j]] + noise[(i * d + j) % noise.len()]);
        let mask = gen_mcar(n, d, 0.5, &mut seeded_rng(seed, 0)).unwrap();
        prop_assume!(mask.missing_count() > 0);
        let (t, m) = (Dataset::new(truth.clone()).unwrap(), Dataset::new(imputed.clone()).unwrap());
        let (e1, e2) = (mae(&m, &t, &mask).unwrap(), rmse(&m, &t, &mask).unwrap());
        prop_assert!(e2 + 1e-12 >= e1);

        let order: Vec<usize> = (0..n).rev().collect();
        let flags = mask.flags().select(Axis(0), &order);
        let t2 = Dataset::new(truth.select(Axis(0), &order)).unwrap();
        let m2 = Dataset::new(imputed.select(Axis(0), &order)).unwrap();
        let mask2 = MissingMask::from_flags(flags);
        prop_assert!((mae(&m2, &t2, &mask2).unwrap() - e1).abs() < 1e-12);
        prop_assert!((rmse(&m2, &t2, &mask2).unwrap() - e2).abs() < 1e-12);
    }

    #[test]
    fn mcar_masks_never_empty_a_column(n in 2usize..40, d in 1usize..6, rate in 0.05f64..0.95, seed in any::<u64>()) {
        let mask = gen_mcar(n, d, rate, &mut seeded_rng(seed, 4)).unwrap();
        prop_assert!(mask.first_fully_missing_column().is_none());
        let data = Dataset::new(Array2::ones((n, d))).unwrap();
        let masked = apply_mask(&data, &mask).unwrap();
        for ((i, j), v) in masked.values().indexed_iter() {
            prop_assert_eq!(v.is_nan(), mask.is_missing(i, j));
        }
    }

    #[test]
    fn stack_inverse_round_trip(x in matrix(1..=16, 2..=8), blocks in 1usize..=3, seed in any::<u64>()) {
        let stack = TransformStack::init(x.ncols(), blocks, 2, DEFAULT_CLAMP, 1.0, &mut seeded_rng(seed, 2)).unwrap();
        let (z, _) = stack.forward(x.view()).unwrap();
        let back = stack.inverse(z.view()).unwrap();
        for (a, b) in back.iter().zip(x.iter()) {
            prop_assert!((a - b).abs() <= blocks as f64 * 1e-10);
        }
    }

    #[test]
    fn identity_stack_is_exact(x in matrix(1..=16, 2..=8), seed in any::<u64>()) {
        let stack = TransformStack::init(x.ncols(), 3, 2, DEFAULT_CLAMP, 0.0, &mut seeded_rng(seed, 2)).unwrap();
        let (z, _) = stack.forward(x.view()).unwrap();
        prop_assert_eq!(z, x);
    }

    #[test]
    fn rmsprop_zero_gradient_is_a_no_op(params in prop::collection::vec(-10.0f64..10.0, 1..50)) {
        let mut opt = RmsProp::new(params.len(), 0.01);
        let mut p = params.clone();
        opt.step(&mut p, &vec![0.0; params.len()], |i| i.to_string()).unwrap();
        prop_assert_eq!(p, params);
    }

    #[test]
    fn rmsprop_moves_against_the_gradient(g in prop::collection::vec(-10.0f64..10.0, 1..50)) {
        let mut opt = RmsProp::new(g.len(), 0.01);
        let mut p = vec![0.0; g.len()];
        opt.step(&mut p, &g, |i| i.to_string()).unwrap();
        for (pi, gi) in p.iter().zip(&g) {
            prop_assert!(pi * gi <= 0.0);
        }
    }

    #[test]
    fn effective_batch_is_a_bounded_power_of_two(n in 2usize..100_000, req in 1usize..4096) {
        let b = effective_batch_size(n, req).unwrap();
        prop_assert!(b >= 1 && b <= req && b <= n / 2);
        prop_assert!(b == req || b.is_power_of_two());
    }

    #[test]
    fn standardize_round_trip(x in matrix(2..=20, 1..=5)) {
        let data = Dataset::new(x.clone()).unwrap();
        let (scaled, params) = standardize(&data).unwrap();
        let back = destandardize(&scaled, &params).unwrap();
        for (a, b) in back.values().iter().zip(x.iter()) {
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn csv_round_trip_is_bit_exact(x in matrix(1..=10, 1..=5), holes in prop::collection::vec(any::<bool>(), 50)) {
        let mut values = x;
        let d = values.ncols();
        for ((i, j), v) in values.indexed_iter_mut() {
            if holes[(i * d + j) % holes.len()] {
                *v = f64::NAN;
            }
        }
        let data = Dataset::new(values.clone()).unwrap();
        let mut buf = Vec::new();
        write_csv_to(&data, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), false).unwrap();
        for (a, b) in back.values().iter().zip(values.iter()) {
            prop_assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
        }
    }
}
