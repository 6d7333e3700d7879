mod common;

use common::{fd_hessian, gram_rows, inverse_power_min_eig};
use halo_core::theory::linalg::{symmetric_eigenvalues, Matrix};
use halo_core::theory::{
    check_instance, halo_hessian, in_region, sample_instance, schur_direct, schur_eliminated,
    smallest_singular_value, verify_convexity, verify_convexity_sequential, LinearInstance, VerifyOptions,
};
use halo_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn identity_instance(lambdas: Vec<f64>, w: Vec<f64>, xi: f64) -> LinearInstance {
    let p = w.len();
    let mut x = vec![0.0; p * p];
    for j in 0..p {
        x[j * p + j] = 1.0;
    }
    LinearInstance {
        n: p,
        p,
        x,
        y: vec![0.0; p],
        w,
        lambdas,
        xi,
    }
}

/// Largest entrywise deviation relative to the largest analytic entry.
fn normwise_err(a: &Matrix, b: &[Vec<f64>]) -> f64 {
    let scale = a.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    for i in 0..a.n {
        for j in 0..a.n {
            worst = worst.max((a.get(i, j) - b[i][j]).abs());
        }
    }
    worst / scale
}

#[test]
fn smallest_singular_value_examples() {
    assert!((smallest_singular_value(&[1.0, 0.0, 0.0, 1.0], 2, 2) - 1.0).abs() < 1e-14);
    assert!(smallest_singular_value(&[3.0, 0.0, 0.0, 0.0], 2, 2).abs() < 1e-14);
}

#[test]
fn smallest_singular_value_matches_inverse_power_iteration() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..10 {
        let x: Vec<f64> = (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let nu = smallest_singular_value(&x, 20, 5);
        let oracle = inverse_power_min_eig(&gram_rows(&x, 20, 5)).sqrt();
        assert!((nu - oracle).abs() <= 1e-8 * oracle, "{nu} vs {oracle}");
    }
}

#[test]
fn hessian_block_examples() {
    let inst = LinearInstance {
        n: 1,
        p: 1,
        x: vec![1.0],
        y: vec![0.0],
        w: vec![2.0],
        lambdas: vec![1.0],
        xi: 1.0,
    };
    let h = halo_hessian(&inst, 1.0).unwrap();
    assert_eq!(h.a, vec![12.0]);
    assert_eq!(h.b, vec![-2.0]);
    assert_eq!(h.c.data, vec![1.0]);
    assert_eq!(halo_hessian(&inst, 2.0).unwrap().c.data, vec![2.0]);

    let mut off = inst.clone();
    off.xi = 0.0;
    let h = halo_hessian(&off, 1.0).unwrap();
    assert_eq!(h.a, vec![0.0]);
    assert!(h.b.iter().all(|b| *b == 0.0));

    let mut zero = inst;
    zero.w = vec![0.0];
    assert!(matches!(halo_hessian(&zero, 1.0), Err(Error::Domain(_))));
}

#[test]
fn analytic_hessian_matches_finite_differences() {
    let opts = VerifyOptions::default();
    for i in 0..50 {
        let inst = sample_instance(3, i, &opts).unwrap();
        for scale in [1.0, 2.0] {
            let h = halo_hessian(&inst, scale).unwrap();
            let p = inst.p;
            let mut point = inst.lambdas.clone();
            point.extend(&inst.w);
            let f = |v: &[f64]| inst.objective(&v[..p], &v[p..], scale);
            let numeric = fd_hessian(&f, &point, 1e-5);
            let err = normwise_err(&h.full, &numeric);
            assert!(err <= 1e-5, "instance {i}: rel. err {err}");
        }
    }
}

#[test]
fn region_examples() {
    let inside = identity_instance(vec![1.0, 1.0], vec![2.0, 1.0], 2.5);
    let r = in_region(&inside).unwrap();
    assert!((r.nu - 1.0).abs() < 1e-12);
    assert!((r.lower - 12.0).abs() < 1e-9 && (r.upper - 24.0).abs() < 1e-9);
    assert!((r.xi_cubed - 15.625).abs() < 1e-12);
    assert!(r.inside);

    let outside = identity_instance(vec![1.0, 1.0], vec![2.0, 1.0], 3.0);
    assert!(!in_region(&outside).unwrap().inside);

    let zero = identity_instance(vec![1.0, 1.0], vec![2.0, 0.0], 2.5);
    assert!(matches!(in_region(&zero), Err(Error::Domain(_))));
}

#[test]
fn single_weight_boundary_is_inside() {
    for (lam, w) in [(1.0f64, 1.0), (0.9, 0.5), (1.2, 2.0)] {
        let bound: f64 = 24.0 * lam.powi(10) / w;
        let inst = identity_instance(vec![lam], vec![w], bound.cbrt());
        assert!(in_region(&inst).unwrap().inside, "λ={lam}, w={w}");
    }
}

#[test]
fn schur_complement_two_ways() {
    let opts = VerifyOptions::default();
    for i in 0..50 {
        let inst = sample_instance(8, i, &opts).unwrap();
        let h = halo_hessian(&inst, 1.0).unwrap();
        let d = schur_direct(&h).max_abs_diff(&schur_eliminated(&h).unwrap());
        assert!(d <= 1e-10, "instance {i}: {d}");
    }
}

#[test]
fn corrected_sandwich_always_holds() {
    let report = verify_convexity(60, 21, &VerifyOptions::default()).unwrap();
    assert!(report.weyl_bounds_hold);
    for s in &report.samples {
        assert!(s.inside.weyl_holds);
    }
}

#[test]
fn no_penalty_hessian_is_psd() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let opts = VerifyOptions::default();
    for i in 0..30 {
        let mut inst = sample_instance(rng.gen(), i, &opts).unwrap();
        inst.xi = 0.0;
        let c = check_instance(&inst, 1.0).unwrap();
        assert!(c.psd && c.min_eig >= -1e-9 * c.norm);
    }
}

#[test]
fn far_outside_instances_are_reported() {
    let report = verify_convexity(20, 5, &VerifyOptions::default()).unwrap();
    for s in &report.samples {
        let probe = &s.outside;
        assert!(probe.region.xi_cubed > probe.region.upper);
        eprintln!("outside probe: xi^3 {:.3e}, min eig {:.3e}", probe.region.xi_cubed, probe.min_eig);
    }
    eprintln!("{} of 20 far-outside probes indefinite", report.outside_indefinite);
}

#[test]
fn report_is_deterministic_and_order_independent() {
    let opts = VerifyOptions::default();
    let a = verify_convexity(25, 99, &opts).unwrap().to_json();
    let b = verify_convexity(25, 99, &opts).unwrap().to_json();
    let c = verify_convexity_sequential(25, 99, &opts).unwrap().to_json();
    assert_eq!(a, b);
    assert_eq!(a, c);
    let empty = verify_convexity(0, 1, &opts).unwrap();
    assert_eq!(empty.inside_tested, 0);
    assert!(empty.samples.is_empty());
}

#[test]
fn sampled_instances_lie_inside_their_region() {
    let opts = VerifyOptions::default();
    for i in 0..100 {
        let inst = sample_instance(4, i, &opts).unwrap();
        assert!((opts.p_min..=opts.p_max).contains(&inst.p));
        assert!(in_region(&inst).unwrap().inside);
    }
}

proptest! {
    #[test]
    fn jacobi_eigenvalues_match_trace_and_determinant(a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0) {
        let m = Matrix::from_fn(2, |i, j| match (i, j) { (0, 0) => a, (1, 1) => c, _ => b });
        let e = symmetric_eigenvalues(&m);
        prop_assert!(e[0] <= e[1]);
        prop_assert!((e[0] + e[1] - (a + c)).abs() < 1e-10);
        prop_assert!((e[0] * e[1] - (a * c - b * b)).abs() < 1e-9);
    }
}
