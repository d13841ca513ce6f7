//! Frozen reference values for the estimators and the multiplier bootstrap.
//! References were computed independently (numpy / scipy).

use approx::assert_abs_diff_eq;
use dualbounds::bootstrap::{mb_select_lcb, multiplier_bootstrap_quantile};
use dualbounds::dual::Side;
use dualbounds::estimators::{
    delta_method_bound, imbens_manski_critical_value, one_sided_bound, quasilinear_bound, standard_error,
    two_sided_interval, IntervalMethod, SummandTable,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[test]
fn one_sided_bounds_on_fixed_summands() {
    let v = [1.0, 2.0, 3.0, 4.0, 5.0];
    let lo = one_sided_bound(&v, 0.05, Side::Lower, None).unwrap();
    let hi = one_sided_bound(&v, 0.05, Side::Upper, None).unwrap();
    assert_abs_diff_eq!(lo.theta_hat, 3.0, epsilon = 1e-15);
    assert_abs_diff_eq!(lo.confidence_bound, 1.8369128463233262, epsilon = 1e-12);
    assert_abs_diff_eq!(hi.confidence_bound, 4.163087153676674, epsilon = 1e-12);
    assert!(!lo.degenerate_variance);
    let flat = one_sided_bound(&[2.0; 4], 0.05, Side::Lower, None).unwrap();
    assert!(flat.degenerate_variance);
    assert_eq!(flat.confidence_bound, 2.0);
}

#[test]
fn cluster_robust_standard_error() {
    let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let se = standard_error(&v, Some(&[0, 0, 1, 1, 2, 2])).unwrap();
    assert_abs_diff_eq!(se, 1.1547005383792515, epsilon = 1e-14);
    assert!(standard_error(&v, Some(&[0; 6])).is_err());
}

#[test]
fn delta_method_for_a_ratio() {
    let a = [1.0, 2.0, 0.5, 3.0, 1.5, 2.5];
    let c = [2.0, 1.0, 1.5, 2.5, 2.0, 1.0];
    let h = |m: &[f64]| Ok(m[0] / m[1]);
    let g = |m: &[f64]| vec![1.0 / m[1], -m[0] / (m[1] * m[1])];
    let b = delta_method_bound(&a, &[&c], &h, &g, 0.05, Side::Lower, None).unwrap();
    assert_abs_diff_eq!(b.theta_hat, 1.05, epsilon = 1e-14);
    assert_abs_diff_eq!(b.se, 0.26543360751796297, epsilon = 1e-12);
    assert_abs_diff_eq!(b.confidence_bound, 0.6134005679592651, epsilon = 1e-10);
    // A wrong gradient is caught.
    let bad = |m: &[f64]| vec![1.0 / m[1], 0.0];
    assert!(delta_method_bound(&a, &[&c], &h, &bad, 0.05, Side::Lower, None).is_err());
}

#[test]
fn imbens_manski_critical_values() {
    for (r, want) in [(0.5, 1.7697128473565429), (1.0, 1.6814774423281533), (2.0, 1.6461455482153105)] {
        assert_abs_diff_eq!(imbens_manski_critical_value(r, 1.0, 0.05).unwrap(), want, epsilon = 1e-9);
    }
    assert_abs_diff_eq!(imbens_manski_critical_value(0.0, 1.0, 0.05).unwrap(), 1.959963984540054, epsilon = 1e-9);
}

#[test]
fn interval_methods_nest() {
    let v: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
    let w: Vec<f64> = v.iter().map(|x| x + 0.3).collect();
    let lo = one_sided_bound(&v, 0.05, Side::Lower, None).unwrap();
    let hi = one_sided_bound(&w, 0.05, Side::Upper, None).unwrap();
    let bonf = two_sided_interval(&lo, &hi, 0.0, 0.05, IntervalMethod::Bonferroni).unwrap();
    let im = two_sided_interval(&lo, &hi, 0.0, 0.05, IntervalMethod::ImbensManski).unwrap();
    assert!(bonf.lower <= im.lower && im.upper <= bonf.upper);
    assert!(im.lower <= lo.confidence_bound + 1e-12 || im.critical_value <= 1.6449);
}

#[test]
fn quasilinear_root_of_a_step_family() {
    // g(c) = 0.3 - c: lower crossing at 0.3.
    let r = quasilinear_bound((-1.0, 1.0), 1e-10, Side::Lower, |c| Ok(0.3 - c)).unwrap();
    assert_abs_diff_eq!(r.value, 0.3, epsilon = 1e-9);
    assert!(!r.grid_fallback);
    let e = quasilinear_bound((-1.0, 1.0), 1e-10, Side::Lower, |_| Ok(1.0)).unwrap_err();
    assert!(e.to_string().contains("sign"), "{e}");
}

fn independent_table(k: usize, n: usize, seed: u64) -> SummandTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols = (0..k).map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    SummandTable::new(cols, vec![0; n]).unwrap()
}

#[test]
fn bootstrap_quantiles_match_gaussian_maxima() {
    let q1 = multiplier_bootstrap_quantile(&independent_table(1, 2000, 1), 0.05, 20_000, 9).unwrap();
    assert_abs_diff_eq!(q1, 1.6448536269514722, epsilon = 0.05);
    let q2 = multiplier_bootstrap_quantile(&independent_table(2, 2000, 2), 0.05, 20_000, 9).unwrap();
    assert_abs_diff_eq!(q2, 1.954500, epsilon = 0.05);
    // Same seed, same draws.
    let t = independent_table(3, 300, 3);
    assert_eq!(mb_select_lcb(&t, 0.05, 2000, 4).unwrap(), mb_select_lcb(&t, 0.05, 2000, 4).unwrap());
}
