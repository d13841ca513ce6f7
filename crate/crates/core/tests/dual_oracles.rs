use std::sync::Arc;
use std::time::Instant;

use dualbounds::dual::{
    assemble_conditional_lp, conditional_mean_of_dual, evaluate_dual, evaluation_grid,
    feasibility_adjust, max_violation, solve_conditional_dual, ConstraintFunction, DiscreteLaw,
    DualOptions, DualProblem, OutcomePoint, Side,
};
use dualbounds::lp::{solve_lp, LinearProgram, LpStatus, RowSense, VarBound};
use dualbounds::stats::norm_quantile;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar_law(ys: &[f64], ps: &[f64]) -> DiscreteLaw {
    DiscreteLaw::new(ys.iter().map(|y| OutcomePoint::Scalar(*y)).collect(), ps.to_vec()).unwrap()
}

fn random_pmf(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    let mut p: Vec<f64> = w.iter().map(|v| v / s).collect();
    let rest: f64 = p[..m - 1].iter().sum();
    p[m - 1] = 1.0 - rest;
    p
}

/// Sharp bound by a primal LP over couplings.
fn primal_bound(problem: &DualProblem, l0: &DiscreteLaw, l1: &DiscreteLaw, side: Side) -> f64 {
    let (m0, m1) = (l0.len(), l1.len());
    let n = m0 * m1;
    let sigma = side.sign();
    let mut obj = Vec::with_capacity(n);
    for a in l0.support() {
        for b in l1.support() {
            obj.push(-sigma * problem.cost(a, b, &[]));
        }
    }
    let mut lp = LinearProgram::new(obj);
    for j in 0..n {
        lp.set_bound(j, VarBound::NonNegative);
    }
    for j in 0..m0 {
        let mut row = vec![0.0; n];
        row[j * m1..(j + 1) * m1].iter_mut().for_each(|v| *v = 1.0);
        lp.add_row(&row, RowSense::Eq, l0.pmf()[j]);
    }
    for i in 0..m1 {
        let mut row = vec![0.0; n];
        (0..m0).for_each(|j| row[j * m1 + i] = 1.0);
        lp.add_row(&row, RowSense::Eq, l1.pmf()[i]);
    }
    for c in &problem.constraints {
        let mut row = Vec::with_capacity(n);
        for a in l0.support() {
            for b in l1.support() {
                row.push(c.eval(a, b));
            }
        }
        lp.add_row(&row, RowSense::Le, 0.0);
    }
    let sol = solve_lp(&lp, 100_000).unwrap();
    assert_eq!(sol.status, LpStatus::Optimal);
    -sigma * sol.objective_value
}

fn fh(t0: f64, t1: f64) -> DualProblem {
    DualProblem::unconstrained(move |a, b, _| ((a.y() <= t0) && (b.y() <= t1)) as u8 as f64)
}

#[test]
fn frechet_hoeffding_binary_grid() {
    for i in 0..20 {
        let p = 0.05 + 0.045 * i as f64;
        let q = 0.95 - 0.04 * i as f64;
        let l0 = scalar_law(&[0.0, 1.0], &[q, 1.0 - q]);
        let l1 = scalar_law(&[0.0, 1.0], &[p, 1.0 - p]);
        let s = solve_conditional_dual(&fh(0.0, 0.0), &[], &l0, &l1, &DualOptions::default()).unwrap();
        assert!((s.objective_value - (p + q - 1.0).max(0.0)).abs() < 1e-12);
        let up = DualOptions::default().with_side(Side::Upper);
        let s = solve_conditional_dual(&fh(0.0, 0.0), &[], &l0, &l1, &up).unwrap();
        assert!((s.objective_value - p.min(q)).abs() < 1e-12);
    }
}

#[test]
fn fh_plug_in_mean_equals_objective() {
    let l0 = scalar_law(&[0.0, 1.0], &[0.6, 0.4]);
    let l1 = scalar_law(&[0.0, 1.0], &[0.7, 0.3]);
    let s = solve_conditional_dual(&fh(0.0, 0.0), &[], &l0, &l1, &DualOptions::default()).unwrap();
    let c0 = conditional_mean_of_dual(&s, 0, &l0).unwrap();
    let c1 = conditional_mean_of_dual(&s, 1, &l1).unwrap();
    assert!((c0 + c1 - s.objective_value).abs() < 1e-10);
    assert!((s.objective_value - 0.3).abs() < 1e-12);
}

#[test]
fn squared_difference_matches_sorted_quantiles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let problem = DualProblem::unconstrained(|a, b, _| (b.y() - a.y()).powi(2));
    for _ in 0..20 {
        let n = rng.random_range(2..=30);
        let mut y0: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut y1: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..5.0)).collect();
        let p = vec![1.0 / n as f64; n];
        let l0 = scalar_law(&y0, &p);
        let l1 = scalar_law(&y1, &p);
        y0.sort_by(f64::total_cmp);
        y1.sort_by(f64::total_cmp);
        let want: f64 = y0.iter().zip(&y1).map(|(a, b)| (b - a).powi(2)).sum::<f64>() / n as f64;
        let s = solve_conditional_dual(&problem, &[], &l0, &l1, &DualOptions::default()).unwrap();
        assert!((s.objective_value - want).abs() < 1e-9 * (1.0 + want));
        if n <= 8 {
            let lp = assemble_conditional_lp(&problem, &[], &l0, &l1, Side::Lower).unwrap();
            let sol = solve_lp(&lp, 100_000).unwrap();
            assert!((sol.objective_value - want).abs() < 1e-9 * (1.0 + want));
        }
    }
}

fn cost_family(k: usize) -> DualProblem {
    match k % 4 {
        0 => DualProblem::unconstrained(|a, b, _| (b.y() - a.y()).powi(2)),
        1 => DualProblem::unconstrained(|a, b, _| (b.y() - a.y() < 0.3) as u8 as f64),
        2 => DualProblem::unconstrained(|a, b, _| (b.y() - a.y()).max(0.0)),
        _ => DualProblem::unconstrained(|a, b, _| (a.y() * b.y()).sin() + a.y().abs()),
    }
}

#[test]
fn weak_duality_under_corrupted_laws() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..300 {
        let problem = cost_family(trial);
        let m0 = rng.random_range(2..=5);
        let m1 = rng.random_range(2..=5);
        let y0: Vec<f64> = (0..m0).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y1: Vec<f64> = (0..m1).map(|_| rng.random_range(-2.0..2.0)).collect();
        let truth0 = scalar_law(&y0, &random_pmf(&mut rng, m0));
        let truth1 = scalar_law(&y1, &random_pmf(&mut rng, m1));
        // Corrupted laws: shifted and jittered support, different masses.
        let k0 = rng.random_range(2..=6);
        let k1 = rng.random_range(2..=6);
        let q0: Vec<f64> = (0..k0).map(|_| rng.random_range(-3.0..3.0)).collect();
        let q1: Vec<f64> = (0..k1).map(|_| rng.random_range(-3.0..3.0)).collect();
        let fit0 = scalar_law(&q0, &random_pmf(&mut rng, k0));
        let fit1 = scalar_law(&q1, &random_pmf(&mut rng, k1));
        for side in [Side::Lower, Side::Upper] {
            let opts = DualOptions::default().with_side(side);
            let raw = solve_conditional_dual(&problem, &[], &fit0, &fit1, &opts).unwrap();
            let g0 = evaluation_grid(&fit0, truth0.support());
            let g1 = evaluation_grid(&fit1, truth1.support());
            let adj = feasibility_adjust(&raw, &problem, &[], &g0, &g1).unwrap();
            assert!(max_violation(&adj, &problem, &[], &g0, &g1).unwrap() <= 1e-8);
            let value = conditional_mean_of_dual(&adj, 0, &truth0).unwrap()
                + conditional_mean_of_dual(&adj, 1, &truth1).unwrap();
            let sharp = primal_bound(&problem, &truth0, &truth1, side);
            match side {
                Side::Lower => assert!(value <= sharp + 1e-8, "{value} > {sharp}"),
                Side::Upper => assert!(value >= sharp - 1e-8, "{value} < {sharp}"),
            }
        }
    }
}

fn lee_problem(monotone: bool) -> DualProblem {
    let cost = Arc::new(|a: &OutcomePoint, b: &OutcomePoint, _: &[f64]| (b.y() - a.y()) * a.s());
    let constraints = if monotone {
        vec![ConstraintFunction::new("monotone selection", |a, b| (a.s() > b.s()) as u8 as f64)]
    } else {
        Vec::new()
    };
    DualProblem::new(cost, constraints)
}

#[test]
fn lee_trimming_closed_form() {
    // P(S0 = 1) = 0.6, P(S1 = 1) = 1, Y1 | S1 = 1 uniform on 10 points.
    let y1: Vec<f64> = (0..10).map(|k| k as f64 * 0.7 - 1.0).collect();
    let l1 = DiscreteLaw::compound(1.0, &|u| y1[((u * 11.0).round() as usize) - 1], 10).unwrap();
    let l0 = DiscreteLaw::compound(0.6, &|u| 2.0 * u - 1.0, 5).unwrap();
    let ey0_sel = l0.expect(|p| p.y() * p.s()) / 0.6;
    let trimmed = y1[..6].iter().sum::<f64>() / 6.0;
    let want = 0.6 * (trimmed - ey0_sel);
    let s = solve_conditional_dual(&lee_problem(true), &[], &l0, &l1, &DualOptions::default()).unwrap();
    assert!((s.objective_value - want).abs() < 1e-10, "{} vs {want}", s.objective_value);
    let up = DualOptions::default().with_side(Side::Upper);
    let s = solve_conditional_dual(&lee_problem(true), &[], &l0, &l1, &up).unwrap();
    let top = y1[4..].iter().sum::<f64>() / 6.0;
    assert!((s.objective_value - 0.6 * (top - ey0_sel)).abs() < 1e-10);
}

#[test]
fn lagrangian_path_matches_general_lp() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let p1 = rng.random_range(0.2..1.0);
        let p0 = rng.random_range(0.05..1.0) * p1;
        let (mu0, mu1) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n0 = rng.random_range(2..10);
        let n1 = rng.random_range(2..10);
        let l0 = DiscreteLaw::compound(p0, &|u| mu0 + norm_quantile(u), n0).unwrap();
        let l1 = DiscreteLaw::compound(p1, &|u| mu1 + 2.0 * norm_quantile(u), n1).unwrap();
        for side in [Side::Lower, Side::Upper] {
            let problem = lee_problem(true);
            let s = solve_conditional_dual(&problem, &[], &l0, &l1, &DualOptions::default().with_side(side)).unwrap();
            let lp = assemble_conditional_lp(&problem, &[], &l0, &l1, side).unwrap();
            let sol = solve_lp(&lp, 100_000).unwrap();
            let lp_value = side.sign() * sol.objective_value;
            assert!((s.objective_value - lp_value).abs() < 1e-8, "{side:?}: {} vs {lp_value}", s.objective_value);
            assert!((s.objective_value - primal_bound(&problem, &l0, &l1, side)).abs() < 1e-8);
            let g0 = l0.support().to_vec();
            let g1 = l1.support().to_vec();
            assert!(max_violation(&s, &problem, &[], &g0, &g1).unwrap() <= 1e-9);
            assert!(s.multipliers[0] >= 0.0);
        }
    }
}

#[test]
fn monotone_constraint_only_tightens() {
    let l0 = DiscreteLaw::compound(0.4, &|u| norm_quantile(u) + 1.0, 8).unwrap();
    let l1 = DiscreteLaw::compound(0.7, &|u| norm_quantile(u), 8).unwrap();
    let opts = DualOptions::default();
    let with = solve_conditional_dual(&lee_problem(true), &[], &l0, &l1, &opts).unwrap();
    let without = solve_conditional_dual(&lee_problem(false), &[], &l0, &l1, &opts).unwrap();
    assert!(with.objective_value >= without.objective_value - 1e-12);
    assert!(with.objective_value > without.objective_value + 1e-3);
}

#[test]
fn general_lp_path_with_two_constraints() {
    let l0 = DiscreteLaw::compound(0.4, &|u| norm_quantile(u), 4).unwrap();
    let l1 = DiscreteLaw::compound(0.7, &|u| norm_quantile(u) + 0.5, 4).unwrap();
    let mut problem = lee_problem(true);
    problem.constraints.push(ConstraintFunction::new("bounded shift", |a, b| {
        ((b.y() - a.y()).abs() > 3.0 && a.s() * b.s() > 0.0) as u8 as f64
    }));
    for side in [Side::Lower, Side::Upper] {
        let s = solve_conditional_dual(&problem, &[], &l0, &l1, &DualOptions::default().with_side(side)).unwrap();
        let want = primal_bound(&problem, &l0, &l1, side);
        assert!((s.objective_value - want).abs() < 1e-8);
    }
}

#[test]
fn lower_never_exceeds_upper() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for k in 0..100 {
        let problem = cost_family(k);
        let y0: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y1: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let l0 = scalar_law(&y0, &random_pmf(&mut rng, 6));
        let l1 = scalar_law(&y1, &random_pmf(&mut rng, 6));
        let lo = solve_conditional_dual(&problem, &[], &l0, &l1, &DualOptions::default()).unwrap();
        let hi = solve_conditional_dual(&problem, &[], &l0, &l1, &DualOptions::default().with_side(Side::Upper)).unwrap();
        assert!(lo.objective_value <= hi.objective_value + 1e-10);
    }
}

#[test]
fn min_norm_option_keeps_the_value() {
    let problem = DualProblem::unconstrained(|a, b, _| (b.y() - a.y() < 0.0) as u8 as f64);
    let l0 = scalar_law(&[0.0, 1.0, 2.0], &[0.2, 0.5, 0.3]);
    let l1 = scalar_law(&[0.5, 1.5], &[0.4, 0.6]);
    let plain = solve_conditional_dual(&problem, &[], &l0, &l1, &DualOptions::default()).unwrap();
    let opts = DualOptions { min_norm: true, ..DualOptions::default() };
    let refined = solve_conditional_dual(&problem, &[], &l0, &l1, &opts).unwrap();
    assert!((plain.objective_value - refined.objective_value).abs() < 1e-8);
    let norm = |s: &dualbounds::dual::DualSolution| {
        s.values_0.iter().chain(&s.values_1).map(|v| v * v).sum::<f64>()
    };
    assert!(norm(&refined) <= norm(&plain) + 1e-12);
}

#[test]
fn refining_the_grid_does_not_lose_much() {
    let mut changes = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let problem = DualProblem::unconstrained(|a, b, _| (b.y() - a.y()).max(0.0));
    for _ in 0..100 {
        let (m, s) = (rng.random_range(-1.0..1.0), rng.random_range(0.5..2.0));
        let q0 = |u: f64| Ok(OutcomePoint::Scalar(norm_quantile(u)));
        let q1 = move |u: f64| Ok(OutcomePoint::Scalar(m + s * norm_quantile(u)));
        let mut values = Vec::new();
        for nvals in [10, 50] {
            let l0 = dualbounds::dual::discretize_law(&q0, nvals).unwrap();
            let l1 = dualbounds::dual::discretize_law(&q1, nvals).unwrap();
            let sol = solve_conditional_dual(&problem, &[], &l0, &l1, &DualOptions::default()).unwrap();
            values.push(sol.objective_value);
        }
        changes.push(values[1] - values[0]);
    }
    changes.sort_by(f64::total_cmp);
    assert!(changes[50] >= -1e-3);
}

#[test]
fn interpolated_violation_matches_dense_scan() {
    let problem = DualProblem::unconstrained(|a, b, _| (b.y() - a.y()).powi(2));
    let q = |u: f64| Ok(OutcomePoint::Scalar(norm_quantile(u)));
    let l0 = dualbounds::dual::discretize_law(&q, 10).unwrap();
    let l1 = dualbounds::dual::discretize_law(&|u| Ok(OutcomePoint::Scalar(0.5 + norm_quantile(u))), 10).unwrap();
    let sol = solve_conditional_dual(&problem, &[], &l0, &l1, &DualOptions::default()).unwrap();
    let dense: Vec<OutcomePoint> = (0..=400).map(|k| OutcomePoint::Scalar(-3.0 + 0.015 * k as f64)).collect();
    let g0 = evaluation_grid(&l0, &dense);
    let g1 = evaluation_grid(&l1, &dense);
    let adj = feasibility_adjust(&sol, &problem, &[], &g0, &g1).unwrap();
    let mut worst = f64::NEG_INFINITY;
    for a in &g0 {
        for b in &g1 {
            let v = evaluate_dual(&sol, 0, a).unwrap() + evaluate_dual(&sol, 1, b).unwrap() - (b.y() - a.y()).powi(2);
            worst = worst.max(v);
        }
    }
    assert!((adj.adjustment - worst.max(0.0) / 2.0).abs() < 1e-8);
    assert!(adj.adjustment > 0.0);
}

#[test]
fn lee_solve_timing() {
    let l0 = DiscreteLaw::compound(0.45, &|u| norm_quantile(u), 50).unwrap();
    let l1 = DiscreteLaw::compound(0.7, &|u| 2.0 + norm_quantile(u), 50).unwrap();
    let problem = lee_problem(true);
    let start = Instant::now();
    let reps = 200;
    for _ in 0..reps {
        for side in [Side::Lower, Side::Upper] {
            solve_conditional_dual(&problem, &[], &l0, &l1, &DualOptions::default().with_side(side)).unwrap();
        }
    }
    let per = start.elapsed().as_secs_f64() / (2 * reps) as f64;
    eprintln!("Lee 51x51 conditional solve: {:.3} ms", per * 1e3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adjusted_duals_are_feasible(seed in any::<u64>(), k in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let problem = cost_family(k);
        let y0: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y1: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let l0 = scalar_law(&y0, &random_pmf(&mut rng, 5));
        let l1 = scalar_law(&y1, &random_pmf(&mut rng, 4));
        let extra: Vec<OutcomePoint> = (0..10).map(|_| OutcomePoint::Scalar(rng.random_range(-4.0..4.0))).collect();
        let g0 = evaluation_grid(&l0, &extra);
        let g1 = evaluation_grid(&l1, &extra);
        let s = solve_conditional_dual(&problem, &[], &l0, &l1, &DualOptions::default()).unwrap();
        let adj = feasibility_adjust(&s, &problem, &[], &g0, &g1).unwrap();
        prop_assert!(adj.adjustment >= 0.0);
        prop_assert!(max_violation(&adj, &problem, &[], &g0, &g1).unwrap() <= 1e-8);
    }
}
