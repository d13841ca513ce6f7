use approx::assert_abs_diff_eq;
use dualbounds_web::*;

#[test]
fn fh_matches_closed_form_on_a_grid() {
    for i in 0..=10 {
        for j in 0..=10 {
            let (p0, p1) = (i as f64 / 10.0, j as f64 / 10.0);
            let b = fh_binary(p0, p1).unwrap();
            assert_abs_diff_eq!(b.lower, b.reference_lower.unwrap(), epsilon = 1e-9);
            assert_abs_diff_eq!(b.upper, b.reference_upper.unwrap(), epsilon = 1e-9);
        }
    }
}

#[test]
fn var_ite_approaches_gaussian_reference() {
    let b = gaussian_bounds("var_ite", 0.0, 1.0, 1.0, 2.0, 200, 0.0).unwrap();
    // Discretised Gaussian variance is below the continuous one.
    assert!(b.lower <= b.upper);
    assert_abs_diff_eq!(b.lower, 1.0, epsilon = 0.1);
    assert_abs_diff_eq!(b.upper, 9.0, epsilon = 0.8);
}

#[test]
fn other_gaussian_estimands_are_ordered() {
    let pe = gaussian_bounds("positive_effect", 0.0, 1.0, 0.5, 1.0, 50, 0.0).unwrap();
    assert!(0.0 <= pe.lower && pe.lower <= pe.upper);
    // Equal spreads: the comonotone coupling gives the constant effect 0.5.
    assert_abs_diff_eq!(pe.lower, 0.5, epsilon = 1e-6);
    let q = gaussian_bounds("ite_quantile", 0.0, 1.0, 0.0, 1.0, 50, 0.5).unwrap();
    assert!(q.lower <= 0.0 && 0.0 <= q.upper, "{q:?}");
}

#[test]
fn lee_matches_trimming_formula() {
    let b = lee_bounds(1.0, 1.0, 0.6, 1.0, 300).unwrap();
    assert_abs_diff_eq!(b.lower, b.reference_lower.unwrap(), epsilon = 0.02);
    assert_abs_diff_eq!(b.upper, b.reference_upper.unwrap(), epsilon = 0.02);
    let none = lee_bounds(1.0, 1.0, 0.7, 0.7, 50).unwrap();
    assert_abs_diff_eq!(none.lower, 1.0, epsilon = 1e-9);
    assert_abs_diff_eq!(none.upper, 1.0, epsilon = 1e-9);
}

#[test]
fn bad_inputs_become_json_errors() {
    let v: serde_json::Value = serde_json::from_str(&fh_binary_json(1.5, 0.2)).unwrap();
    assert!(v["error"].as_str().unwrap().contains("p0"));
    let v: serde_json::Value = serde_json::from_str(&gaussian_bounds_json("nope", 0.0, 1.0, 0.0, 1.0, 10, 0.0)).unwrap();
    assert!(v["error"].as_str().unwrap().contains("nope"));
    let v: serde_json::Value = serde_json::from_str(&lee_bounds_json(0.0, 1.0, 0.8, 0.5, 10)).unwrap();
    assert!(v["error"].as_str().unwrap().contains("monotone"));
    let v: serde_json::Value = serde_json::from_str(&lee_bounds_json(0.0, 1.0, 0.5, 0.8, 10_000)).unwrap();
    assert!(v["error"].as_str().unwrap().contains("nvals"));
    let v: serde_json::Value = serde_json::from_str(&lee_bounds_json(0.0, 1.0, 0.5, 0.8, 20)).unwrap();
    assert!(v["lower"].as_f64().unwrap() <= v["upper"].as_f64().unwrap());
}
