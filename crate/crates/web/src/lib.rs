//! Browser demo: population bounds computed by the dual engine next to
//! their closed forms. The `*_json` functions are the wasm exports; they
//! take plain numbers and return a JSON string (`{"error": ...}` on bad
//! input) so the page needs no bindings beyond `wasm-bindgen`.

use dualbounds::dual::{discretize_law, DiscreteLaw, DualOptions, OutcomePoint, Side};
use dualbounds::estimands::{make_fh_cdf, make_ite_quantile, make_lee, make_positive_effect, make_var_ite, EstimandSpec};
use dualbounds::pipeline::population_bound;
use dualbounds::stats::{norm_pdf, norm_quantile};
use dualbounds::{Error, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Largest discretisation the page may request.
pub const MAX_NVALS: usize = 400;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
    /// Closed-form reference, when one exists.
    pub reference_lower: Option<f64>,
    pub reference_upper: Option<f64>,
}

fn bounds(spec: &EstimandSpec, law0: &DiscreteLaw, law1: &DiscreteLaw) -> Result<(f64, f64)> {
    let opts = DualOptions::default();
    Ok((population_bound(spec, law0, law1, Side::Lower, &opts)?, population_bound(spec, law0, law1, Side::Upper, &opts)?))
}

fn check_nvals(nvals: usize) -> Result<()> {
    if !(2..=MAX_NVALS).contains(&nvals) {
        return Err(Error::InvalidInput(format!("nvals must be in 2..={MAX_NVALS}, got {nvals}")));
    }
    Ok(())
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidInput(format!("{name} = {p} must lie in [0, 1]")));
    }
    Ok(())
}

fn binary_law(p_one: f64) -> Result<DiscreteLaw> {
    DiscreteLaw::new(vec![OutcomePoint::Scalar(0.0), OutcomePoint::Scalar(1.0)], vec![1.0 - p_one, p_one])
}

/// Bounds on `P(Y(0) = 0, Y(1) = 0)` for binary outcomes with
/// `P(Y(k) = 1) = p_k`.
pub fn fh_binary(p0: f64, p1: f64) -> Result<Bounds> {
    check_prob("p0", p0)?;
    check_prob("p1", p1)?;
    let spec = make_fh_cdf(0.0, 0.0)?;
    let (lower, upper) = bounds(&spec, &binary_law(p0)?, &binary_law(p1)?)?;
    let (a, b) = (1.0 - p0, 1.0 - p1);
    Ok(Bounds { lower, upper, reference_lower: Some((a + b - 1.0).max(0.0)), reference_upper: Some(a.min(b)) })
}

fn gaussian_law(mu: f64, sd: f64, nvals: usize) -> Result<DiscreteLaw> {
    if !(sd > 0.0 && sd.is_finite() && mu.is_finite()) {
        return Err(Error::InvalidInput(format!("need finite mean and positive sd, got N({mu}, {sd}^2)")));
    }
    discretize_law(&|u| Ok(OutcomePoint::Scalar(mu + sd * norm_quantile(u))), nvals)
}

/// Bounds on a functional of the treatment effect when `Y(k) ~ N(mu_k, sd_k^2)`.
/// `estimand` is one of `var_ite`, `positive_effect`, `ite_quantile`
/// (`param` is then the quantile level). References are for the
/// continuous laws, so they differ from the discretised values by
/// discretisation error.
pub fn gaussian_bounds(estimand: &str, mu0: f64, sd0: f64, mu1: f64, sd1: f64, nvals: usize, param: f64) -> Result<Bounds> {
    check_nvals(nvals)?;
    let (law0, law1) = (gaussian_law(mu0, sd0, nvals)?, gaussian_law(mu1, sd1, nvals)?);
    let (spec, reference) = match estimand {
        "var_ite" => (make_var_ite(), Some(((sd1 - sd0).powi(2), (sd1 + sd0).powi(2)))),
        "positive_effect" => (make_positive_effect(), None),
        "ite_quantile" => (make_ite_quantile(param)?, None),
        other => return Err(Error::InvalidInput(format!("unknown estimand {other:?}"))),
    };
    let (lower, upper) = bounds(&spec, &law0, &law1)?;
    Ok(Bounds { lower, upper, reference_lower: reference.map(|r| r.0), reference_upper: reference.map(|r| r.1) })
}

/// Lee bounds on the effect among always-selected units when selection
/// is monotone, `P(S(k) = 1) = p_k` with `p0 <= p1`, and
/// `Y(k) | S(k) = 1 ~ N(mu_k, sigma^2)` with `tau = mu_1 - mu_0`.
pub fn lee_bounds(tau: f64, sigma: f64, p0: f64, p1: f64, nvals: usize) -> Result<Bounds> {
    check_nvals(nvals)?;
    check_prob("p0", p0)?;
    check_prob("p1", p1)?;
    if !(p0 > 0.0 && p0 <= p1) {
        return Err(Error::InvalidInput(format!("monotone selection needs 0 < p0 <= p1, got p0 = {p0}, p1 = {p1}")));
    }
    if !(sigma > 0.0 && sigma.is_finite() && tau.is_finite()) {
        return Err(Error::InvalidInput("need finite tau and positive sigma".into()));
    }
    let law0 = DiscreteLaw::compound(p0, &|u| sigma * norm_quantile(u), nvals)?;
    let law1 = DiscreteLaw::compound(p1, &|u| tau + sigma * norm_quantile(u), nvals)?;
    let (lower, upper) = bounds(&make_lee(true), &law0, &law1)?;
    let eta = p0 / p1;
    let trim = if eta >= 1.0 { 0.0 } else { sigma * norm_pdf(norm_quantile(eta)) / eta };
    Ok(Bounds { lower, upper, reference_lower: Some(tau - trim), reference_upper: Some(tau + trim) })
}

fn to_json(r: Result<Bounds>) -> String {
    match r {
        Ok(b) => serde_json::to_string(&b),
        Err(e) => serde_json::to_string(&serde_json::json!({ "error": e.to_string() })),
    }
    .expect("plain structs serialise")
}

#[wasm_bindgen]
pub fn fh_binary_json(p0: f64, p1: f64) -> String {
    to_json(fh_binary(p0, p1))
}

#[wasm_bindgen]
pub fn gaussian_bounds_json(estimand: &str, mu0: f64, sd0: f64, mu1: f64, sd1: f64, nvals: usize, param: f64) -> String {
    to_json(gaussian_bounds(estimand, mu0, sd0, mu1, sd1, nvals, param))
}

#[wasm_bindgen]
pub fn lee_bounds_json(tau: f64, sigma: f64, p0: f64, p1: f64, nvals: usize) -> String {
    to_json(lee_bounds(tau, sigma, p0, p1, nvals))
}
