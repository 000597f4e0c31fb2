//! Browser bindings for the agreement and lexical-rule parts of lfd-core.

use lfd_core::agreement::{cohen_kappa, eta_bound, expected_kappa, simulate_annotators, NoiseModelParams};
use lfd_core::features::{compile_safe_regex, fires};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn to_js<T: Serialize>(value: &T) -> Result<JsValue, JsError> {
    serde_wasm_bindgen::to_value(value).map_err(js_err)
}

fn parse_bits(s: &str) -> Result<Vec<u8>, JsError> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| match t {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(JsError::new(&format!("expected 0 or 1, got {other:?}"))),
        })
        .collect()
}

#[derive(Serialize)]
struct KappaOut {
    n: usize,
    p_o: f64,
    p_e: f64,
    kappa: Option<f64>,
    degenerate: bool,
    passes: bool,
}

/// Cohen's kappa of two 0/1 sequences written as "1,0,1,1" or "1 0 1 1".
#[wasm_bindgen(js_name = kappaOf)]
pub fn kappa_of(a: &str, b: &str, kappa_star: f64) -> Result<JsValue, JsError> {
    let report = cohen_kappa(&parse_bits(a)?, &parse_bits(b)?).map_err(js_err)?;
    to_js(&KappaOut {
        n: report.n,
        p_o: report.p_o,
        p_e: report.p_e,
        kappa: report.kappa,
        degenerate: report.degenerate,
        passes: report.kappa.is_some_and(|k| k >= kappa_star),
    })
}

#[derive(Serialize)]
struct NoiseOut {
    eta_bar: f64,
    inflation: f64,
    expected_kappa: f64,
    empirical_kappa: Option<f64>,
    cap: f64,
}

/// Noise cap for a kappa threshold, plus the closed-form and simulated
/// agreement of two raters with error rate `eta` on prevalence `pi`.
#[wasm_bindgen(js_name = noiseModel)]
pub fn noise_model(kappa_star: f64, eta: f64, pi: f64, zeta: f64, n: usize, seed: u32) -> Result<JsValue, JsError> {
    let bound = eta_bound(kappa_star).map_err(js_err)?;
    let sim = simulate_annotators(&NoiseModelParams {
        eta,
        pi,
        zeta,
        n,
        seed: seed as u64,
    })
    .map_err(js_err)?;
    let empirical = cohen_kappa(&sim.rater_a, &sim.rater_b).map_err(js_err)?.kappa;
    to_js(&NoiseOut {
        eta_bar: bound.eta_bar,
        inflation: bound.inflation,
        expected_kappa: expected_kappa(eta, pi).map_err(js_err)?,
        empirical_kappa: empirical,
        cap: (1.0 - 2.0 * eta).powi(2),
    })
}

#[derive(Serialize)]
struct RuleOut {
    fired: Vec<u8>,
    count: usize,
}

/// Apply a lexical rule to one text per line. Patterns outside the safe
/// dialect (backreferences, lookaround) are rejected with the reason.
#[wasm_bindgen(js_name = applyRule)]
pub fn apply_rule(pattern: &str, texts: &str, case_sensitive: bool) -> Result<JsValue, JsError> {
    let re = compile_safe_regex(pattern, case_sensitive).map_err(js_err)?;
    let fired: Vec<u8> = texts
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| fires(&re, l) as u8)
        .collect();
    let count = fired.iter().filter(|&&v| v == 1).count();
    to_js(&RuleOut { fired, count })
}
