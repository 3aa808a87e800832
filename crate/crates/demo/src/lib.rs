//! Browser bindings: translation TV of a conditioned law, sketch extraction,
//! and the small-ball estimate. Every entry point returns a JSON string.

use serde_json::json;
use sketchlab::dgauss::TruncationPolicy;
use sketchlab::experiment::{scenario, transfer_config, ExperimentConfig, SCENARIOS};
use sketchlab::spectrum::small_ball_check;
use sketchlab::streaming::posterior_laws;
use sketchlab::transfer::{evaluate_sketch, extract_sketch, sketch_apply, Route};
use sketchlab::translation::{conditioned_convolution, tv_distance};
use wasm_bindgen::prelude::*;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// TV between the law of the summed noisy prefix (conditioned on the
/// algorithm staying in its initial state) and its translate by `(vx, vy)`.
pub fn translation_tv_json(scenario_name: &str, r: f64, m: usize, vx: i64, vy: i64) -> Result<String, String> {
    if !(2.0..=32.0).contains(&r) || !(1..=16).contains(&m) {
        return Err("need 2 <= R <= 32 and 1 <= M <= 16".into());
    }
    let sc = scenario(scenario_name).ok_or_else(|| format!("unknown scenario {scenario_name}"))?;
    let alg = sc.algorithm.build(2).map_err(err)?;
    let sigma = vec![alg.initial_state; m + 1];
    let laws = posterior_laws(&alg, &sigma, r, m, &TruncationPolicy::default()).map_err(err)?;
    let nu = conditioned_convolution(&laws.measures, r, false).map_err(err)?;
    let tv = tv_distance(&nu, &[vx, vy]);
    Ok(json!({ "scenario": sc.name, "r": r, "m": m, "v": [vx, vy], "tv": tv, "support": nu.len() }).to_string())
}

/// Extract a sketch and decoder, then tabulate it on a small window of points.
pub fn extract_json(scenario_name: &str, route: &str, m: usize, seed: u64) -> Result<String, String> {
    let mut cfg = ExperimentConfig::default();
    cfg.run.scenario = scenario_name.into();
    cfg.run.route = route.into();
    cfg.params.m = m;
    cfg.run.seed = seed;
    cfg.validate(sketchlab::experiment::Verb::Extract).map_err(err)?;
    let route = Route::parse(route).map_err(err)?;
    let sc = scenario(scenario_name).expect("validated");
    let alg = sc.algorithm.build(2).map_err(err)?;
    let input = sc.input_measure();
    let problem = sc.problem(&cfg, route).map_err(err)?;
    let tcfg = transfer_config(&cfg, route, cfg.params.r).map_err(err)?;
    let (sk, dec, rep) = extract_sketch(&alg, &input, &problem, &tcfg, seed).map_err(err)?;
    let ev = evaluate_sketch(&sk, &dec, &input, &problem, 10_000, seed).map_err(err)?;
    let mut grid = Vec::new();
    for y in -3..=3i64 {
        let mut row = Vec::new();
        for x in -3..=3i64 {
            let v = sketch_apply(&sk, &[x, y]).map_err(err)?;
            row.push(json!({ "sketch": v.to_string(), "output": dec.decode(&v) }));
        }
        grid.push(row);
    }
    Ok(json!({
        "scenario": sc.name,
        "route": route.to_string(),
        "sigma": sk.sigma.label(),
        "dimension": sk.dimension(),
        "fibers": rep.fibers_met,
        "success": ev.success,
        "conflicts": dec.conflicts.len(),
        "warnings": rep.warnings,
        "grid": grid,
    })
    .to_string())
}

/// Monte Carlo `Pr[|A Y - b| <= u]` for a 1 x 2 matrix against the closed-form bound.
pub fn small_ball_json(a1: f64, a2: f64, r: f64, u: f64, b: f64, trials: u64, seed: u64) -> Result<String, String> {
    if trials == 0 || trials > 2_000_000 {
        return Err("trials must be in 1..=2000000".into());
    }
    let a = nalgebra::DMatrix::from_row_slice(1, 2, &[a1, a2]);
    let rep = small_ball_check(&a, r, u, &[b], trials, seed).map_err(err)?;
    Ok(json!({
        "empirical": rep.empirical,
        "std_error": rep.std_error,
        "bound": rep.bound,
        "admissible": rep.condition_lhs <= rep.condition_rhs,
        "pass": rep.pass,
    })
    .to_string())
}

pub fn scenario_names() -> Vec<&'static str> {
    SCENARIOS.iter().map(|s| s.name).collect()
}

#[wasm_bindgen]
pub fn translation_tv(scenario_name: &str, r: f64, m: usize, vx: i64, vy: i64) -> Result<String, JsValue> {
    translation_tv_json(scenario_name, r, m, vx, vy).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn extract(scenario_name: &str, route: &str, m: usize, seed: u64) -> Result<String, JsValue> {
    extract_json(scenario_name, route, m, seed).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn small_ball(a1: f64, a2: f64, r: f64, u: f64, b: f64, trials: u64, seed: u64) -> Result<String, JsValue> {
    small_ball_json(a1, a2, r, u, b, trials, seed).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn scenarios() -> String {
    scenario_names().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parity_odd_shift_is_disjoint() {
        let s = translation_tv_json("parity", 4.0, 2, 1, 0).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert!((v["tv"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn extract_and_small_ball_render() {
        let v: serde_json::Value = serde_json::from_str(&extract_json("parity", "exact", 4, 1).unwrap()).unwrap();
        assert_eq!(v["dimension"], 1);
        assert_eq!(v["grid"].as_array().unwrap().len(), 7);
        let s: serde_json::Value =
            serde_json::from_str(&small_ball_json(0.05, 0.02, 8.0, 0.1, 0.0, 20_000, 1).unwrap()).unwrap();
        assert_eq!(s["pass"], true);
        assert!(extract_json("nope", "exact", 4, 1).is_err());
        assert!(scenario_names().contains(&"mod3"));
    }
}
