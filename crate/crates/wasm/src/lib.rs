//! Browser bindings for the demo page: the visual token gain, ROI sampling
//! and UCB curves, and a search over a scripted reward table.
//!
//! Every export takes and returns JSON strings. The `*_json` functions hold
//! the logic and run natively; the `#[wasm_bindgen]` wrappers only convert
//! errors.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use vragent_core::backends::scripted::ScriptedTree;
use vragent_core::backends::Backends;
use vragent_core::search::{roi_probabilities, ucb, SearchRun};
use vragent_core::vte::{compute_gain, vte_pipeline, Activation, Direction, VisualTokens, VteConfig};
use vragent_core::{ExpansionMode, Query, QuestionKind, RoiRegion, SearchConfig};

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

fn activation(name: &str) -> Result<Activation, String> {
    match name {
        "relu" => Ok(Activation::Relu),
        "softplus" => Ok(Activation::Softplus),
        "identity_clamped_nonneg" => Ok(Activation::IdentityClampedNonneg),
        other => Err(format!("unknown activation {other:?}")),
    }
}

#[derive(Serialize)]
struct GainPoint {
    ratio: f64,
    beta: f64,
}

/// β as the background/ROI attention ratio sweeps `0..=max_ratio` with
/// the ROI mean fixed at 1.
pub fn gain_curve_json(confidence: f64, kappa: f64, act: &str, max_ratio: f64, steps: u32) -> Result<String, String> {
    if steps == 0 || !max_ratio.is_finite() || max_ratio <= 0.0 {
        return Err("need steps > 0 and a positive max_ratio".into());
    }
    let cfg = VteConfig { kappa, activation: activation(act)?, ..VteConfig::default() };
    let points = (0..=steps)
        .map(|i| {
            let ratio = max_ratio * f64::from(i) / f64::from(steps);
            compute_gain(1.0, ratio, confidence, &cfg).map(|beta| GainPoint { ratio, beta }).map_err(|e| e.to_string())
        })
        .collect::<Result<Vec<_>, _>>()?;
    to_json(&points)
}

#[wasm_bindgen(js_name = gainCurve)]
pub fn gain_curve(confidence: f64, kappa: f64, act: &str, max_ratio: f64, steps: u32) -> Result<String, JsValue> {
    js(gain_curve_json(confidence, kappa, act, max_ratio, steps))
}

#[derive(Serialize)]
struct BoostReport {
    a_roi: f64,
    a_bg: f64,
    beta: f64,
    mask: Vec<u8>,
    norms_before: Vec<f64>,
    norms_after: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Applies the edit to a token fixture and reports per-patch norms.
pub fn boost_tokens_json(tokens: &str, confidence: f64, kappa: f64, direction: &str) -> Result<String, String> {
    let tokens: VisualTokens = serde_json::from_str(tokens).map_err(|e| e.to_string())?;
    let direction = match direction {
        "self" => Direction::SelfDirection,
        "ones" => Direction::Ones,
        other => return Err(format!("unknown direction {other:?}")),
    };
    let cfg = VteConfig { kappa, direction, ..VteConfig::default() };
    let out = vte_pipeline(&tokens, confidence, &cfg).map_err(|e| e.to_string())?;
    to_json(&BoostReport {
        a_roi: out.a_roi,
        a_bg: out.a_bg,
        beta: out.beta,
        mask: tokens.mask.clone(),
        norms_before: tokens.embeddings.iter().map(|r| norm(r)).collect(),
        norms_after: out.tokens.embeddings.iter().map(|r| norm(r)).collect(),
    })
}

#[wasm_bindgen(js_name = boostTokens)]
pub fn boost_tokens(tokens: &str, confidence: f64, kappa: f64, direction: &str) -> Result<String, JsValue> {
    js(boost_tokens_json(tokens, confidence, kappa, direction))
}

#[derive(Serialize)]
struct SoftmaxPoint {
    tau: f64,
    probs: Vec<f64>,
}

/// ROI sampling probabilities for each temperature in `tau_min..=tau_max`.
pub fn roi_curves_json(confidences: &str, tau_min: f64, tau_max: f64, steps: u32) -> Result<String, String> {
    let conf: Vec<f64> = serde_json::from_str(confidences).map_err(|e| e.to_string())?;
    if conf.is_empty() {
        return Err("no confidences".into());
    }
    if !(tau_min > 0.0 && tau_max >= tau_min && steps > 0) {
        return Err("need 0 < tau_min <= tau_max and steps > 0".into());
    }
    let rois = conf
        .iter()
        .enumerate()
        .map(|(i, &c)| RoiRegion::new([0.0, 0.0, 1.0, 1.0], c, format!("roi {i}")).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    let open = vec![true; rois.len()];
    let points: Vec<SoftmaxPoint> = (0..=steps)
        .map(|i| {
            let tau = tau_min + (tau_max - tau_min) * f64::from(i) / f64::from(steps);
            SoftmaxPoint { tau, probs: roi_probabilities(&rois, &open, tau) }
        })
        .collect();
    to_json(&points)
}

#[wasm_bindgen(js_name = roiCurves)]
pub fn roi_curves(confidences: &str, tau_min: f64, tau_max: f64, steps: u32) -> Result<String, JsValue> {
    js(roi_curves_json(confidences, tau_min, tau_max, steps))
}

#[derive(Serialize)]
struct UcbPoint {
    visits: u64,
    exploit: f64,
    explore: f64,
    ucb: f64,
}

/// UCB of a child with a fixed mean reward as its visit count grows from 1
/// to `parent_visits`.
pub fn ucb_curve_json(mean: f64, c: f64, parent_visits: u64) -> Result<String, String> {
    if parent_visits == 0 || parent_visits > 100_000 {
        return Err("parent_visits must lie in 1..=100000".into());
    }
    let points: Vec<UcbPoint> = (1..=parent_visits)
        .map(|n| {
            let value = ucb(mean * n as f64, n, parent_visits, c);
            UcbPoint { visits: n, exploit: mean, explore: value - mean, ucb: value }
        })
        .collect();
    to_json(&points)
}

#[wasm_bindgen(js_name = ucbCurve)]
pub fn ucb_curve(mean: f64, c: f64, parent_visits: u64) -> Result<String, JsValue> {
    js(ucb_curve_json(mean, c, parent_visits))
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoSearch {
    pub branch: usize,
    pub depth: usize,
    pub simulations: usize,
    pub seed: u64,
    /// Used to draw a random table when `rewards` is empty.
    pub max_score: u8,
    pub fixed: bool,
    pub exploration_c: f64,
    pub rewards: BTreeMap<String, u8>,
}

impl Default for DemoSearch {
    fn default() -> Self {
        DemoSearch {
            branch: 2,
            depth: 3,
            simulations: 20,
            seed: 0,
            max_score: 5,
            fixed: false,
            exploration_c: std::f64::consts::SQRT_2,
            rewards: BTreeMap::new(),
        }
    }
}

#[derive(Serialize)]
struct DemoNode {
    id: usize,
    parent: Option<usize>,
    depth: usize,
    guidance: String,
    reward: u8,
    visits: u64,
    mean: f64,
    pruned: bool,
    converged: bool,
}

#[derive(Serialize)]
struct DemoResult {
    path: Vec<usize>,
    total_reward: f64,
    best_possible: f64,
    evaluations: usize,
    nodes: Vec<DemoNode>,
    rewards: BTreeMap<String, u8>,
}

fn best_possible(t: &ScriptedTree, prefix: Option<&str>, branch: usize, depth: usize) -> f64 {
    if depth == 0 {
        return 0.0;
    }
    (0..branch)
        .map(|i| {
            let p = prefix.map_or_else(|| i.to_string(), |pre| format!("{pre}.{i}"));
            f64::from(t.reward(&p)) + best_possible(t, Some(&p), branch, depth - 1)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Searches a scripted reward table and returns the whole tree.
pub fn scripted_search_json(request: &str) -> Result<String, String> {
    let req: DemoSearch = serde_json::from_str(request).map_err(|e| e.to_string())?;
    if req.branch == 0 || req.branch > 4 || req.depth == 0 || req.depth > 4 || req.simulations > 500 {
        return Err("branch and depth must lie in 1..=4 and simulations in 0..=500".into());
    }
    let table = if req.rewards.is_empty() {
        ScriptedTree::random(req.seed, req.branch, req.depth, req.max_score.clamp(1, 5))
    } else {
        ScriptedTree::new(req.rewards.clone())
    };
    let config = SearchConfig {
        max_branch: req.branch,
        max_depth: req.depth,
        max_simulations: req.simulations,
        exploration_c: req.exploration_c,
        rng_seed: req.seed,
        expansion_mode: if req.fixed { ExpansionMode::Fixed } else { ExpansionMode::Adaptive },
        ..SearchConfig::default()
    };
    let query = Query::new("demo", "What does the scan show?", "", QuestionKind::Open).map_err(|e| e.to_string())?;
    let out = SearchRun::new(config)
        .run(&query, &Backends::single(Arc::new(table.clone())))
        .map_err(|e| e.to_string())?;
    let nodes = out
        .tree
        .nodes()
        .iter()
        .map(|n| DemoNode {
            id: n.node_id,
            parent: n.parent_id,
            depth: n.depth,
            guidance: n.guidance.clone(),
            reward: n.reward,
            visits: n.visit_count,
            mean: n.mean_reward(),
            pruned: n.pruned,
            converged: n.converged,
        })
        .collect();
    to_json(&DemoResult {
        path: out.path.node_ids.clone(),
        total_reward: out.path.total_reward,
        best_possible: best_possible(&table, None, req.branch, req.depth),
        evaluations: out.tree.evaluations(),
        nodes,
        rewards: table.rewards,
    })
}

#[wasm_bindgen(js_name = scriptedSearch)]
pub fn scripted_search(request: &str) -> Result<String, JsValue> {
    js(scripted_search_json(request))
}

#[cfg(test)]
mod tests {
    use serde_json::Value;

    use super::*;

    #[test]
    fn gain_curve_is_flat_then_linear() {
        let v: Value = serde_json::from_str(&gain_curve_json(0.5, 1.0, "relu", 4.0, 4).unwrap()).unwrap();
        let betas: Vec<f64> = v.as_array().unwrap().iter().map(|p| p["beta"].as_f64().unwrap()).collect();
        // 0.5 * relu(ratio - 1) at ratios 0..4
        assert_eq!(betas, vec![0.0, 0.0, 0.5, 1.0, 1.5]);
        assert!(gain_curve_json(0.5, 1.0, "tanh", 4.0, 4).is_err());
        assert!(gain_curve_json(0.5, 2.0, "relu", 4.0, 4).is_err());
    }

    #[test]
    fn boost_reports_norms() {
        let tokens = r#"{"embeddings":[[3,4],[1,0]],"mask":[1,0],"attn_logits":[1,2]}"#;
        let v: Value = serde_json::from_str(&boost_tokens_json(tokens, 1.0, 1.0, "self").unwrap()).unwrap();
        assert_eq!(v["beta"], 1.0);
        assert_eq!(v["norms_before"], serde_json::json!([5.0, 1.0]));
        assert_eq!(v["norms_after"], serde_json::json!([10.0, 1.0]));
        assert!(boost_tokens_json(tokens, 1.0, 1.0, "sideways").is_err());
    }

    #[test]
    fn roi_probabilities_sum_to_one() {
        let v: Value = serde_json::from_str(&roi_curves_json("[0.9, 0.5, 0.1]", 0.1, 2.0, 5).unwrap()).unwrap();
        for p in v.as_array().unwrap() {
            let probs: Vec<f64> = p["probs"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(probs[0] > probs[1] && probs[1] > probs[2]);
        }
        assert!(roi_curves_json("[]", 0.1, 1.0, 3).is_err());
        assert!(roi_curves_json("[0.5]", 0.0, 1.0, 3).is_err());
    }

    #[test]
    fn ucb_curve_decays_towards_the_mean() {
        let v: Value = serde_json::from_str(&ucb_curve_json(3.0, 1.0, 8).unwrap()).unwrap();
        let pts = v.as_array().unwrap();
        assert_eq!(pts.len(), 8);
        // n = 2: 3 + sqrt(2 ln 8 / 2)
        assert!((pts[1]["ucb"].as_f64().unwrap() - (3.0 + 8f64.ln().sqrt())).abs() < 1e-12);
        let last = pts[7]["explore"].as_f64().unwrap();
        assert!(last < pts[0]["explore"].as_f64().unwrap());
        assert!(ucb_curve_json(3.0, 1.0, 0).is_err());
    }

    #[test]
    fn scripted_search_reaches_the_best_path() {
        let out = scripted_search_json(r#"{"branch":2,"depth":2,"simulations":6,"max_score":4,"seed":3}"#).unwrap();
        let v: Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["total_reward"], v["best_possible"]);
        assert_eq!(v["evaluations"], 6);
        assert_eq!(v["nodes"].as_array().unwrap().len(), 7);

        let table = r#"{"branch":2,"depth":1,"simulations":2,"rewards":{"0":2,"1":4}}"#;
        let v: Value = serde_json::from_str(&scripted_search_json(table).unwrap()).unwrap();
        assert_eq!(v["path"], serde_json::json!([0, 2]));
        assert!(scripted_search_json(r#"{"branch":9}"#).is_err());
        assert!(scripted_search_json(r#"{"bogus":1}"#).is_err());
    }
}
