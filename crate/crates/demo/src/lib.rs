//! Browser demo. Every export takes plain numbers and returns a JSON string.

use rand::Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use sec_core::numcore::{svd, Matrix};
use sec_core::policy::{infer, HeadKind};
use sec_core::rng::stream;
use sec_core::select::{half_mean_pairwise, select_encoded, CentroidBank, LevelCentroids};
use sec_core::simenv::{generate_dataset, return_gap, Env, ReturnConfig, SimConfig};
use sec_core::stratify::{build_leveled, RetentionMode};
use sec_core::train::{action_diversity, fit, TrainConfig};

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("demo types serialize")
}

/// A three-level bank in the plane. Level `k` has four centroids scattered
/// around its own anchor; `spread` widens the clusters.
pub fn demo_bank(seed: u64, spread: f64) -> CentroidBank {
    let anchors = [(-0.5, 0.4), (0.5, 0.4), (0.0, -0.5)];
    let mut rng = stream(seed, 0);
    let levels = anchors
        .iter()
        .map(|&(ax, ay)| {
            let centroids = Matrix::from_fn(4, 2, |_, j| {
                let a = if j == 0 { ax } else { ay };
                a + spread * rng.random_range(-1.0..1.0)
            });
            let delta = half_mean_pairwise(&centroids);
            LevelCentroids { centroids, delta }
        })
        .collect();
    CentroidBank::new(levels, None)
}

#[derive(Serialize)]
struct BankView {
    levels: Vec<LevelView>,
}

#[derive(Serialize)]
struct LevelView {
    centroids: Vec<[f64; 2]>,
    delta: f64,
}

pub fn bank_json(seed: u64, spread: f64) -> String {
    let bank = demo_bank(seed, spread);
    to_json(&BankView {
        levels: bank
            .levels
            .iter()
            .map(|l| LevelView {
                centroids: (0..l.centroids.rows()).map(|i| [l.centroids.get(i, 0), l.centroids.get(i, 1)]).collect(),
                delta: l.delta,
            })
            .collect(),
    })
}

pub fn select_json(seed: u64, spread: f64, x: f64, y: f64, r_h: usize) -> Result<String, String> {
    let bank = demo_bank(seed, spread);
    select_encoded(&[x, y], &bank, r_h).map(|t| to_json(&t)).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct DiversityView {
    lambda: f64,
    diversity: f64,
    singular_values: Vec<f64>,
    bc_loss: f64,
    pairs: usize,
}

/// Trains a one-level policy on a small simulated log and reports how spread
/// out its actions are.
pub fn diversity_json(lambda: f64, seed: u64, epochs: usize) -> Result<String, String> {
    let sim = SimConfig {
        n_users: 120,
        seed,
        ..SimConfig::default()
    };
    let (_, ts) = generate_dataset(&sim).map_err(|e| e.to_string())?;
    let ds = build_leveled(&ts, RetentionMode::ReturnTime, f64::INFINITY, 1).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        lambda,
        epochs,
        learning_rate: 1e-3,
        hidden_dim: 16,
        probe_pairs: 128,
        seed,
        action_kind: HeadKind::Continuous,
        ..TrainConfig::default()
    };
    let (policy, log) = fit(&ds, &cfg).map_err(|e| e.to_string())?;
    let level = &ds.levels[0];
    let n = level.len().min(cfg.probe_pairs);
    let idx: Vec<usize> = (0..n).collect();
    let actions = infer(&policy, &level.states.gather_rows(&idx), 1).map_err(|e| e.to_string())?;
    let singular_values = svd(&actions).map_err(|e| e.to_string())?.singular_values;
    Ok(to_json(&DiversityView {
        lambda,
        diversity: action_diversity(&policy, &ds, &cfg).map_err(|e| e.to_string())?,
        singular_values,
        bc_loss: log.final_epoch().levels[0].bc_loss,
        pairs: level.len(),
    }))
}

#[derive(Serialize)]
struct CurvePoint {
    satisfaction: f64,
    mean_gap: f64,
    sampled_mean: f64,
}

/// Expected and sampled return gap across mean session satisfaction.
pub fn return_curve_json(gain: f64, center: f64, loyalty: f64, samples: usize) -> Result<String, String> {
    let cfg = SimConfig {
        return_gap: ReturnConfig {
            gain,
            center,
            ..ReturnConfig::default()
        },
        ..SimConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let points: Vec<CurvePoint> = (0..=20)
        .map(|i| {
            let s = i as f64 / 20.0;
            let mu = Env::mean_gap(&cfg, s, loyalty);
            let mut rng = stream(1, 0);
            let n = samples.max(1);
            let sampled = (0..n).map(|_| return_gap(mu, rng.random())).sum::<f64>() / n as f64;
            CurvePoint {
                satisfaction: s,
                mean_gap: mu,
                sampled_mean: sampled,
            }
        })
        .collect();
    Ok(to_json(&points))
}

#[wasm_bindgen]
pub fn bank(seed: u32, spread: f64) -> String {
    bank_json(u64::from(seed), spread)
}

#[wasm_bindgen]
pub fn select(seed: u32, spread: f64, x: f64, y: f64, r_h: u32) -> Result<String, JsValue> {
    select_json(u64::from(seed), spread, x, y, r_h as usize).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn diversity(lambda: f64, seed: u32, epochs: u32) -> Result<String, JsValue> {
    diversity_json(lambda, u64::from(seed), epochs as usize).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn return_curve(gain: f64, center: f64, loyalty: f64, samples: u32) -> Result<String, JsValue> {
    return_curve_json(gain, center, loyalty, samples as usize).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn selection_at_a_centroid_picks_its_level() {
        let bank = demo_bank(3, 0.15);
        let c = bank.levels[1].centroids.row(2).to_vec();
        let t: Value = serde_json::from_str(&select_json(3, 0.15, c[0], c[1], 3).unwrap()).unwrap();
        assert!(t["chosen_pre_cap"].as_u64().unwrap() <= 2);
        assert_eq!(t["distances"][1], 0.0);
        let capped: Value = serde_json::from_str(&select_json(3, 0.15, c[0], c[1], 1).unwrap()).unwrap();
        assert_eq!(capped["final_level"], 1);
        assert!(select_json(3, 0.15, 0.0, 0.0, 0).is_err());
    }

    #[test]
    fn bank_view_has_three_levels() {
        let v: Value = serde_json::from_str(&bank_json(1, 0.2)).unwrap();
        assert_eq!(v["levels"].as_array().unwrap().len(), 3);
        assert_eq!(v["levels"][0]["centroids"].as_array().unwrap().len(), 4);
    }

    #[test]
    fn regularized_policy_is_more_diverse() {
        let read = |l: f64| -> Value { serde_json::from_str(&diversity_json(l, 2, 4).unwrap()).unwrap() };
        let (plain, reg) = (read(0.0), read(0.1));
        assert!(reg["diversity"].as_f64().unwrap() > plain["diversity"].as_f64().unwrap());
        assert_eq!(reg["singular_values"].as_array().unwrap().len(), 8);
    }

    #[test]
    fn return_curve_falls_with_satisfaction() {
        let v: Value = serde_json::from_str(&return_curve_json(3.0, 0.5, 0.0, 2000).unwrap()).unwrap();
        let pts = v.as_array().unwrap();
        assert_eq!(pts.len(), 21);
        for w in pts.windows(2) {
            assert!(w[1]["mean_gap"].as_f64() <= w[0]["mean_gap"].as_f64());
            assert!(w[1]["sampled_mean"].as_f64() <= w[0]["sampled_mean"].as_f64());
        }
        assert!(return_curve_json(3.0, 0.5, 0.0, 10).is_ok());
    }
}
