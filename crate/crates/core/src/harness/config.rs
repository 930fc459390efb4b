use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::policy::HeadKind;
use crate::rng::derive_seed;
use crate::select::SelectConfig;
use crate::simenv::SimConfig;
use crate::stratify::RetentionMode;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StratConfig {
    pub mode: RetentionMode,
    /// Days of mean return time (at most) or active days (at least).
    pub expert_threshold: f64,
    pub k_levels: usize,
}

impl Default for StratConfig {
    fn default() -> Self {
        Self {
            mode: RetentionMode::ReturnTime,
            expert_threshold: 3.0,
            k_levels: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_users: usize,
    pub seed: u64,
    /// Lines written to `recommendations.jsonl` by `evaluate`.
    pub log_limit: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_users: 2000,
            seed: 0,
            log_limit: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub n_seeds: usize,
    pub lambda_grid: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            n_seeds: 5,
            lambda_grid: vec![0.0, 0.001, 0.01, 0.1, 1.0],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub trajectories: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub centroids: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Any of `csv`, `json`.
    pub formats: Vec<String>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            formats: vec!["csv".into(), "json".into()],
        }
    }
}

impl ReportConfig {
    pub fn wants(&self, format: &str) -> bool {
        self.formats.iter().any(|f| f == format)
    }
}

/// Everything one run depends on. Section seeds are derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub strat: StratConfig,
    pub select: SelectConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub paths: PathsConfig,
    pub report: ReportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            sim: SimConfig::default(),
            train: TrainConfig {
                learning_rate: 1e-3,
                epochs: 20,
                ..TrainConfig::default()
            },
            strat: StratConfig::default(),
            select: SelectConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
            paths: PathsConfig::default(),
            report: ReportConfig::default(),
        }
        .seeded(1)
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        let cfg = cfg.clone().seeded(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Sets the master seed and every section seed derived from it.
    pub fn seeded(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.sim.seed = derive_seed(seed, 1);
        self.train.seed = derive_seed(seed, 2);
        self.select.seed = derive_seed(seed, 3);
        self.eval.seed = derive_seed(seed, 4);
        self
    }

    /// Master seeds of the paired ablation and sweep runs.
    pub fn run_seeds(&self) -> Vec<u64> {
        (0..self.ablation.n_seeds as u64).map(|i| derive_seed(self.seed, 100 + i)).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.sim.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.train.action_kind != self.sim.action_kind {
            return bad("train.action_kind must match sim.action_kind".into());
        }
        if self.sim.action_kind == HeadKind::Discrete && self.train.n_classes != self.sim.n_items {
            return bad(format!(
                "train.n_classes ({}) must equal sim.n_items ({})",
                self.train.n_classes, self.sim.n_items
            ));
        }
        if self.strat.k_levels == 0 {
            return bad("strat.k_levels must be >= 1".into());
        }
        if !self.strat.expert_threshold.is_finite() {
            return bad("strat.expert_threshold must be finite".into());
        }
        if self.select.clusters_per_level < 2 {
            return bad("select.clusters_per_level must be >= 2".into());
        }
        if self.select.threshold_rule != "half_mean_pairwise" {
            return bad(format!("unknown select.threshold_rule {:?}", self.select.threshold_rule));
        }
        if self.eval.n_users == 0 {
            return bad("eval.n_users must be >= 1".into());
        }
        if self.ablation.n_seeds == 0 {
            return bad("ablation.n_seeds must be >= 1".into());
        }
        if self.ablation.lambda_grid.is_empty() || self.ablation.lambda_grid.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return bad("ablation.lambda_grid must hold finite values >= 0".into());
        }
        for f in &self.report.formats {
            if f != "csv" && f != "json" {
                return bad(format!("unknown report format {f:?}"));
            }
        }
        Ok(())
    }
}
