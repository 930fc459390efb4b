use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, HarnessError};
use crate::numcore::Matrix;
use crate::policy::PolicyParams;
use crate::select::{build_centroids, CentroidBank, RecommendationRecord, SecRecommender};
use crate::simenv::{evaluate, EvalReport};
use crate::stratify::{build_leveled, LeveledDataset, Trajectory};
use crate::train::{action_diversity, fit_with, TrainLog};

pub fn leveled_dataset(cfg: &ExperimentConfig, ts: &[Trajectory]) -> Result<LeveledDataset, HarnessError> {
    Ok(build_leveled(
        ts,
        cfg.strat.mode,
        cfg.strat.expert_threshold,
        cfg.strat.k_levels,
    )?)
}

pub fn train_policy(
    cfg: &ExperimentConfig,
    ds: &LeveledDataset,
    observe: impl FnMut(usize, &PolicyParams),
) -> Result<(PolicyParams, TrainLog), HarnessError> {
    Ok(fit_with(ds, &cfg.train, observe)?)
}

pub fn build_bank(cfg: &ExperimentConfig, policy: &PolicyParams, ds: &LeveledDataset) -> Result<CentroidBank, HarnessError> {
    let states: Vec<&Matrix> = ds.levels.iter().map(|l| &l.states).collect();
    Ok(build_centroids(policy, &states, &cfg.select, Some(ds.boundaries.clone()))?)
}

/// Evaluates the adaptive recommender (`fixed = None`) or a single level.
pub fn evaluate_policy(
    cfg: &ExperimentConfig,
    policy: &PolicyParams,
    bank: &CentroidBank,
    fixed: Option<usize>,
    log_limit: usize,
) -> Result<(EvalReport, Vec<RecommendationRecord>), HarnessError> {
    let mut rec = SecRecommender::new(policy.clone(), bank.clone())?;
    rec.fixed_level = fixed;
    rec.log_limit = log_limit;
    let report = evaluate(&cfg.sim, &mut rec, cfg.eval.n_users, cfg.eval.seed)?;
    Ok((report, rec.log))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// All experts in a single level.
    NoMultilevel,
    /// No action-entropy regularization.
    NoAer,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoMultilevel, Variant::NoAer];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMultilevel => "no_multilevel",
            Variant::NoAer => "no_aer",
        }
    }

    /// The config with exactly this variant's knob changed.
    pub fn apply(self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::NoMultilevel => c.strat.k_levels = 1,
            Variant::NoAer => c.train.lambda = 0.0,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub k_levels: usize,
    pub lambda: f64,
    pub report: EvalReport,
    /// Mean action diversity of the trained policy on its training probes.
    pub diversity: f64,
}

/// Stratify, train, cluster and evaluate the adaptive recommender.
pub fn run_variant(cfg: &ExperimentConfig, ts: &[Trajectory]) -> Result<VariantResult, HarnessError> {
    let ds = leveled_dataset(cfg, ts)?;
    let (policy, _) = train_policy(cfg, &ds, |_, _| {})?;
    let bank = build_bank(cfg, &policy, &ds)?;
    let (mut report, _) = evaluate_policy(cfg, &policy, &bank, None, 0)?;
    report.per_user.clear();
    Ok(VariantResult {
        k_levels: cfg.strat.k_levels,
        lambda: cfg.train.lambda,
        report,
        diversity: action_diversity(&policy, &ds, &cfg.train)?,
    })
}
