//! Synthetic retention environment.
//!
//! Users carry a latent unit preference and an archetype. Each archetype owns
//! a ground-truth logging policy; better archetypes align more closely with
//! the preference and explore less. Sessions produce click, long-view and like
//! feedback, a leave module ends them, and a return module draws the gap in
//! days until the next visit from the session's mean satisfaction. Novel
//! action directions within a session raise satisfaction, so diversity
//! shortens return gaps as long as it does not cost too much alignment.

mod env;
mod population;
mod rollout;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::HeadKind;

pub use env::{click_probability, logistic, return_gap, Env, EnvAction, StepOutcome, UserState};
pub use population::{gen_population, Archetype, Population, UserProfile, World, ALIGNMENT_SAMPLES};
pub use rollout::{
    evaluate, generate_dataset, EvalReport, ExpertRecommender, MetricCi, Proposal, RandomRecommender, Recommender,
    Served, StepContext, UserMetrics, EVAL_CSV_HEADER,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error("user {0} has no active session")]
    Inactive(usize),
    #[error("user {0} is already in a session")]
    AlreadyActive(usize),
    #[error("user {0} has reached the horizon")]
    Finished(usize),
    #[error("no user with index {0}")]
    UnknownUser(usize),
    #[error("action dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("action is not finite")]
    NonFiniteAction,
    #[error("item {item} out of range for {items} items")]
    ItemOutOfRange { item: usize, items: usize },
    #[error("{0}")]
    Recommender(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeedbackCalibration {
    pub click_gain: f64,
    pub click_bias: f64,
    pub long_view_gain: f64,
    pub long_view_bias: f64,
    pub like_gain: f64,
    pub like_bias: f64,
}

impl Default for FeedbackCalibration {
    fn default() -> Self {
        Self {
            click_gain: 3.0,
            click_bias: 0.0,
            long_view_gain: 3.0,
            long_view_bias: -1.0,
            like_gain: 3.0,
            like_bias: -2.0,
        }
    }
}

/// Weights of the per-step satisfaction gain, normalized by their sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SatisfactionWeights {
    pub click: f64,
    pub long_view: f64,
    pub like: f64,
    pub novelty: f64,
}

impl Default for SatisfactionWeights {
    fn default() -> Self {
        Self {
            click: 1.0,
            long_view: 1.0,
            like: 1.0,
            novelty: 1.5,
        }
    }
}

impl SatisfactionWeights {
    fn total(&self) -> f64 {
        self.click + self.long_view + self.like + self.novelty
    }
}

/// `p_leave = base + length · t/L + stall · max(0, stall_ref − gain)`, clamped to [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LeaveConfig {
    pub base: f64,
    pub length: f64,
    pub stall: f64,
    pub stall_ref: f64,
}

impl Default for LeaveConfig {
    fn default() -> Self {
        Self {
            base: 0.02,
            length: 0.25,
            stall: 0.5,
            stall_ref: 0.35,
        }
    }
}

/// Mean gap `floor + (ceil − floor)(1 − e)` with engagement
/// `e = clamp(0.5 + gain · (s̄ − center) + loyalty, 0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReturnConfig {
    pub floor: f64,
    pub ceil: f64,
    pub center: f64,
    pub gain: f64,
}

impl Default for ReturnConfig {
    fn default() -> Self {
        Self {
            floor: 1.0,
            ceil: 8.0,
            center: 0.5,
            gain: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_users: usize,
    pub state_dim: usize,
    pub action_kind: HeadKind,
    /// Embedding dimension of preferences, continuous actions and catalog items.
    pub action_dim: usize,
    /// Catalog size for the discrete action space.
    pub n_items: usize,
    pub k_true: usize,
    pub session_len_max: usize,
    /// Standard deviation of the additive noise on `action · preference`.
    pub noise_scale: f64,
    /// Standard deviation of the noise on the preference part of the state.
    pub obs_noise: f64,
    pub horizon_days: u32,
    pub seed: u64,
    /// Preferences concentrate near a random subspace of this rank.
    pub preference_rank: usize,
    pub preference_spread: f64,
    /// Angle between the logging direction and the preference, best to worst archetype.
    pub angle_best_deg: f64,
    pub angle_worst_deg: f64,
    /// Weight of the context-driven exploration term, best to worst archetype.
    pub explore_best: f64,
    pub explore_worst: f64,
    /// Softmax temperature of the discrete logging policies, best to worst archetype.
    pub temperature_best: f64,
    pub temperature_worst: f64,
    pub loyalty_sd: f64,
    pub feedback: FeedbackCalibration,
    pub satisfaction: SatisfactionWeights,
    pub leave: LeaveConfig,
    pub return_gap: ReturnConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_users: 2000,
            state_dim: 16,
            action_kind: HeadKind::Continuous,
            action_dim: 8,
            n_items: 32,
            k_true: 3,
            session_len_max: 8,
            noise_scale: 0.3,
            obs_noise: 0.05,
            horizon_days: 14,
            seed: 0,
            preference_rank: 3,
            preference_spread: 0.25,
            angle_best_deg: 10.0,
            angle_worst_deg: 55.0,
            explore_best: 0.1,
            explore_worst: 0.6,
            temperature_best: 0.15,
            temperature_worst: 0.5,
            loyalty_sd: 0.05,
            feedback: FeedbackCalibration::default(),
            satisfaction: SatisfactionWeights::default(),
            leave: LeaveConfig::default(),
            return_gap: ReturnConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        for (name, v) in [
            ("n_users", self.n_users),
            ("action_dim", self.action_dim),
            ("k_true", self.k_true),
            ("session_len_max", self.session_len_max),
            ("preference_rank", self.preference_rank),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.horizon_days == 0 {
            return bad("horizon_days must be >= 1".into());
        }
        if self.state_dim <= self.action_dim {
            return bad(format!(
                "state_dim {} must exceed action_dim {} to leave room for context features",
                self.state_dim, self.action_dim
            ));
        }
        if self.preference_rank > self.action_dim {
            return bad("preference_rank cannot exceed action_dim".into());
        }
        if self.action_kind == HeadKind::Discrete && self.n_items < 2 {
            return bad("n_items must be >= 2 for discrete actions".into());
        }
        let reals = [
            ("noise_scale", self.noise_scale),
            ("obs_noise", self.obs_noise),
            ("preference_spread", self.preference_spread),
            ("explore_best", self.explore_best),
            ("explore_worst", self.explore_worst),
            ("loyalty_sd", self.loyalty_sd),
            ("satisfaction.click", self.satisfaction.click),
            ("satisfaction.long_view", self.satisfaction.long_view),
            ("satisfaction.like", self.satisfaction.like),
            ("satisfaction.novelty", self.satisfaction.novelty),
            ("leave.base", self.leave.base),
            ("leave.length", self.leave.length),
            ("leave.stall", self.leave.stall),
            ("return_gap.gain", self.return_gap.gain),
        ];
        for (name, v) in reals {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        for (name, v) in [
            ("angle_best_deg", self.angle_best_deg),
            ("angle_worst_deg", self.angle_worst_deg),
            ("leave.stall_ref", self.leave.stall_ref),
            ("return_gap.center", self.return_gap.center),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        if !(self.temperature_best > 0.0 && self.temperature_worst > 0.0) {
            return bad("temperatures must be > 0".into());
        }
        if self.satisfaction.total() <= 0.0 {
            return bad("satisfaction weights must not all be zero".into());
        }
        let r = &self.return_gap;
        if !(r.floor >= 1.0 && r.ceil >= r.floor && r.ceil.is_finite()) {
            return bad("return gap needs 1 <= floor <= ceil".into());
        }
        Ok(())
    }

    /// Interpolation weight of archetype `g`: 0 for the best, 1 for the worst.
    fn archetype_t(&self, g: usize) -> f64 {
        if self.k_true <= 1 {
            0.0
        } else {
            g as f64 / (self.k_true - 1) as f64
        }
    }
}
