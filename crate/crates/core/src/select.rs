//! Inference-time expert selection.
//!
//! Each level's expert states are encoded by the frozen shared encoder and
//! clustered. A user state is served by the best (lowest-index) level whose
//! nearest centroid lies within that level's threshold, falling back to the
//! nearest level overall, and never by a level worse than the user's own
//! historical level.

use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::{kmeans, nearest, Matrix, NumError};
use crate::policy::{encode, predict_continuous, predict_discrete, HeadKind, PolicyError, PolicyParams};
use crate::rng::{derive_seed, stream};
use crate::simenv::{EnvAction, Recommender, Served, SimError, StepContext};
use crate::stratify::{LevelBoundaries, RetentionMode};

pub const BANK_FORMAT: &str = "sec-centroids/1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("level {level} has {states} states, needs at least {clusters}")]
    InsufficientStates { level: usize, states: usize, clusters: usize },
    #[error("clusters_per_level must be at least 2, got {0}")]
    TooFewClusters(usize),
    #[error("level {level} centroids coincide; threshold would be {delta}")]
    DegenerateThreshold { level: usize, delta: f64 },
    #[error("historical level {r_h} outside 1..={levels}")]
    LevelOutOfRange { r_h: usize, levels: usize },
    #[error("bank has {bank} levels but the policy has {policy}")]
    LevelCount { bank: usize, policy: usize },
    #[error("centroid dimension {bank} differs from encoder output {encoder}")]
    Dimension { bank: usize, encoder: usize },
    #[error("unsupported threshold rule {0:?}")]
    ThresholdRule(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectConfig {
    pub clusters_per_level: usize,
    /// Only `half_mean_pairwise` is implemented.
    pub threshold_rule: String,
    /// Larger levels are subsampled (seeded) before clustering.
    pub max_states_per_level: usize,
    pub seed: u64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            clusters_per_level: 32,
            threshold_rule: "half_mean_pairwise".into(),
            max_states_per_level: 4000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelCentroids {
    pub centroids: Matrix,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidBank {
    pub format: String,
    pub levels: Vec<LevelCentroids>,
    /// Score edges used to turn a user's history into a historical level.
    pub boundaries: Option<LevelBoundaries>,
}

impl CentroidBank {
    pub fn new(levels: Vec<LevelCentroids>, boundaries: Option<LevelBoundaries>) -> Self {
        Self {
            format: BANK_FORMAT.into(),
            levels,
            boundaries,
        }
    }

    pub fn k(&self) -> usize {
        self.levels.len()
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.delta).collect()
    }

    pub fn validate(&self) -> Result<(), SelectError> {
        let dim = self.levels.first().map_or(0, |l| l.centroids.cols());
        for (i, l) in self.levels.iter().enumerate() {
            if !(l.delta > 0.0) || !l.delta.is_finite() {
                return Err(SelectError::DegenerateThreshold { level: i + 1, delta: l.delta });
            }
            if l.centroids.cols() != dim {
                return Err(SelectError::Dimension {
                    bank: l.centroids.cols(),
                    encoder: dim,
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bank serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, SelectError> {
        let bank: Self = serde_json::from_str(s).map_err(|e| SelectError::Io {
            path: "<bank>".into(),
            msg: e.to_string(),
        })?;
        if bank.format != BANK_FORMAT {
            return Err(SelectError::Io {
                path: "<bank>".into(),
                msg: format!("unknown format {:?}", bank.format),
            });
        }
        bank.validate()?;
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<(), SelectError> {
        std::fs::write(path, self.to_json()).map_err(|e| SelectError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, SelectError> {
        let text = std::fs::read_to_string(path).map_err(|e| SelectError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|e| match e {
            SelectError::Io { msg, .. } => SelectError::Io {
                path: path.display().to_string(),
                msg,
            },
            other => other,
        })
    }
}

/// Half the mean Euclidean distance over unordered centroid pairs.
pub fn half_mean_pairwise(centroids: &Matrix) -> f64 {
    let c = centroids.rows();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..c {
        for j in (i + 1)..c {
            sum += crate::numcore::squared_distance(centroids.row(i), centroids.row(j)).sqrt();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        0.5 * sum / pairs as f64
    }
}

/// Clusters each level's encoded expert states and sets its threshold.
pub fn build_centroids(
    policy: &PolicyParams,
    level_states: &[&Matrix],
    cfg: &SelectConfig,
    boundaries: Option<LevelBoundaries>,
) -> Result<CentroidBank, SelectError> {
    if cfg.threshold_rule != "half_mean_pairwise" {
        return Err(SelectError::ThresholdRule(cfg.threshold_rule.clone()));
    }
    let c = cfg.clusters_per_level;
    if c < 2 {
        return Err(SelectError::TooFewClusters(c));
    }
    if level_states.len() != policy.levels() {
        return Err(SelectError::LevelCount {
            bank: level_states.len(),
            policy: policy.levels(),
        });
    }
    let mut levels = Vec::with_capacity(level_states.len());
    for (k, states) in level_states.iter().enumerate() {
        let n = states.rows();
        if n < c {
            return Err(SelectError::InsufficientStates {
                level: k + 1,
                states: n,
                clusters: c,
            });
        }
        let level_seed = derive_seed(cfg.seed, k as u64);
        let points = if n > cfg.max_states_per_level.max(c) {
            let mut idx = sample(&mut stream(level_seed, 1), n, cfg.max_states_per_level.max(c)).into_vec();
            idx.sort_unstable();
            states.gather_rows(&idx)
        } else {
            (*states).clone()
        };
        let h = encode(&policy.encoder, &points)?;
        let model = kmeans(&h, c, level_seed)?;
        let delta = half_mean_pairwise(&model.centroids);
        if !(delta > 0.0) {
            return Err(SelectError::DegenerateThreshold { level: k + 1, delta });
        }
        levels.push(LevelCentroids {
            centroids: model.centroids,
            delta,
        });
    }
    Ok(CentroidBank::new(levels, boundaries))
}

/// Audit record of one selection; all levels are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub distances: Vec<f64>,
    pub chosen_pre_cap: usize,
    pub historical_level: usize,
    pub final_level: usize,
    pub fallback_used: bool,
}

/// Selection on an already encoded state.
pub fn select_encoded(h: &[f64], bank: &CentroidBank, r_h: usize) -> Result<SelectionTrace, SelectError> {
    let k = bank.k();
    if r_h == 0 || r_h > k {
        return Err(SelectError::LevelOutOfRange { r_h, levels: k });
    }
    let mut distances = Vec::with_capacity(k);
    for l in &bank.levels {
        if l.centroids.cols() != h.len() {
            return Err(SelectError::Dimension {
                bank: l.centroids.cols(),
                encoder: h.len(),
            });
        }
        distances.push(nearest(h, &l.centroids).1.sqrt());
    }
    let qualifying = distances.iter().zip(&bank.levels).position(|(d, l)| *d <= l.delta);
    let (pre, fallback_used) = match qualifying {
        Some(i) => (i + 1, false),
        None => {
            let mut best = 0;
            for (i, d) in distances.iter().enumerate() {
                if *d < distances[best] {
                    best = i;
                }
            }
            (best + 1, true)
        }
    };
    Ok(SelectionTrace {
        distances,
        chosen_pre_cap: pre,
        historical_level: r_h,
        final_level: pre.min(r_h),
        fallback_used,
    })
}

fn check_policy(bank: &CentroidBank, policy: &PolicyParams) -> Result<(), SelectError> {
    if bank.k() != policy.levels() {
        return Err(SelectError::LevelCount {
            bank: bank.k(),
            policy: policy.levels(),
        });
    }
    Ok(())
}

fn encode_one(policy: &PolicyParams, state: &[f64]) -> Result<Matrix, SelectError> {
    let s = Matrix::new(1, state.len(), state.to_vec())?;
    Ok(encode(&policy.encoder, &s)?)
}

pub fn select_level(
    state: &[f64],
    bank: &CentroidBank,
    policy: &PolicyParams,
    r_h: usize,
) -> Result<SelectionTrace, SelectError> {
    check_policy(bank, policy)?;
    let h = encode_one(policy, state)?;
    select_encoded(h.row(0), bank, r_h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    /// Action embedding (continuous) or class probabilities (discrete).
    pub action: Vec<f64>,
    /// Most probable item for a discrete head.
    pub item: Option<usize>,
}

pub fn recommend(
    state: &[f64],
    bank: &CentroidBank,
    policy: &PolicyParams,
    r_h: usize,
) -> Result<(Recommendation, SelectionTrace), SelectError> {
    check_policy(bank, policy)?;
    let h = encode_one(policy, state)?;
    let trace = select_encoded(h.row(0), bank, r_h)?;
    let rec = predict_at(policy, &h, trace.final_level)?;
    Ok((rec, trace))
}

fn predict_at(policy: &PolicyParams, h: &Matrix, level: usize) -> Result<Recommendation, SelectError> {
    let pred = policy.predictor(level)?;
    Ok(match pred.kind {
        HeadKind::Continuous => Recommendation {
            action: predict_continuous(pred, h)?.row(0).to_vec(),
            item: None,
        },
        HeadKind::Discrete => {
            let p = predict_discrete(pred, h)?.row(0).to_vec();
            let mut best = 0;
            for (i, v) in p.iter().enumerate() {
                if *v > p[best] {
                    best = i;
                }
            }
            Recommendation { action: p, item: Some(best) }
        }
    })
}

/// Historical level from the gaps and session count observed so far. Users
/// without a usable history, or below the expert cut, get the weakest level.
pub fn historical_level(bank: &CentroidBank, return_times: &[f64], sessions: u32) -> usize {
    let Some(b) = &bank.boundaries else {
        return bank.k();
    };
    let score = match b.mode {
        RetentionMode::ReturnTime if !return_times.is_empty() => {
            -(return_times.iter().sum::<f64>() / return_times.len() as f64)
        }
        RetentionMode::ReturnTime => return bank.k(),
        RetentionMode::ActiveDays => f64::from(sessions),
    };
    b.level_for_score(score).clamp(1, bank.k())
}

/// One line of the recommendation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationRecord {
    pub user_id: String,
    pub d: Vec<f64>,
    pub pre_cap: usize,
    pub r_h: usize,
    pub k_star: usize,
    pub fallback: bool,
    pub action: Vec<f64>,
}

/// The SEC policy as a simulator recommender. With `fixed_level` set, every
/// step is served by that level and no selection happens.
#[derive(Debug, Clone)]
pub struct SecRecommender {
    pub policy: PolicyParams,
    pub bank: CentroidBank,
    pub fixed_level: Option<usize>,
    /// Records are kept until this many have been logged.
    pub log_limit: usize,
    pub log: Vec<RecommendationRecord>,
}

impl SecRecommender {
    pub fn new(policy: PolicyParams, bank: CentroidBank) -> Result<Self, SelectError> {
        check_policy(&bank, &policy)?;
        bank.validate()?;
        if let Some(l) = bank.levels.first() {
            let hidden = policy.encoder.output_dim();
            if l.centroids.cols() != hidden {
                return Err(SelectError::Dimension {
                    bank: l.centroids.cols(),
                    encoder: hidden,
                });
            }
        }
        Ok(Self {
            policy,
            bank,
            fixed_level: None,
            log_limit: 0,
            log: Vec::new(),
        })
    }

    pub fn fixed(mut self, level: usize) -> Self {
        self.fixed_level = Some(level);
        self
    }
}

impl Recommender for SecRecommender {
    fn serve(&mut self, ctx: &StepContext<'_>) -> Result<Served, SimError> {
        let err = |e: SelectError| SimError::Recommender(e.to_string());
        let h = encode_one(&self.policy, ctx.state).map_err(err)?;
        let level = match self.fixed_level {
            Some(l) => l,
            None => {
                let r_h = historical_level(&self.bank, ctx.return_times, ctx.sessions);
                let trace = select_encoded(h.row(0), &self.bank, r_h).map_err(err)?;
                let level = trace.final_level;
                if self.log.len() < self.log_limit {
                    let rec = predict_at(&self.policy, &h, level).map_err(err)?;
                    self.log.push(RecommendationRecord {
                        user_id: ctx.user_id.to_string(),
                        d: trace.distances,
                        pre_cap: trace.chosen_pre_cap,
                        r_h,
                        k_star: level,
                        fallback: trace.fallback_used,
                        action: rec.action,
                    });
                }
                level
            }
        };
        let rec = predict_at(&self.policy, &h, level).map_err(err)?;
        let action = match rec.item {
            None => EnvAction::Vector(rec.action),
            Some(_) => EnvAction::Distribution(rec.action),
        };
        Ok(Served {
            action,
            level: Some(level),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{infer, PolicyShape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bank(levels: &[(Vec<Vec<f64>>, f64)]) -> CentroidBank {
        CentroidBank::new(
            levels
                .iter()
                .map(|(c, d)| LevelCentroids {
                    centroids: Matrix::from_rows(c).unwrap(),
                    delta: *d,
                })
                .collect(),
            None,
        )
    }

    /// One centroid per level at the given distance from the origin on axis 0.
    fn distance_bank(d: &[f64], delta: &[f64]) -> CentroidBank {
        bank(&d.iter().zip(delta).map(|(x, t)| (vec![vec![*x, 0.0]], *t)).collect::<Vec<_>>())
    }

    #[test]
    fn delta_examples() {
        let two = Matrix::from_rows(&[vec![0.0, 0.0], vec![4.0, 0.0]]).unwrap();
        assert_eq!(half_mean_pairwise(&two), 2.0);
        // pairwise distances 2, 4, 6 on a line
        let three = Matrix::from_rows(&[vec![0.0], vec![2.0], vec![6.0]]).unwrap();
        assert_eq!(half_mean_pairwise(&three), 2.0);
    }

    #[test]
    fn first_qualifying_level_wins() {
        let b = distance_bank(&[0.5, 3.0, 3.0], &[1.0, 1.0, 1.0]);
        let t = select_encoded(&[0.0, 0.0], &b, 3).unwrap();
        assert_eq!(t.distances, vec![0.5, 3.0, 3.0]);
        assert_eq!((t.chosen_pre_cap, t.final_level, t.fallback_used), (1, 1, false));
    }

    #[test]
    fn fallback_ties_go_to_lowest_level_then_cap() {
        let b = distance_bank(&[5.0, 5.0, 5.0], &[1.0, 1.0, 1.0]);
        let t = select_encoded(&[0.0, 0.0], &b, 2).unwrap();
        assert_eq!((t.chosen_pre_cap, t.final_level, t.fallback_used), (1, 1, true));
    }

    #[test]
    fn cap_lowers_the_level() {
        let b = distance_bank(&[5.0, 5.0, 0.1], &[1.0, 1.0, 1.0]);
        let t = select_encoded(&[0.0, 0.0], &b, 2).unwrap();
        assert_eq!((t.chosen_pre_cap, t.final_level), (3, 2));
        assert!(matches!(select_encoded(&[0.0, 0.0], &b, 0), Err(SelectError::LevelOutOfRange { .. })));
        assert!(matches!(select_encoded(&[0.0, 0.0], &b, 4), Err(SelectError::LevelOutOfRange { .. })));
    }

    #[test]
    fn scaling_leaves_pre_cap_choice_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let levels: Vec<Matrix> = (0..3).map(|_| Matrix::from_fn(5, 3, |_, _| rng.random_range(-2.0..2.0))).collect();
        let build = |s: f64| {
            CentroidBank::new(
                levels
                    .iter()
                    .map(|c| {
                        let c = c.scale(s);
                        LevelCentroids {
                            delta: half_mean_pairwise(&c),
                            centroids: c,
                        }
                    })
                    .collect(),
                None,
            )
        };
        for _ in 0..100 {
            let h: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a = select_encoded(&h, &build(1.0), 3).unwrap();
            let hs: Vec<f64> = h.iter().map(|x| x * 3.5).collect();
            let b = select_encoded(&hs, &build(3.5), 3).unwrap();
            assert_eq!(a.chosen_pre_cap, b.chosen_pre_cap);
            assert_eq!(a.fallback_used, b.fallback_used);
        }
    }

    fn policy(levels: usize, head: HeadKind, out: usize) -> PolicyParams {
        PolicyParams::init(
            PolicyShape {
                state_dim: 4,
                hidden_dim: 6,
                output_dim: out,
                levels,
                head,
            },
            2,
        )
        .unwrap()
    }

    fn states(n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, 4, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn build_matches_brute_force_deltas() {
        let p = policy(3, HeadKind::Continuous, 2);
        let s: Vec<Matrix> = (0..3).map(|k| states(60, k)).collect();
        let refs: Vec<&Matrix> = s.iter().collect();
        let cfg = SelectConfig {
            clusters_per_level: 5,
            ..SelectConfig::default()
        };
        let bank = build_centroids(&p, &refs, &cfg, None).unwrap();
        for l in &bank.levels {
            let c = &l.centroids;
            let mut all = Vec::new();
            for i in 0..c.rows() {
                for j in 0..c.rows() {
                    if i < j {
                        let d: f64 = c.row(i).iter().zip(c.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                        all.push(d.sqrt());
                    }
                }
            }
            let oracle = 0.5 * all.iter().sum::<f64>() / all.len() as f64;
            assert!((l.delta - oracle).abs() < 1e-9);
            assert_eq!(c.cols(), 6);
        }
        assert_eq!(build_centroids(&p, &refs, &cfg, None).unwrap(), bank);
    }

    #[test]
    fn build_rejects_bad_inputs() {
        let p = policy(2, HeadKind::Continuous, 2);
        let s = [states(3, 1), states(30, 2)];
        let refs: Vec<&Matrix> = s.iter().collect();
        let cfg = SelectConfig {
            clusters_per_level: 4,
            ..SelectConfig::default()
        };
        assert_eq!(
            build_centroids(&p, &refs, &cfg, None).unwrap_err(),
            SelectError::InsufficientStates {
                level: 1,
                states: 3,
                clusters: 4
            }
        );
        let one = SelectConfig {
            clusters_per_level: 1,
            ..SelectConfig::default()
        };
        assert_eq!(build_centroids(&p, &refs, &one, None).unwrap_err(), SelectError::TooFewClusters(1));
        assert!(matches!(build_centroids(&p, &refs[..1], &cfg, None), Err(SelectError::LevelCount { .. })));
    }

    #[test]
    fn single_level_recommendation_is_plain_inference() {
        let p = policy(1, HeadKind::Continuous, 3);
        let s = states(40, 3);
        let bank = build_centroids(&p, &[&s], &SelectConfig { clusters_per_level: 4, ..SelectConfig::default() }, None).unwrap();
        for i in 0..10 {
            let (rec, trace) = recommend(s.row(i), &bank, &p, 1).unwrap();
            assert_eq!(trace.final_level, 1);
            let direct = infer(&p, &s.gather_rows(&[i]), 1).unwrap();
            assert_eq!(rec.action, direct.row(0));
        }
    }

    #[test]
    fn discrete_recommendation_reports_argmax() {
        let p = policy(2, HeadKind::Discrete, 5);
        let s = [states(20, 1), states(20, 2)];
        let refs: Vec<&Matrix> = s.iter().collect();
        let bank = build_centroids(&p, &refs, &SelectConfig { clusters_per_level: 3, ..SelectConfig::default() }, None).unwrap();
        let (rec, _) = recommend(s[0].row(0), &bank, &p, 2).unwrap();
        let item = rec.item.unwrap();
        assert!(rec.action.iter().all(|&v| v <= rec.action[item]));
        assert!((rec.action.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn state_at_a_level_two_centroid() {
        let p = policy(2, HeadKind::Continuous, 2);
        let s = [states(30, 5), states(30, 6)];
        let refs: Vec<&Matrix> = s.iter().collect();
        let mut bank = build_centroids(&p, &refs, &SelectConfig { clusters_per_level: 3, ..SelectConfig::default() }, None).unwrap();
        // move level 1 far away so it cannot qualify
        bank.levels[0].centroids = bank.levels[0].centroids.scale(0.0).add(&Matrix::from_fn(3, 6, |_, _| 100.0)).unwrap();
        let h = encode(&p.encoder, &s[1].gather_rows(&[0])).unwrap();
        bank.levels[1].centroids.row_mut(0).copy_from_slice(h.row(0));
        let t = select_level(s[1].row(0), &bank, &p, 2).unwrap();
        assert_eq!(t.final_level, 2);
        assert_eq!(t.distances[1], 0.0);
    }

    #[test]
    fn bank_json_round_trip() {
        let b = distance_bank(&[1.0, 2.0], &[0.5, 0.25]);
        assert_eq!(CentroidBank::from_json(&b.to_json()).unwrap(), b);
        let mut bad = b.clone();
        bad.levels[0].delta = 0.0;
        assert!(CentroidBank::from_json(&bad.to_json()).is_err());
    }

    #[test]
    fn historical_level_follows_boundaries() {
        let mut b = distance_bank(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]);
        assert_eq!(historical_level(&b, &[1.0], 2), 3);
        b.boundaries = Some(LevelBoundaries {
            mode: RetentionMode::ReturnTime,
            levels: 3,
            edges: vec![-1.5, -2.5],
            expert_cut: Some(-3.0),
        });
        assert_eq!(historical_level(&b, &[], 1), 3);
        assert_eq!(historical_level(&b, &[1.0, 2.0], 3), 1);
        assert_eq!(historical_level(&b, &[2.0], 2), 2);
        assert_eq!(historical_level(&b, &[2.8], 2), 3);
        assert_eq!(historical_level(&b, &[7.0], 2), 3);
    }
}
