use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::env::{Env, EnvAction};
use super::population::{gen_population, normal, normalize, Population, UserRng, World};
use super::{SimConfig, SimError};
use crate::policy::HeadKind;
use crate::rng::{derive_seed, stream};
use crate::stratify::{Action, Step, Trajectory};

/// What a recommender sees before each step.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub user_id: &'a str,
    pub state: &'a [f64],
    /// Gaps between this user's sessions so far in the rollout.
    pub return_times: &'a [f64],
    pub sessions: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Served {
    pub action: EnvAction,
    /// Policy level that produced the action, if the recommender has levels.
    pub level: Option<usize>,
}

pub type Proposal = EnvAction;

pub trait Recommender {
    fn serve(&mut self, ctx: &StepContext<'_>) -> Result<Served, SimError>;
}

/// The ground-truth logging policy of one archetype, applied to every user.
#[derive(Debug, Clone)]
pub struct ExpertRecommender {
    world: World,
    archetype: usize,
    kind: HeadKind,
}

impl ExpertRecommender {
    pub fn new(cfg: &SimConfig, archetype: usize) -> Result<Self, SimError> {
        if archetype >= cfg.k_true {
            return Err(SimError::InvalidConfig(format!(
                "archetype {archetype} out of range for {} archetypes",
                cfg.k_true
            )));
        }
        Ok(Self {
            world: World::new(cfg)?,
            archetype,
            kind: cfg.action_kind,
        })
    }
}

impl Recommender for ExpertRecommender {
    fn serve(&mut self, ctx: &StepContext<'_>) -> Result<Served, SimError> {
        let action = match self.kind {
            HeadKind::Continuous => EnvAction::Vector(self.world.expert_vector(self.archetype, ctx.state)),
            HeadKind::Discrete => EnvAction::Distribution(self.world.expert_distribution(self.archetype, ctx.state)),
        };
        Ok(Served { action, level: None })
    }
}

/// Uniform random unit vectors, or uniform catalog items.
#[derive(Debug, Clone)]
pub struct RandomRecommender {
    rng: UserRng,
    dim: usize,
    items: usize,
    kind: HeadKind,
}

impl RandomRecommender {
    pub fn new(cfg: &SimConfig, seed: u64) -> Self {
        Self {
            rng: stream(seed, 0),
            dim: cfg.action_dim,
            items: cfg.n_items,
            kind: cfg.action_kind,
        }
    }
}

impl Recommender for RandomRecommender {
    fn serve(&mut self, _ctx: &StepContext<'_>) -> Result<Served, SimError> {
        let action = match self.kind {
            HeadKind::Continuous => loop {
                let mut v: Vec<f64> = (0..self.dim).map(|_| normal(&mut self.rng)).collect();
                if normalize(&mut v) > 1e-12 {
                    break EnvAction::Vector(v);
                }
            },
            HeadKind::Discrete => EnvAction::Item(self.rng.random_range(0..self.items)),
        };
        Ok(Served { action, level: None })
    }
}

#[derive(Debug, Default)]
struct UserTally {
    steps: usize,
    clicks: usize,
    long_views: usize,
    likes: usize,
    novelty: f64,
}

/// Runs one user from day 0 to the horizon.
fn roll_user(
    env: &mut Env,
    u: usize,
    serve: &mut dyn FnMut(&StepContext<'_>) -> Result<Served, SimError>,
    mut record: impl FnMut(&[f64], &Served, &super::StepOutcome),
) -> Result<UserTally, SimError> {
    let mut tally = UserTally::default();
    while !env.user(u)?.is_finished() {
        env.begin_session(u)?;
        loop {
            let us = env.user(u)?;
            let state = env.state(u)?.to_vec();
            let served = serve(&StepContext {
                user_id: &us.profile.user_id,
                state: &state,
                return_times: &us.return_times,
                sessions: us.sessions,
            })?;
            let out = env.step(u, served.action.clone())?;
            tally.steps += 1;
            tally.clicks += usize::from(out.click);
            tally.long_views += usize::from(out.long_view);
            tally.likes += usize::from(out.like);
            tally.novelty += out.novelty;
            record(&state, &served, &out);
            if out.leave {
                break;
            }
        }
        env.end_of_session(u)?;
    }
    Ok(tally)
}

fn bit(x: bool) -> f64 {
    if x {
        1.0
    } else {
        0.0
    }
}

/// Rolls every generated user under their own archetype's logging policy.
pub fn generate_dataset(cfg: &SimConfig) -> Result<(Population, Vec<Trajectory>), SimError> {
    let pop = gen_population(cfg)?;
    let mut env = Env::new(cfg, pop.world.clone(), pop.users.clone())?;
    let mut out = Vec::with_capacity(pop.users.len());
    for (u, profile) in pop.users.iter().enumerate() {
        let mut expert = ExpertRecommender {
            world: pop.world.clone(),
            archetype: profile.archetype,
            kind: cfg.action_kind,
        };
        let mut steps = Vec::new();
        roll_user(&mut env, u, &mut |ctx| expert.serve(ctx), |state, served, o| {
            let action = match (&served.action, o.item) {
                (_, Some(i)) => Action::Discrete(i),
                (EnvAction::Vector(v), None) => Action::Continuous(v.clone()),
                _ => unreachable!("catalog actions always report their item"),
            };
            let signals = BTreeMap::from([
                ("click".to_string(), bit(o.click)),
                ("long_view".to_string(), bit(o.long_view)),
                ("like".to_string(), bit(o.like)),
                ("novelty".to_string(), o.novelty),
                ("satisfaction".to_string(), o.gain),
            ]);
            steps.push(Step {
                state: state.to_vec(),
                action,
                signals,
            });
        })?;
        let us = env.user(u)?;
        out.push(Trajectory {
            user_id: profile.user_id.clone(),
            steps,
            return_times: us.return_times.clone(),
            active_days: us.sessions,
        });
    }
    Ok((pop, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricCi {
    pub mean: f64,
    /// Half-width of the normal-approximation 95% interval.
    pub ci95: f64,
}

impl MetricCi {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: 0.0, ci95: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Self { mean, ci95: 0.0 };
        }
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        Self {
            mean,
            ci95: 1.96 * (var / n as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user_id: String,
    pub archetype: usize,
    pub return_time: f64,
    pub click_rate: f64,
    pub long_view_rate: f64,
    pub like_rate: f64,
    pub novelty: f64,
    pub sessions: u32,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub users: usize,
    /// Mean days between sessions; lower is better.
    pub return_time: MetricCi,
    pub click_rate: MetricCi,
    pub long_view_rate: MetricCi,
    pub like_rate: MetricCi,
    /// Mean within-session novelty of the shown actions.
    pub novelty: MetricCi,
    /// Steps served by each policy level, level 1 first.
    pub level_usage: Vec<u64>,
    pub per_user: Vec<UserMetrics>,
}

pub const EVAL_CSV_HEADER: &str = "label,users,return_time,return_time_ci95,click_rate,click_rate_ci95,long_view_rate,long_view_rate_ci95,like_rate,like_rate_ci95,novelty,level_usage";

impl EvalReport {
    pub fn csv_header() -> &'static str {
        EVAL_CSV_HEADER
    }

    pub fn csv_row(&self, label: &str) -> String {
        let usage: Vec<String> = self.level_usage.iter().map(u64::to_string).collect();
        format!(
            "{label},{},{},{},{},{},{},{},{},{},{},{}",
            self.users,
            self.return_time.mean,
            self.return_time.ci95,
            self.click_rate.mean,
            self.click_rate.ci95,
            self.long_view_rate.mean,
            self.long_view_rate.ci95,
            self.like_rate.mean,
            self.like_rate.ci95,
            self.novelty.mean,
            usage.join(";")
        )
    }

    pub fn per_user_csv(&self) -> String {
        let mut s = String::from("user_id,archetype,return_time,click_rate,long_view_rate,like_rate,novelty,sessions,steps\n");
        for u in &self.per_user {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                u.user_id,
                u.archetype,
                u.return_time,
                u.click_rate,
                u.long_view_rate,
                u.like_rate,
                u.novelty,
                u.sessions,
                u.steps
            ));
        }
        s
    }
}

const EVAL_STREAM: u64 = 0x4556_414c;

/// Rolls `n_users` fresh users, drawn from the world of `cfg` with their own
/// seed, through the recommender and aggregates per-user metrics.
pub fn evaluate(cfg: &SimConfig, rec: &mut dyn Recommender, n_users: usize, seed: u64) -> Result<EvalReport, SimError> {
    if n_users == 0 {
        return Err(SimError::InvalidConfig("evaluation needs at least one user".into()));
    }
    let world = World::new(cfg)?;
    let users = world.sample_users(cfg, n_users, derive_seed(seed, EVAL_STREAM), "e");
    let mut env = Env::new(cfg, world, users.clone())?;
    let mut level_usage: Vec<u64> = Vec::new();
    let mut per_user = Vec::with_capacity(n_users);
    for (u, profile) in users.iter().enumerate() {
        let tally = roll_user(&mut env, u, &mut |ctx| rec.serve(ctx), |_, served, _| {
            if let Some(l) = served.level {
                if level_usage.len() < l {
                    level_usage.resize(l, 0);
                }
                level_usage[l - 1] += 1;
            }
        })?;
        let us = env.user(u)?;
        let steps = tally.steps.max(1) as f64;
        per_user.push(UserMetrics {
            user_id: profile.user_id.clone(),
            archetype: profile.archetype,
            return_time: us.return_times.iter().sum::<f64>() / us.return_times.len() as f64,
            click_rate: tally.clicks as f64 / steps,
            long_view_rate: tally.long_views as f64 / steps,
            like_rate: tally.likes as f64 / steps,
            novelty: tally.novelty / steps,
            sessions: us.sessions,
            steps: tally.steps,
        });
    }
    let col = |f: fn(&UserMetrics) -> f64| MetricCi::of(&per_user.iter().map(f).collect::<Vec<_>>());
    Ok(EvalReport {
        users: n_users,
        return_time: col(|u| u.return_time),
        click_rate: col(|u| u.click_rate),
        long_view_rate: col(|u| u.long_view_rate),
        like_rate: col(|u| u.like_rate),
        novelty: col(|u| u.novelty),
        level_usage,
        per_user,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stratify::{read_trajectories, write_trajectories};

    fn small(n: usize) -> SimConfig {
        SimConfig {
            n_users: n,
            ..SimConfig::default()
        }
    }

    #[test]
    fn dataset_is_deterministic_and_valid() {
        let cfg = small(40);
        let (_, a) = generate_dataset(&cfg).unwrap();
        let (_, b) = generate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
        for t in &a {
            t.validate(Some(cfg.horizon_days)).unwrap();
            assert_eq!(t.active_days as usize, t.return_times.len());
            assert_eq!(t.steps[0].state.len(), cfg.state_dim);
        }
    }

    #[test]
    fn dataset_round_trips_through_jsonl() {
        let (_, ts) = generate_dataset(&small(10)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        write_trajectories(&path, &ts).unwrap();
        assert_eq!(read_trajectories(&path).unwrap(), ts);
    }

    #[test]
    fn discrete_dataset_uses_catalog_items() {
        let cfg = SimConfig {
            action_kind: HeadKind::Discrete,
            ..small(10)
        };
        let (_, ts) = generate_dataset(&cfg).unwrap();
        for s in ts.iter().flat_map(|t| &t.steps) {
            assert!(matches!(s.action, Action::Discrete(i) if i < cfg.n_items));
        }
    }

    #[test]
    fn mean_return_time_is_ordered_by_archetype() {
        let cfg = small(1500);
        let (pop, ts) = generate_dataset(&cfg).unwrap();
        let mut sum = vec![0.0; cfg.k_true];
        let mut n = vec![0usize; cfg.k_true];
        for (u, t) in pop.users.iter().zip(&ts) {
            sum[u.archetype] += t.mean_return_time().unwrap();
            n[u.archetype] += 1;
        }
        let means: Vec<f64> = sum.iter().zip(&n).map(|(s, n)| s / *n as f64).collect();
        assert!(means.windows(2).all(|w| w[0] < w[1]), "{means:?}");
    }

    #[test]
    fn evaluation_is_deterministic() {
        let cfg = small(10);
        let a = evaluate(&cfg, &mut ExpertRecommender::new(&cfg, 0).unwrap(), 50, 3).unwrap();
        let b = evaluate(&cfg, &mut ExpertRecommender::new(&cfg, 0).unwrap(), 50, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.per_user.len(), 50);
    }

    #[test]
    fn best_logging_policy_has_best_return_time() {
        let cfg = small(10);
        let rt: Vec<f64> = (0..cfg.k_true)
            .map(|g| {
                evaluate(&cfg, &mut ExpertRecommender::new(&cfg, g).unwrap(), 1000, 5)
                    .unwrap()
                    .return_time
                    .mean
            })
            .collect();
        assert!(rt[1..].iter().all(|&r| rt[0] < r), "{rt:?}");
    }

    #[test]
    fn random_recommender_matches_analytic_click_rate() {
        // Uniform directions make a·p symmetric about zero, so with zero click
        // bias the expected click probability is exactly one half.
        let cfg = small(10);
        let rep = evaluate(&cfg, &mut RandomRecommender::new(&cfg, 1), 1000, 8).unwrap();
        let clicks: Vec<f64> = rep.per_user.iter().map(|u| u.click_rate).collect();
        let steps: usize = rep.per_user.iter().map(|u| u.steps).sum();
        let sigma = (0.25 / steps as f64).sqrt();
        let pooled = rep
            .per_user
            .iter()
            .map(|u| u.click_rate * u.steps as f64)
            .sum::<f64>()
            / steps as f64;
        assert!((pooled - 0.5).abs() < 3.0 * sigma, "{pooled} vs 0.5 ± {}", 3.0 * sigma);
        assert!(clicks.iter().all(|c| (0.0..=1.0).contains(c)));
    }

    #[test]
    fn wrong_action_dimension_is_rejected() {
        struct Bad;
        impl Recommender for Bad {
            fn serve(&mut self, _: &StepContext<'_>) -> Result<Served, SimError> {
                Ok(Served {
                    action: EnvAction::Vector(vec![1.0; 3]),
                    level: None,
                })
            }
        }
        let cfg = small(5);
        assert!(matches!(evaluate(&cfg, &mut Bad, 5, 0), Err(SimError::Dimension { expected: 8, got: 3 })));
    }

    #[test]
    fn ci_matches_formula() {
        let m = MetricCi::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((m.ci95 - 1.96 * sd / 2.0).abs() < 1e-15);
    }
}
