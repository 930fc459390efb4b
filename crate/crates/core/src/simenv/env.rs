use rand::Rng;

use super::population::{normal, normalize, sample_index, UserRng, World};
use super::{FeedbackCalibration, SimConfig, SimError, UserProfile};
use crate::numcore::dot;
use crate::rng::stream;

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Click probability for an action with unit-capped magnitude against a
/// preference, given a draw of the feedback noise.
pub fn click_probability(cal: &FeedbackCalibration, action: &[f64], preference: &[f64], noise: f64) -> f64 {
    logistic(cal.click_gain * (capped_alignment(action, preference) + noise) + cal.click_bias)
}

/// `(a / max(|a|, 1)) · p`.
fn capped_alignment(action: &[f64], preference: &[f64]) -> f64 {
    dot(action, preference) / dot(action, action).sqrt().max(1.0)
}

/// Shifted exponential gap `1 + (mean − 1) · Exp(1)`, the continuous
/// counterpart of a geometric gap, drawn by inverting the CDF at `u` in
/// [0, 1). For a fixed `u` the gap never grows as the mean shrinks.
pub fn return_gap(mean: f64, u: f64) -> f64 {
    if mean <= 1.0 {
        return 1.0;
    }
    1.0 - (mean - 1.0) * (1.0 - u).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvAction {
    Vector(Vec<f64>),
    Item(usize),
    /// Distribution over catalog items; the environment samples the item.
    Distribution(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub click: bool,
    pub long_view: bool,
    pub like: bool,
    pub click_prob: f64,
    pub long_view_prob: f64,
    pub like_prob: f64,
    pub novelty: f64,
    /// Satisfaction added by this step, in [0, 1].
    pub gain: f64,
    pub leave: bool,
    /// The item shown, for catalog actions.
    pub item: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    InSession,
    Ended,
    Finished,
}

#[derive(Debug, Clone)]
pub struct UserState {
    pub profile: UserProfile,
    /// Days elapsed since the start of the horizon.
    pub day: f64,
    pub sessions: u32,
    pub return_times: Vec<f64>,
    /// Satisfaction accumulated over the current or last session.
    pub satisfaction: f64,
    pub session_steps: usize,
    /// Unit directions of the actions shown in the current session.
    pub buffer: Vec<Vec<f64>>,
    phase: Phase,
    state: Vec<f64>,
    obs_rng: UserRng,
    feedback_rng: UserRng,
    leave_rng: UserRng,
    return_rng: UserRng,
    policy_rng: UserRng,
}

impl UserState {
    fn new(profile: UserProfile) -> Self {
        let s = profile.seed;
        Self {
            day: 0.0,
            sessions: 0,
            return_times: Vec::new(),
            satisfaction: 0.0,
            session_steps: 0,
            buffer: Vec::new(),
            phase: Phase::Idle,
            state: Vec::new(),
            obs_rng: stream(s, 1),
            feedback_rng: stream(s, 2),
            leave_rng: stream(s, 3),
            return_rng: stream(s, 4),
            policy_rng: stream(s, 5),
            profile,
        }
    }

    pub fn is_active(&self) -> bool {
        self.phase == Phase::InSession
    }

    pub fn is_finished(&self) -> bool {
        self.phase == Phase::Finished
    }
}

/// Mutable simulator over a fixed set of users.
#[derive(Debug, Clone)]
pub struct Env {
    cfg: SimConfig,
    world: World,
    users: Vec<UserState>,
}

impl Env {
    pub fn new(cfg: &SimConfig, world: World, users: Vec<UserProfile>) -> Result<Self, SimError> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            world,
            users: users.into_iter().map(UserState::new).collect(),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn user(&self, u: usize) -> Result<&UserState, SimError> {
        self.users.get(u).ok_or(SimError::UnknownUser(u))
    }

    fn user_mut(&mut self, u: usize) -> Result<&mut UserState, SimError> {
        self.users.get_mut(u).ok_or(SimError::UnknownUser(u))
    }

    fn draw_state(&mut self, u: usize) {
        let cfg = &self.cfg;
        let us = &mut self.users[u];
        let mut s = Vec::with_capacity(cfg.state_dim);
        for p in &us.profile.preference {
            s.push(p + cfg.obs_noise * normal(&mut us.obs_rng));
        }
        for _ in cfg.action_dim..cfg.state_dim {
            s.push(normal(&mut us.obs_rng));
        }
        us.state = s;
    }

    pub fn begin_session(&mut self, u: usize) -> Result<(), SimError> {
        let us = self.user_mut(u)?;
        match us.phase {
            Phase::InSession | Phase::Ended => return Err(SimError::AlreadyActive(u)),
            Phase::Finished => return Err(SimError::Finished(u)),
            Phase::Idle => {}
        }
        us.phase = Phase::InSession;
        us.sessions += 1;
        us.satisfaction = 0.0;
        us.session_steps = 0;
        us.buffer.clear();
        self.draw_state(u);
        Ok(())
    }

    /// Current observation of an active user.
    pub fn state(&self, u: usize) -> Result<&[f64], SimError> {
        let us = self.user(u)?;
        if !us.is_active() {
            return Err(SimError::Inactive(u));
        }
        Ok(&us.state)
    }

    fn resolve(&mut self, u: usize, action: EnvAction) -> Result<(Vec<f64>, Option<usize>), SimError> {
        let d = self.cfg.action_dim;
        let items = self.world.items.rows();
        let pick = self.users[u].policy_rng.random::<f64>();
        match action {
            EnvAction::Vector(v) => {
                if v.len() != d {
                    return Err(SimError::Dimension { expected: d, got: v.len() });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(SimError::NonFiniteAction);
                }
                Ok((v, None))
            }
            EnvAction::Item(i) => {
                if i >= items {
                    return Err(SimError::ItemOutOfRange { item: i, items });
                }
                Ok((self.world.items.row(i).to_vec(), Some(i)))
            }
            EnvAction::Distribution(p) => {
                if p.len() != items {
                    return Err(SimError::Dimension { expected: items, got: p.len() });
                }
                if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
                    return Err(SimError::NonFiniteAction);
                }
                let i = sample_index(&p, pick * p.iter().sum::<f64>());
                Ok((self.world.items.row(i).to_vec(), Some(i)))
            }
        }
    }

    /// Shows one action to an active user and samples the response.
    pub fn step(&mut self, u: usize, action: EnvAction) -> Result<StepOutcome, SimError> {
        if !self.user(u)?.is_active() {
            return Err(SimError::Inactive(u));
        }
        let (a, item) = self.resolve(u, action)?;
        let cfg = &self.cfg;
        let us = &mut self.users[u];

        let eps = cfg.noise_scale * normal(&mut us.feedback_rng);
        let x = capped_alignment(&a, &us.profile.preference) + eps;
        let f = &cfg.feedback;
        let click_prob = logistic(f.click_gain * x + f.click_bias);
        let long_view_prob = logistic(f.long_view_gain * x + f.long_view_bias);
        let like_prob = logistic(f.like_gain * x + f.like_bias);
        let click = us.feedback_rng.random::<f64>() < click_prob;
        let long_view = us.feedback_rng.random::<f64>() < long_view_prob;
        let like = us.feedback_rng.random::<f64>() < like_prob;

        let mut dir = a;
        let novelty = if normalize(&mut dir) > 0.0 {
            let nov = us
                .buffer
                .iter()
                .map(|b| {
                    let d2: f64 = dir.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                    0.5 * d2.sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            us.buffer.push(dir);
            if nov.is_finite() {
                nov.min(1.0)
            } else {
                0.0
            }
        } else {
            0.0
        };

        let w = &cfg.satisfaction;
        let b = |x: bool| if x { 1.0 } else { 0.0 };
        let gain = (w.click * b(click) + w.long_view * b(long_view) + w.like * b(like) + w.novelty * novelty) / w.total();
        us.satisfaction += gain;
        us.session_steps += 1;

        let lv = &cfg.leave;
        let frac = us.session_steps as f64 / cfg.session_len_max as f64;
        let p_leave = (lv.base + lv.length * frac + lv.stall * (lv.stall_ref - gain).max(0.0)).clamp(0.0, 1.0);
        let draw = us.leave_rng.random::<f64>();
        let leave = us.session_steps >= cfg.session_len_max || draw < p_leave;
        if leave {
            us.phase = Phase::Ended;
        } else {
            self.draw_state(u);
        }
        Ok(StepOutcome {
            click,
            long_view,
            like,
            click_prob,
            long_view_prob,
            like_prob,
            novelty,
            gain,
            leave,
            item,
        })
    }

    /// Mean of the return-gap distribution after a session with this mean satisfaction.
    pub fn mean_gap(cfg: &SimConfig, mean_satisfaction: f64, loyalty: f64) -> f64 {
        let r = &cfg.return_gap;
        let e = (0.5 + r.gain * (mean_satisfaction - r.center) + loyalty).clamp(0.0, 1.0);
        r.floor + (r.ceil - r.floor) * (1.0 - e)
    }

    /// Draws the gap to the next visit after a session ends, clamped to the
    /// days left in the horizon, and advances the user's day counter.
    pub fn end_of_session(&mut self, u: usize) -> Result<f64, SimError> {
        let cfg = &self.cfg;
        let us = self.users.get_mut(u).ok_or(SimError::UnknownUser(u))?;
        match us.phase {
            Phase::Ended => {}
            Phase::InSession => return Err(SimError::AlreadyActive(u)),
            Phase::Idle => return Err(SimError::Inactive(u)),
            Phase::Finished => return Err(SimError::Finished(u)),
        }
        let mean_sat = us.satisfaction / us.session_steps.max(1) as f64;
        let mu = Self::mean_gap(cfg, mean_sat, us.profile.loyalty);
        let horizon = f64::from(cfg.horizon_days);
        let remaining = (horizon - us.day).max(1.0);
        let gap = return_gap(mu, us.return_rng.random::<f64>()).min(remaining);
        us.return_times.push(gap);
        us.day += gap;
        us.phase = if us.day >= horizon { Phase::Finished } else { Phase::Idle };
        Ok(gap)
    }
}
