//! Retention scoring, expert selection and quantile stratification of expert
//! users into behavior-cloning datasets, one per level.
//!
//! A user's whole trajectory lands in exactly one level. Level 1 holds the
//! highest retention scores.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StratifyError {
    #[error("user {user_id}: no return times to score in return-time mode")]
    EmptyReturnTimes { user_id: String },
    #[error("{experts} experts cannot fill {levels} levels")]
    TooFewExperts { experts: usize, levels: usize },
    #[error("invalid trajectory for user {user_id}: {reason}")]
    InvalidTrajectory { user_id: String, reason: String },
    #[error("{0}")]
    Inconsistent(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
}

/// Recommended action: an item embedding or a catalog index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: Vec<f64>,
    pub action: Action,
    #[serde(default)]
    pub signals: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub user_id: String,
    pub steps: Vec<Step>,
    /// Gaps between consecutive sessions, in days.
    pub return_times: Vec<f64>,
    pub active_days: u32,
}

impl Trajectory {
    pub fn validate(&self, window_days: Option<u32>) -> Result<(), StratifyError> {
        let bad = |reason: String| {
            Err(StratifyError::InvalidTrajectory {
                user_id: self.user_id.clone(),
                reason,
            })
        };
        let Some(first) = self.steps.first() else {
            return bad("no steps".into());
        };
        let dim = first.state.len();
        let kind_of = |a: &Action| match a {
            Action::Continuous(v) => Some(v.len()),
            Action::Discrete(_) => None,
        };
        let kind = kind_of(&first.action);
        for (i, s) in self.steps.iter().enumerate() {
            if s.state.len() != dim {
                return bad(format!("step {i} state has dim {}, expected {dim}", s.state.len()));
            }
            if s.state.iter().any(|v| !v.is_finite()) {
                return bad(format!("step {i} state is not finite"));
            }
            if kind_of(&s.action) != kind {
                return bad(format!("step {i} action kind or dim differs from step 0"));
            }
            if let Action::Continuous(a) = &s.action {
                if a.iter().any(|v| !v.is_finite()) {
                    return bad(format!("step {i} action is not finite"));
                }
            }
        }
        if self.return_times.iter().any(|&g| !(g >= 0.0) || !g.is_finite()) {
            return bad("negative or non-finite return time".into());
        }
        if let Some(w) = window_days {
            if self.active_days > w {
                return bad(format!("active_days {} exceeds window {w}", self.active_days));
            }
        }
        Ok(())
    }

    pub fn mean_return_time(&self) -> Option<f64> {
        if self.return_times.is_empty() {
            None
        } else {
            Some(self.return_times.iter().sum::<f64>() / self.return_times.len() as f64)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetentionMode {
    /// Score is the number of active days in the window.
    ActiveDays,
    /// Score is the negated mean return time, so higher is better in both modes.
    ReturnTime,
}

impl RetentionMode {
    /// Lowest score that still counts as an expert for a user-facing threshold
    /// (days of mean return time, or active days).
    pub fn score_cut(self, threshold: f64) -> f64 {
        match self {
            RetentionMode::ActiveDays => threshold,
            RetentionMode::ReturnTime => -threshold,
        }
    }
}

pub fn retention_score(t: &Trajectory, mode: RetentionMode) -> Result<f64, StratifyError> {
    match mode {
        RetentionMode::ActiveDays => Ok(f64::from(t.active_days)),
        RetentionMode::ReturnTime => t
            .mean_return_time()
            .map(|m| -m)
            .ok_or_else(|| StratifyError::EmptyReturnTimes {
                user_id: t.user_id.clone(),
            }),
    }
}

/// Users whose mean return time is at most `threshold` days (return-time mode)
/// or whose active days are at least `threshold` (active-days mode). Users
/// without any recorded return are never experts in return-time mode.
pub fn select_experts(ts: &[Trajectory], mode: RetentionMode, threshold: f64) -> Vec<&Trajectory> {
    let cut = mode.score_cut(threshold);
    ts.iter()
        .filter(|t| retention_score(t, mode).is_ok_and(|s| s >= cut))
        .collect()
}

/// Score edges separating the levels, plus the expert cut.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelBoundaries {
    pub mode: RetentionMode,
    pub levels: usize,
    /// `edges[j]` is the lowest score admitted to level `j + 1`; length `levels - 1`.
    pub edges: Vec<f64>,
    /// Scores below this are non-experts. `None` when no expert filter was applied.
    pub expert_cut: Option<f64>,
}

impl LevelBoundaries {
    /// Level for a retention score; non-experts map to the weakest level.
    pub fn level_for_score(&self, score: f64) -> usize {
        if self.expert_cut.is_some_and(|c| score < c) {
            return self.levels;
        }
        self.edges
            .iter()
            .position(|&e| score >= e)
            .map_or(self.levels, |j| j + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActionTargets {
    Continuous(Matrix),
    Discrete(Vec<usize>),
}

impl ActionTargets {
    pub fn len(&self) -> usize {
        match self {
            ActionTargets::Continuous(m) => m.rows(),
            ActionTargets::Discrete(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gather(&self, idx: &[usize]) -> ActionTargets {
        match self {
            ActionTargets::Continuous(m) => ActionTargets::Continuous(m.gather_rows(idx)),
            ActionTargets::Discrete(v) => ActionTargets::Discrete(idx.iter().map(|&i| v[i]).collect()),
        }
    }

    fn get(&self, i: usize) -> Action {
        match self {
            ActionTargets::Continuous(m) => Action::Continuous(m.row(i).to_vec()),
            ActionTargets::Discrete(v) => Action::Discrete(v[i]),
        }
    }
}

/// Behavior-cloning pairs of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelData {
    /// Users in this level, best score first.
    pub users: Vec<String>,
    /// Owner of each pair, parallel to the rows of `states`.
    pub pair_users: Vec<usize>,
    pub states: Matrix,
    pub actions: ActionTargets,
}

impl LevelData {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeveledDataset {
    pub levels: Vec<LevelData>,
    /// `Some(level)` for experts, `None` for non-experts.
    pub level_of_user: BTreeMap<String, Option<usize>>,
    pub boundaries: LevelBoundaries,
}

impl LeveledDataset {
    pub fn k(&self) -> usize {
        self.levels.len()
    }

    pub fn state_dim(&self) -> usize {
        self.levels[0].states.cols()
    }
}

/// Splits experts into `k` quantile levels of the retention score.
///
/// Experts are ranked by score (descending). The top `ceil(j·n/k)` users fill
/// levels `1..=j`; a user whose score equals the edge score of a level joins
/// that better level even when the rank cut falls before them.
pub fn stratify(experts: &[&Trajectory], k: usize, mode: RetentionMode) -> Result<LeveledDataset, StratifyError> {
    if k == 0 || experts.len() < k {
        return Err(StratifyError::TooFewExperts {
            experts: experts.len(),
            levels: k,
        });
    }
    let mut scored = Vec::with_capacity(experts.len());
    for t in experts {
        t.validate(None)?;
        scored.push((retention_score(t, mode)?, *t));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.user_id.cmp(&b.1.user_id)));
    for w in scored.windows(2) {
        if w[0].1.user_id == w[1].1.user_id {
            return Err(StratifyError::Inconsistent(format!("duplicate user {}", w[0].1.user_id)));
        }
    }

    let n = scored.len();
    let edges: Vec<f64> = (1..k).map(|j| scored[(j * n).div_ceil(k) - 1].0).collect();
    let boundaries = LevelBoundaries {
        mode,
        levels: k,
        edges,
        expert_cut: None,
    };

    let first = &scored[0].1.steps[0];
    let state_dim = first.state.len();
    let action_dim = match &first.action {
        Action::Continuous(v) => Some(v.len()),
        Action::Discrete(_) => None,
    };

    let mut users: Vec<Vec<String>> = vec![Vec::new(); k];
    let mut pair_users: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut states: Vec<Vec<f64>> = vec![Vec::new(); k];
    let mut cont: Vec<Vec<f64>> = vec![Vec::new(); k];
    let mut disc: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut level_of_user = BTreeMap::new();

    for (score, t) in &scored {
        let lvl = boundaries.level_for_score(*score);
        let li = lvl - 1;
        level_of_user.insert(t.user_id.clone(), Some(lvl));
        let owner = users[li].len();
        users[li].push(t.user_id.clone());
        for s in &t.steps {
            if s.state.len() != state_dim {
                return Err(StratifyError::Inconsistent(format!(
                    "user {} has state dim {}, expected {state_dim}",
                    t.user_id,
                    s.state.len()
                )));
            }
            states[li].extend_from_slice(&s.state);
            pair_users[li].push(owner);
            match (&s.action, action_dim) {
                (Action::Continuous(a), Some(d)) if a.len() == d => cont[li].extend_from_slice(a),
                (Action::Discrete(i), None) => disc[li].push(*i),
                _ => {
                    return Err(StratifyError::Inconsistent(format!(
                        "user {} has an action of a different kind or size",
                        t.user_id
                    )))
                }
            }
        }
    }

    let levels = (0..k)
        .map(|li| {
            let rows = pair_users[li].len();
            let states = Matrix::new(rows, state_dim, std::mem::take(&mut states[li]))
                .expect("validated finite states");
            let actions = match action_dim {
                Some(d) => ActionTargets::Continuous(
                    Matrix::new(rows, d, std::mem::take(&mut cont[li])).expect("validated finite actions"),
                ),
                None => ActionTargets::Discrete(std::mem::take(&mut disc[li])),
            };
            LevelData {
                users: std::mem::take(&mut users[li]),
                pair_users: std::mem::take(&mut pair_users[li]),
                states,
                actions,
            }
        })
        .collect();

    Ok(LeveledDataset {
        levels,
        level_of_user,
        boundaries,
    })
}

/// Expert selection followed by stratification. Non-experts are recorded in
/// `level_of_user` as `None` and never contribute pairs.
pub fn build_leveled(
    ts: &[Trajectory],
    mode: RetentionMode,
    expert_threshold: f64,
    k: usize,
) -> Result<LeveledDataset, StratifyError> {
    let experts = select_experts(ts, mode, expert_threshold);
    let mut ds = stratify(&experts, k, mode)?;
    ds.boundaries.expert_cut = Some(mode.score_cut(expert_threshold));
    for t in ts {
        ds.level_of_user.entry(t.user_id.clone()).or_insert(None);
    }
    Ok(ds)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> StratifyError {
    StratifyError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

/// One JSON trajectory per line.
pub fn write_trajectories(path: &Path, ts: &[Trajectory]) -> Result<(), StratifyError> {
    let f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    for t in ts {
        let line = serde_json::to_string(t).map_err(|e| io_err(path, e))?;
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>, StratifyError> {
    read_jsonl(path)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, StratifyError> {
    let f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| StratifyError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelManifest {
    pub level: usize,
    pub file: String,
    pub users: usize,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub state_dim: usize,
    pub boundaries: LevelBoundaries,
    pub levels: Vec<LevelManifest>,
    pub level_of_user: BTreeMap<String, Option<usize>>,
}

#[derive(Serialize, Deserialize)]
struct PairLine {
    user_id: String,
    state: Vec<f64>,
    action: Action,
}

pub const MANIFEST_FORMAT: &str = "sec-leveled/1";

/// Writes `manifest.json` and one `level_<k>.jsonl` pair file per level into `dir`.
pub fn write_manifest(dir: &Path, ds: &LeveledDataset) -> Result<PathBuf, StratifyError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut levels = Vec::new();
    for (li, level) in ds.levels.iter().enumerate() {
        let name = format!("level_{}.jsonl", li + 1);
        let path = dir.join(&name);
        let f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        let mut w = BufWriter::new(f);
        for i in 0..level.len() {
            let line = PairLine {
                user_id: level.users[level.pair_users[i]].clone(),
                state: level.states.row(i).to_vec(),
                action: level.actions.get(i),
            };
            let s = serde_json::to_string(&line).map_err(|e| io_err(&path, e))?;
            writeln!(w, "{s}").map_err(|e| io_err(&path, e))?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
        levels.push(LevelManifest {
            level: li + 1,
            file: name,
            users: level.users.len(),
            pairs: level.len(),
        });
    }
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.into(),
        state_dim: ds.state_dim(),
        boundaries: ds.boundaries.clone(),
        levels,
        level_of_user: ds.level_of_user.clone(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| io_err(&path, e))?;
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<LeveledDataset, StratifyError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| StratifyError::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })?;
    if m.format != MANIFEST_FORMAT {
        return Err(StratifyError::Inconsistent(format!("unknown manifest format {:?}", m.format)));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut levels = Vec::new();
    for lm in &m.levels {
        let lines: Vec<PairLine> = read_jsonl(&dir.join(&lm.file))?;
        let mut users: Vec<String> = Vec::new();
        let mut pair_users = Vec::new();
        let mut states = Vec::new();
        let mut cont = Vec::new();
        let mut disc = Vec::new();
        let mut action_dim = None;
        for l in lines {
            if users.last() != Some(&l.user_id) {
                users.push(l.user_id.clone());
            }
            pair_users.push(users.len() - 1);
            if l.state.len() != m.state_dim {
                return Err(StratifyError::Inconsistent(format!("{}: state dim mismatch", lm.file)));
            }
            states.extend(l.state);
            match l.action {
                Action::Continuous(a) => {
                    action_dim.get_or_insert(a.len());
                    cont.extend(a);
                }
                Action::Discrete(i) => disc.push(i),
            }
        }
        let rows = pair_users.len();
        let mk = |r, c, d| Matrix::new(r, c, d).map_err(|e| StratifyError::Inconsistent(format!("{}: {e}", lm.file)));
        let states = mk(rows, m.state_dim, states)?;
        let actions = match (action_dim, disc.is_empty()) {
            (Some(d), true) => ActionTargets::Continuous(mk(rows, d, cont)?),
            (None, _) => ActionTargets::Discrete(disc),
            (Some(_), false) => {
                return Err(StratifyError::Inconsistent(format!("{}: mixed action kinds", lm.file)))
            }
        };
        if rows != lm.pairs || users.len() != lm.users {
            return Err(StratifyError::Inconsistent(format!("{}: counts differ from manifest", lm.file)));
        }
        levels.push(LevelData {
            users,
            pair_users,
            states,
            actions,
        });
    }
    Ok(LeveledDataset {
        levels,
        level_of_user: m.level_of_user,
        boundaries: m.boundaries,
    })
}
