use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pipeline::{build_bank, evaluate_policy, leveled_dataset, run_variant, train_policy, Variant, VariantResult};
use super::{ExperimentConfig, HarnessError, TOOL_VERSION};
use crate::policy::PolicyParams;
use crate::select::CentroidBank;
use crate::simenv::{generate_dataset, EvalReport};
use crate::stratify::{read_trajectories, retention_score, write_manifest, write_trajectories, RetentionMode, Trajectory};
use crate::train::TrainLog;

/// Input artifacts given on the command line; each falls back to `[paths]`.
#[derive(Debug, Clone, Default)]
pub struct Inputs {
    pub trajectories: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub centroids: Option<PathBuf>,
}

fn pick(cli: &Option<PathBuf>, cfg: &Option<PathBuf>, what: &str) -> Result<PathBuf, HarnessError> {
    cli.clone()
        .or_else(|| cfg.clone())
        .ok_or_else(|| HarnessError::Config(format!("no {what} path given (flag or [paths] entry)")))
}

fn prepare_out(out: &Path, overwrite: bool) -> Result<(), HarnessError> {
    if out.exists() {
        if !overwrite {
            return Err(HarnessError::OutputExists(out.to_path_buf()));
        }
        let removed = if out.is_dir() {
            fs::remove_dir_all(out)
        } else {
            fs::remove_file(out)
        };
        removed.map_err(|e| HarnessError::io(out, e))?;
    }
    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| HarnessError::io(path, e))
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report types serialize")
}

#[derive(Serialize)]
struct Resolved<'a> {
    tool_version: &'a str,
    command: &'a str,
    config: &'a ExperimentConfig,
}

fn write_resolved(out: &Path, cfg: &ExperimentConfig, command: &str) -> Result<(), HarnessError> {
    let r = Resolved {
        tool_version: TOOL_VERSION,
        command,
        config: cfg,
    };
    write(&out.join("resolved_config.json"), json(&r))
}

fn load_checkpoint(path: &Path) -> Result<PolicyParams, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(PolicyParams::from_checkpoint_json(&text)?)
}

/// Unit-width bins of the per-user retention score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub mode: RetentionMode,
    /// Left edge of the first bin; bin `i` covers `[lower + i, lower + i + 1)`.
    pub lower: f64,
    pub counts: Vec<usize>,
}

impl ScoreHistogram {
    /// Bins mean return time (return-time mode) or active days.
    pub fn of(ts: &[Trajectory], mode: RetentionMode) -> Self {
        let values: Vec<f64> = ts
            .iter()
            .filter_map(|t| retention_score(t, mode).ok())
            .map(|s| if mode == RetentionMode::ReturnTime { -s } else { s })
            .collect();
        let lower = values.iter().copied().fold(f64::INFINITY, f64::min).floor();
        if !lower.is_finite() {
            return Self {
                mode,
                lower: 0.0,
                counts: Vec::new(),
            };
        }
        let mut counts = Vec::new();
        for v in values {
            let b = (v - lower).floor() as usize;
            if counts.len() <= b {
                counts.resize(b + 1, 0);
            }
            counts[b] += 1;
        }
        Self { mode, lower, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataSummary {
    pub users: usize,
    pub experts: usize,
    pub pairs: usize,
    pub mean_return_time: f64,
    pub archetype_users: Vec<usize>,
    pub archetype_mean_return_time: Vec<f64>,
    pub archetype_alignment: Vec<f64>,
    pub score_histogram: ScoreHistogram,
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path, overwrite: bool) -> Result<GenDataSummary, HarnessError> {
    cfg.validate()?;
    prepare_out(out, overwrite)?;
    write_resolved(out, cfg, "gen-data")?;
    let (pop, ts) = generate_dataset(&cfg.sim)?;
    write_trajectories(&out.join("trajectories.jsonl"), &ts)?;

    let k = cfg.sim.k_true;
    let mut sums = vec![0.0; k];
    let mut users = vec![0usize; k];
    for (u, t) in pop.users.iter().zip(&ts) {
        sums[u.archetype] += t.mean_return_time().unwrap_or(0.0);
        users[u.archetype] += 1;
    }
    let experts = crate::stratify::select_experts(&ts, cfg.strat.mode, cfg.strat.expert_threshold).len();
    let summary = GenDataSummary {
        users: ts.len(),
        experts,
        pairs: ts.iter().map(|t| t.steps.len()).sum(),
        mean_return_time: ts.iter().filter_map(Trajectory::mean_return_time).sum::<f64>() / ts.len() as f64,
        archetype_mean_return_time: sums.iter().zip(&users).map(|(s, n)| s / (*n).max(1) as f64).collect(),
        archetype_users: users,
        archetype_alignment: pop.archetype_alignment,
        score_histogram: ScoreHistogram::of(&ts, cfg.strat.mode),
    };
    write(&out.join("summary.json"), json(&summary))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub log: TrainLog,
    pub pairs_per_level: Vec<usize>,
    /// Epochs whose parameters were saved under `snapshots/`.
    pub snapshot_epochs: Vec<usize>,
}

pub fn snapshot_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.json")
}

pub fn cmd_train(cfg: &ExperimentConfig, inputs: &Inputs, out: &Path, overwrite: bool) -> Result<TrainOutput, HarnessError> {
    cfg.validate()?;
    let data = pick(&inputs.trajectories, &cfg.paths.trajectories, "trajectories")?;
    let ts = read_trajectories(&data)?;
    prepare_out(out, overwrite)?;
    write_resolved(out, cfg, "train")?;
    let ds = leveled_dataset(cfg, &ts)?;
    write_manifest(&out.join("leveled"), &ds)?;

    let epochs = cfg.train.epochs;
    let mut snapshot_epochs = vec![0, epochs / 2, epochs];
    snapshot_epochs.dedup();
    let mut snapshots = Vec::new();
    let (policy, log) = train_policy(cfg, &ds, |e, p| {
        if snapshot_epochs.contains(&e) {
            snapshots.push((e, p.to_checkpoint_json()));
        }
    })?;
    for (e, text) in snapshots {
        write(&out.join("snapshots").join(snapshot_name(e)), text)?;
    }
    write(&out.join("checkpoint.json"), policy.to_checkpoint_json())?;
    write(&out.join("train_log.csv"), log.to_csv())?;
    Ok(TrainOutput {
        log,
        pairs_per_level: ds.levels.iter().map(|l| l.len()).collect(),
        snapshot_epochs,
    })
}

pub fn cmd_build_centroids(
    cfg: &ExperimentConfig,
    inputs: &Inputs,
    out: &Path,
    overwrite: bool,
) -> Result<CentroidBank, HarnessError> {
    cfg.validate()?;
    let data = pick(&inputs.trajectories, &cfg.paths.trajectories, "trajectories")?;
    let ckpt = pick(&inputs.checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    let ts = read_trajectories(&data)?;
    let policy = load_checkpoint(&ckpt)?;
    prepare_out(out, overwrite)?;
    write_resolved(out, cfg, "build-centroids")?;
    let ds = leveled_dataset(cfg, &ts)?;
    let bank = build_bank(cfg, &policy, &ds)?;
    bank.save(&out.join("centroids.json"))?;
    Ok(bank)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateOutput {
    /// `adaptive` first, then `level_1` … `level_K`.
    pub rows: Vec<(String, EvalReport)>,
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, inputs: &Inputs, out: &Path, overwrite: bool) -> Result<EvaluateOutput, HarnessError> {
    cfg.validate()?;
    let ckpt = pick(&inputs.checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    let bank_path = pick(&inputs.centroids, &cfg.paths.centroids, "centroids")?;
    let policy = load_checkpoint(&ckpt)?;
    let bank = CentroidBank::load(&bank_path)?;
    prepare_out(out, overwrite)?;
    write_resolved(out, cfg, "evaluate")?;

    let (adaptive, log) = evaluate_policy(cfg, &policy, &bank, None, cfg.eval.log_limit)?;
    let mut lines = String::new();
    for r in &log {
        lines.push_str(&serde_json::to_string(r).expect("record serializes"));
        lines.push('\n');
    }
    write(&out.join("recommendations.jsonl"), lines)?;
    write(&out.join("per_user_adaptive.csv"), adaptive.per_user_csv())?;

    let mut rows = vec![("adaptive".to_string(), adaptive)];
    for k in 1..=bank.k() {
        let (r, _) = evaluate_policy(cfg, &policy, &bank, Some(k), 0)?;
        rows.push((format!("level_{k}"), r));
    }
    if cfg.report.wants("csv") {
        let mut csv = format!("{}\n", EvalReport::csv_header());
        for (label, r) in &rows {
            csv.push_str(&r.csv_row(label));
            csv.push('\n');
        }
        write(&out.join("eval_summary.csv"), csv)?;
    }
    if cfg.report.wants("json") {
        let summary: Vec<(String, EvalReport)> = rows
            .iter()
            .map(|(l, r)| {
                let mut r = r.clone();
                r.per_user.clear();
                (l.clone(), r)
            })
            .collect();
        write(&out.join("eval_report.json"), json(&summary))?;
    }
    Ok(EvaluateOutput { rows })
}

pub const ABLATION_HEADER: &str = "variant,k_levels,lambda,return_time,click_rate,long_view_rate,like_rate,novelty,diversity,delta_return_time,delta_click_rate,delta_long_view_rate,sign_return_time";
const SEED_HEADER: &str = "seed,variant,k_levels,lambda,return_time,return_time_ci95,click_rate,long_view_rate,like_rate,novelty,diversity";

/// Means over the paired seeds; deltas are `variant − full`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub k_levels: usize,
    pub lambda: f64,
    pub return_time: f64,
    pub click_rate: f64,
    pub long_view_rate: f64,
    pub like_rate: f64,
    pub novelty: f64,
    pub diversity: f64,
    pub delta_return_time: f64,
    pub delta_click_rate: f64,
    pub delta_long_view_rate: f64,
    /// Sign of `delta_return_time`: 1 means the variant returns later (worse).
    pub sign_return_time: i32,
}

impl AblationRow {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.variant,
            self.k_levels,
            self.lambda,
            self.return_time,
            self.click_rate,
            self.long_view_rate,
            self.like_rate,
            self.novelty,
            self.diversity,
            self.delta_return_time,
            self.delta_click_rate,
            self.delta_long_view_rate,
            self.sign_return_time
        )
    }

    fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 13 {
            return None;
        }
        let n = |i: usize| f[i].parse::<f64>().ok();
        Some(Self {
            variant: f[0].to_string(),
            k_levels: f[1].parse().ok()?,
            lambda: n(2)?,
            return_time: n(3)?,
            click_rate: n(4)?,
            long_view_rate: n(5)?,
            like_rate: n(6)?,
            novelty: n(7)?,
            diversity: n(8)?,
            delta_return_time: n(9)?,
            delta_click_rate: n(10)?,
            delta_long_view_rate: n(11)?,
            sign_return_time: f[12].parse().ok()?,
        })
    }
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationRow>, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(ABLATION_HEADER) {
        return Err(HarnessError::io(path, "unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, l)| AblationRow::parse(l).ok_or_else(|| HarnessError::io(path, format!("bad row {}", i + 2))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub label: String,
    pub result: VariantResult,
}

fn seed_line(s: &SeedResult) -> String {
    let r = &s.result.report;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}\n",
        s.seed,
        s.label,
        s.result.k_levels,
        s.result.lambda,
        r.return_time.mean,
        r.return_time.ci95,
        r.click_rate.mean,
        r.long_view_rate.mean,
        r.like_rate.mean,
        r.novelty.mean,
        s.result.diversity
    )
}

/// Runs each labelled config on every paired seed. Data is generated once per
/// seed and shared. Per-seed rows are flushed to `seeds_file` as they finish,
/// so a failure leaves the completed runs on disk.
fn paired_runs(
    cfg: &ExperimentConfig,
    arms: &[(String, ExperimentConfig)],
    seeds_file: &Path,
) -> Result<Vec<SeedResult>, HarnessError> {
    let mut csv = format!("{SEED_HEADER}\n");
    write(seeds_file, &csv)?;
    let mut out = Vec::new();
    for seed in cfg.run_seeds() {
        let base = cfg.clone().seeded(seed);
        let (_, ts) = generate_dataset(&base.sim)?;
        for (label, arm) in arms {
            let mut c = arm.clone().seeded(seed);
            c.sim = base.sim.clone();
            let result = run_variant(&c, &ts)?;
            let sr = SeedResult {
                seed,
                label: label.clone(),
                result,
            };
            csv.push_str(&seed_line(&sr));
            write(seeds_file, &csv)?;
            out.push(sr);
        }
    }
    Ok(out)
}

fn mean_of(rs: &[&SeedResult], f: impl Fn(&SeedResult) -> f64) -> f64 {
    rs.iter().map(|r| f(r)).sum::<f64>() / rs.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub per_seed: Vec<SeedResult>,
}

impl AblationReport {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Per-seed `variant − full` return-time differences.
    pub fn paired_return_time_deltas(&self, variant: &str) -> Vec<f64> {
        self.seeds
            .iter()
            .filter_map(|s| {
                let get = |l: &str| {
                    self.per_seed
                        .iter()
                        .find(|r| r.seed == *s && r.label == l)
                        .map(|r| r.result.report.return_time.mean)
                };
                Some(get(variant)? - get("full")?)
            })
            .collect()
    }
}

pub fn cmd_ablate(cfg: &ExperimentConfig, out: &Path, overwrite: bool) -> Result<AblationReport, HarnessError> {
    cfg.validate()?;
    prepare_out(out, overwrite)?;
    write_resolved(out, cfg, "ablate")?;
    let arms: Vec<(String, ExperimentConfig)> = Variant::ALL.iter().map(|v| (v.name().to_string(), v.apply(cfg))).collect();
    let per_seed = paired_runs(cfg, &arms, &out.join("ablation_seeds.csv"))?;

    let by = |label: &str| per_seed.iter().filter(|r| r.label == label).collect::<Vec<_>>();
    let full = by("full");
    let rt = |r: &SeedResult| r.result.report.return_time.mean;
    let cr = |r: &SeedResult| r.result.report.click_rate.mean;
    let lv = |r: &SeedResult| r.result.report.long_view_rate.mean;
    let rows: Vec<AblationRow> = Variant::ALL
        .iter()
        .map(|v| {
            let rs = by(v.name());
            let delta = mean_of(&rs, rt) - mean_of(&full, rt);
            AblationRow {
                variant: v.name().to_string(),
                k_levels: rs[0].result.k_levels,
                lambda: rs[0].result.lambda,
                return_time: mean_of(&rs, rt),
                click_rate: mean_of(&rs, cr),
                long_view_rate: mean_of(&rs, lv),
                like_rate: mean_of(&rs, |r| r.result.report.like_rate.mean),
                novelty: mean_of(&rs, |r| r.result.report.novelty.mean),
                diversity: mean_of(&rs, |r| r.result.diversity),
                delta_return_time: delta,
                delta_click_rate: mean_of(&rs, cr) - mean_of(&full, cr),
                delta_long_view_rate: mean_of(&rs, lv) - mean_of(&full, lv),
                sign_return_time: if delta > 0.0 {
                    1
                } else if delta < 0.0 {
                    -1
                } else {
                    0
                },
            }
        })
        .collect();
    let report = AblationReport {
        seeds: cfg.run_seeds(),
        rows,
        per_seed,
    };
    let mut csv = format!("{ABLATION_HEADER}\n");
    for r in &report.rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    write(&out.join("ablation.csv"), csv)?;
    if cfg.report.wants("json") {
        write(&out.join("ablation.json"), json(&report))?;
    }
    Ok(report)
}

pub const SWEEP_HEADER: &str = "lambda,return_time,return_time_sd,click_rate,long_view_rate,like_rate,novelty,diversity";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub return_time: f64,
    /// Standard deviation of the per-seed return times.
    pub return_time_sd: f64,
    pub click_rate: f64,
    pub long_view_rate: f64,
    pub like_rate: f64,
    pub novelty: f64,
    pub diversity: f64,
}

impl SweepRow {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.lambda,
            self.return_time,
            self.return_time_sd,
            self.click_rate,
            self.long_view_rate,
            self.like_rate,
            self.novelty,
            self.diversity
        )
    }

    fn parse(line: &str) -> Option<Self> {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().ok()).collect::<Option<_>>()?;
        if f.len() != 8 {
            return None;
        }
        Some(Self {
            lambda: f[0],
            return_time: f[1],
            return_time_sd: f[2],
            click_rate: f[3],
            long_view_rate: f[4],
            like_rate: f[5],
            novelty: f[6],
            diversity: f[7],
        })
    }
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(SWEEP_HEADER) {
        return Err(HarnessError::io(path, "unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, l)| SweepRow::parse(l).ok_or_else(|| HarnessError::io(path, format!("bad row {}", i + 2))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
    pub per_seed: Vec<SeedResult>,
}

impl SweepReport {
    /// Index of the row with the lowest mean return time (first on ties).
    pub fn best_index(&self) -> usize {
        let mut best = 0;
        for (i, r) in self.rows.iter().enumerate() {
            if r.return_time < self.rows[best].return_time {
                best = i;
            }
        }
        best
    }
}

pub fn cmd_sweep_lambda(
    cfg: &ExperimentConfig,
    grid: Option<&[f64]>,
    out: &Path,
    overwrite: bool,
) -> Result<SweepReport, HarnessError> {
    let mut cfg = cfg.clone();
    if let Some(g) = grid {
        cfg.ablation.lambda_grid = g.to_vec();
    }
    cfg.validate()?;
    prepare_out(out, overwrite)?;
    write_resolved(out, &cfg, "sweep-lambda")?;
    let arms: Vec<(String, ExperimentConfig)> = cfg
        .ablation
        .lambda_grid
        .iter()
        .map(|&l| {
            let mut c = cfg.clone();
            c.train.lambda = l;
            (format!("lambda={l}"), c)
        })
        .collect();
    let per_seed = paired_runs(&cfg, &arms, &out.join("lambda_sweep_seeds.csv"))?;
    let rows: Vec<SweepRow> = arms
        .iter()
        .zip(&cfg.ablation.lambda_grid)
        .map(|((label, _), &lambda)| {
            let rs: Vec<&SeedResult> = per_seed.iter().filter(|r| &r.label == label).collect();
            let rt = |r: &SeedResult| r.result.report.return_time.mean;
            let m = mean_of(&rs, rt);
            let sd = if rs.len() > 1 {
                (rs.iter().map(|r| (rt(r) - m).powi(2)).sum::<f64>() / (rs.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            SweepRow {
                lambda,
                return_time: m,
                return_time_sd: sd,
                click_rate: mean_of(&rs, |r| r.result.report.click_rate.mean),
                long_view_rate: mean_of(&rs, |r| r.result.report.long_view_rate.mean),
                like_rate: mean_of(&rs, |r| r.result.report.like_rate.mean),
                novelty: mean_of(&rs, |r| r.result.report.novelty.mean),
                diversity: mean_of(&rs, |r| r.result.diversity),
            }
        })
        .collect();
    let report = SweepReport {
        seeds: cfg.run_seeds(),
        rows,
        per_seed,
    };
    let mut csv = format!("{SWEEP_HEADER}\n");
    for r in &report.rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    write(&out.join("lambda_sweep.csv"), csv)?;
    if cfg.report.wants("json") {
        write(&out.join("lambda_sweep.json"), json(&report))?;
    }
    Ok(report)
}
