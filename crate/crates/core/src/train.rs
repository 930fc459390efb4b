//! Leveled behavior cloning with action-entropy regularization, optimized by Adam.
//!
//! The objective is `Σ_k (bc_k + λ · aer_k)` over the expert levels. Every loss
//! is a batch mean except the continuous regularizer, which is the (negated)
//! nuclear norm of the whole action batch.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::{nuclear_norm_grad_from, svd, Matrix, NumError};
use crate::policy::{softmax_backward, HeadKind, PolicyError, PolicyParams, PolicyShape, Tape};
use crate::rng;
use crate::stratify::{ActionTargets, LeveledDataset};

/// Probabilities are clamped below at this value before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
/// Diagonal jitter added to a rank-deficient action batch before differentiating.
pub const RANK_JITTER: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("target class {index} out of range for {classes} classes")]
    TargetOutOfRange { index: usize, classes: usize },
    #[error("action regularizer needs a batch of at least 2 rows, got {rows}")]
    BatchTooSmall { rows: usize },
    #[error("action batch stays rank deficient after jitter")]
    DegenerateActions,
    #[error("non-finite gradient; optimizer step aborted")]
    NonFiniteGradient,
    #[error("level {level} has no training pairs")]
    EmptyLevel { level: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub seed: u64,
    pub action_kind: HeadKind,
    pub hidden_dim: usize,
    /// Class count for the discrete head.
    pub n_classes: usize,
    /// Pairs per level (taken in dataset order) used for the per-epoch loss log.
    pub probe_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            batch_size: 128,
            learning_rate: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 20,
            seed: 0,
            action_kind: HeadKind::Continuous,
            hidden_dim: 32,
            n_classes: 32,
            probe_pairs: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be finite and >= 0");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and >= 0");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0");
        }
        if self.hidden_dim == 0 || self.probe_pairs < 2 {
            return bad("hidden_dim must be >= 1 and probe_pairs >= 2");
        }
        Ok(())
    }
}

/// Mean over the batch of the squared Euclidean distance; gradient `2(pred − target)/B`.
pub fn bc_loss_continuous(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix), TrainError> {
    let diff = pred.sub(target)?;
    let b = pred.rows().max(1) as f64;
    let loss = diff.data().iter().map(|v| v * v).sum::<f64>() / b;
    Ok((loss, diff.scale(2.0 / b)))
}

/// Mean cross-entropy; the gradient is taken at the logits, `(probs − onehot)/B`.
pub fn bc_loss_discrete(probs: &Matrix, targets: &[usize]) -> Result<(f64, Matrix), TrainError> {
    if targets.len() != probs.rows() {
        return Err(NumError::ShapeMismatch {
            op: "bc_loss_discrete",
            left: probs.shape(),
            right: (targets.len(), 1),
        }
        .into());
    }
    let classes = probs.cols();
    let b = probs.rows().max(1) as f64;
    let mut grad = probs.scale(1.0 / b);
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(TrainError::TargetOutOfRange { index: t, classes });
        }
        loss -= probs.get(i, t).max(PROB_FLOOR).ln();
        let g = grad.get(i, t) - 1.0 / b;
        grad.set(i, t, g);
    }
    Ok((loss / b, grad))
}

/// Negative nuclear norm of the action batch; gradient `−U·Vᵀ`.
///
/// A rank-deficient batch is nudged by [`RANK_JITTER`] on its diagonal before
/// the gradient is taken; the reported loss is always that of the input.
pub fn aer_loss_continuous(actions: &Matrix) -> Result<(f64, Matrix), TrainError> {
    if actions.rows() < 2 {
        return Err(TrainError::BatchTooSmall { rows: actions.rows() });
    }
    let d = svd(actions)?;
    let loss = -d.singular_values.iter().sum::<f64>();
    let grad = match nuclear_norm_grad_from(&d) {
        Ok(g) => g,
        Err(NumError::RankDeficient { .. }) => {
            let mut jittered = actions.clone();
            jittered.add_scaled(&Matrix::eye(actions.rows(), actions.cols()), RANK_JITTER)?;
            nuclear_norm_grad_from(&svd(&jittered)?).map_err(|_| TrainError::DegenerateActions)?
        }
        Err(e) => return Err(e.into()),
    };
    Ok((loss, grad.scale(-1.0)))
}

/// Negative entropy of the batch-mean class distribution `p̄`; the gradient is
/// taken at the probabilities, `(log p̄_j + 1)/B`.
pub fn aer_loss_discrete(probs: &Matrix) -> Result<(f64, Matrix), TrainError> {
    if probs.rows() == 0 {
        return Err(TrainError::BatchTooSmall { rows: 0 });
    }
    let b = probs.rows() as f64;
    let mean: Vec<f64> = probs.column_sums().data().iter().map(|s| s / b).collect();
    let loss = mean.iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }).sum();
    let col_grad: Vec<f64> = mean.iter().map(|&p| (p.max(PROB_FLOOR).ln() + 1.0) / b).collect();
    let grad = Matrix::from_fn(probs.rows(), probs.cols(), |_, j| col_grad[j]);
    Ok((loss, grad))
}

/// Entropy of the batch-mean class distribution.
pub fn batch_mean_entropy(probs: &Matrix) -> f64 {
    aer_loss_discrete(probs).map_or(0.0, |(l, _)| -l)
}

/// States and expert actions of one level's minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelBatch {
    pub states: Matrix,
    pub targets: ActionTargets,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelLoss {
    pub bc: f64,
    pub aer: f64,
    pub total: f64,
    pub grad_norm: f64,
    /// The level had no batch for this step and did not contribute.
    pub skipped: bool,
}

impl LevelLoss {
    const SKIPPED: LevelLoss = LevelLoss {
        bc: 0.0,
        aer: 0.0,
        total: 0.0,
        grad_norm: 0.0,
        skipped: true,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub lambda: f64,
    pub levels: Vec<LevelLoss>,
    pub total: f64,
}

fn grad_norm(g: &PolicyParams) -> f64 {
    g.tensors()
        .iter()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Loss and output gradient for one level batch, without touching the network.
fn head_loss(out: &Matrix, targets: &ActionTargets, head: HeadKind, lambda: f64) -> Result<(f64, f64, Matrix), TrainError> {
    match (head, targets) {
        (HeadKind::Continuous, ActionTargets::Continuous(t)) => {
            let (bc, mut g) = bc_loss_continuous(out, t)?;
            let mut aer = 0.0;
            if lambda > 0.0 {
                let (a, ga) = aer_loss_continuous(out)?;
                aer = a;
                g.add_scaled(&ga, lambda)?;
            }
            Ok((bc, aer, g))
        }
        (HeadKind::Discrete, ActionTargets::Discrete(t)) => {
            let (bc, mut g) = bc_loss_discrete(out, t)?;
            let mut aer = 0.0;
            if lambda > 0.0 {
                let (a, gp) = aer_loss_discrete(out)?;
                aer = a;
                g.add_scaled(&softmax_backward(out, &gp)?, lambda)?;
            }
            Ok((bc, aer, g))
        }
        _ => Err(TrainError::InvalidConfig("action targets do not match the policy head".into())),
    }
}

/// Computes every level's losses and one summed gradient set.
///
/// Encoder gradients are summed over levels in ascending level order; each
/// predictor receives the gradient of its own level only. A level without a
/// batch is flagged as skipped. With `λ = 0` the regularizer is disabled and
/// its loss is reported as zero.
pub fn total_loss(
    policy: &PolicyParams,
    batches: &[Option<LevelBatch>],
    cfg: &TrainConfig,
) -> Result<(LossReport, PolicyParams), TrainError> {
    if batches.len() != policy.levels() {
        return Err(TrainError::InvalidConfig(format!(
            "{} level batches for {} levels",
            batches.len(),
            policy.levels()
        )));
    }
    let mut grads = policy.zeros_like();
    let mut levels = Vec::with_capacity(batches.len());
    let mut total = 0.0;
    let mut tape = Tape::default();
    for (k, batch) in batches.iter().enumerate() {
        let Some(batch) = batch else {
            levels.push(LevelLoss::SKIPPED);
            continue;
        };
        let out = policy.forward(&batch.states, k + 1, &mut tape)?;
        let (bc, aer, g_out) = head_loss(&out, &batch.targets, policy.head(), cfg.lambda)?;
        let g = policy.backward(&tape, &g_out)?;
        let lt = bc + cfg.lambda * aer;
        total += lt;
        levels.push(LevelLoss {
            bc,
            aer,
            total: lt,
            grad_norm: grad_norm(&g),
            skipped: false,
        });
        for (acc, part) in grads.tensors_mut().into_iter().zip(g.tensors()) {
            acc.add_scaled(part, 1.0)?;
        }
    }
    Ok((
        LossReport {
            lambda: cfg.lambda,
            levels,
            total,
        },
        grads,
    ))
}

/// Anything Adam can update: a fixed, ordered list of tensors.
pub trait ParamSet: Clone {
    fn tensors(&self) -> Vec<&Matrix>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;

    fn zeroed(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }
}

impl ParamSet for PolicyParams {
    fn tensors(&self) -> Vec<&Matrix> {
        PolicyParams::tensors(self)
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        PolicyParams::tensors_mut(self)
    }
}

impl ParamSet for Vec<Matrix> {
    fn tensors(&self) -> Vec<&Matrix> {
        self.iter().collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.iter_mut().collect()
    }
}

/// First and second moment estimates plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<P> {
    pub m: P,
    pub v: P,
    pub t: u64,
}

impl<P: ParamSet> AdamState<P> {
    pub fn new(params: &P) -> Self {
        Self {
            m: params.zeroed(),
            v: params.zeroed(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts the step and
/// leaves both parameters and state untouched.
pub fn adam_step<P: ParamSet>(params: &mut P, grads: &P, state: &mut AdamState<P>, cfg: &TrainConfig) -> Result<(), TrainError> {
    if grads.tensors().iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient);
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = cfg.learning_rate;
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(ms).zip(vs) {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= lr * mh / (vh.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelEpoch {
    pub level: usize,
    pub bc_loss: f64,
    pub aer_loss: f64,
    pub total: f64,
    /// Mean gradient norm of this level's contribution over the epoch's steps.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub levels: Vec<LevelEpoch>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub lambda: f64,
    pub epochs: Vec<EpochReport>,
}

pub const LOG_HEADER: &str = "epoch,level,bc_loss,aer_loss,total,grad_norm";

impl TrainLog {
    /// CSV with one row per (epoch, level). Epoch 0 is the initialization.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for e in &self.epochs {
            for l in &e.levels {
                s.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    e.epoch, l.level, l.bc_loss, l.aer_loss, l.total, l.grad_norm
                ));
            }
        }
        s
    }

    pub fn final_epoch(&self) -> &EpochReport {
        self.epochs.last().expect("log always holds the initial epoch")
    }
}

/// Parses the rows written by [`TrainLog::to_csv`] as `(epoch, level row)`.
pub fn parse_log_csv(text: &str) -> Option<Vec<(usize, LevelEpoch)>> {
    let mut lines = text.lines();
    if lines.next()? != LOG_HEADER {
        return None;
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return None;
            }
            let n = |i: usize| f[i].parse::<f64>().ok();
            Some((
                f[0].parse().ok()?,
                LevelEpoch {
                    level: f[1].parse().ok()?,
                    bc_loss: n(2)?,
                    aer_loss: n(3)?,
                    total: n(4)?,
                    grad_norm: n(5)?,
                },
            ))
        })
        .collect()
}

/// Fixed-order probe batches of one level: the first `probe_pairs` pairs.
fn probe_batches(ds: &LeveledDataset, level: usize, cfg: &TrainConfig) -> Vec<LevelBatch> {
    let data = &ds.levels[level];
    let n = data.len().min(cfg.probe_pairs);
    let idx: Vec<usize> = (0..n).collect();
    idx.chunks(cfg.batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| LevelBatch {
            states: data.states.gather_rows(c),
            targets: data.actions.gather(c),
        })
        .collect()
}

/// Per-level losses on the fixed probe batches, without gradients.
pub fn probe_losses(policy: &PolicyParams, ds: &LeveledDataset, cfg: &TrainConfig) -> Result<Vec<LevelEpoch>, TrainError> {
    let mut out = Vec::with_capacity(ds.k());
    let mut tape = Tape::default();
    for k in 0..ds.k() {
        let batches = probe_batches(ds, k, cfg);
        let (mut bc, mut aer) = (0.0, 0.0);
        for b in &batches {
            let o = policy.forward(&b.states, k + 1, &mut tape)?;
            let (l_bc, l_aer, _) = head_loss(&o, &b.targets, policy.head(), cfg.lambda)?;
            bc += l_bc;
            aer += l_aer;
        }
        let n = batches.len().max(1) as f64;
        let (bc, aer) = (bc / n, aer / n);
        out.push(LevelEpoch {
            level: k + 1,
            bc_loss: bc,
            aer_loss: aer,
            total: bc + cfg.lambda * aer,
            grad_norm: 0.0,
        });
    }
    Ok(out)
}

/// Mean action diversity over every level's probe batches: the nuclear norm of
/// each predicted action batch (continuous) or the entropy of its batch-mean
/// class distribution (discrete).
pub fn action_diversity(policy: &PolicyParams, ds: &LeveledDataset, cfg: &TrainConfig) -> Result<f64, TrainError> {
    let (mut sum, mut n) = (0.0, 0usize);
    let mut tape = Tape::default();
    for k in 0..ds.k() {
        for b in probe_batches(ds, k, cfg) {
            let o = policy.forward(&b.states, k + 1, &mut tape)?;
            sum += match policy.head() {
                HeadKind::Continuous => svd(&o)?.singular_values.iter().sum::<f64>(),
                HeadKind::Discrete => batch_mean_entropy(&o),
            };
            n += 1;
        }
    }
    Ok(sum / n.max(1) as f64)
}

pub fn policy_shape(ds: &LeveledDataset, cfg: &TrainConfig) -> Result<PolicyShape, TrainError> {
    let output_dim = match (&ds.levels[0].actions, cfg.action_kind) {
        (ActionTargets::Continuous(m), HeadKind::Continuous) => m.cols(),
        (ActionTargets::Discrete(_), HeadKind::Discrete) => cfg.n_classes,
        _ => {
            return Err(TrainError::InvalidConfig(
                "dataset action kind does not match action_kind".into(),
            ))
        }
    };
    Ok(PolicyShape {
        state_dim: ds.state_dim(),
        hidden_dim: cfg.hidden_dim,
        output_dim,
        levels: ds.k(),
        head: cfg.action_kind,
    })
}

pub fn fit(ds: &LeveledDataset, cfg: &TrainConfig) -> Result<(PolicyParams, TrainLog), TrainError> {
    fit_with(ds, cfg, |_, _| {})
}

/// Trains from a fresh seeded initialization. `observe` sees the parameters
/// after initialization (epoch 0) and after every epoch.
///
/// Each epoch walks every level through its own seeded shuffle. Step `s` takes
/// batch `s` of every level that still has one, so levels advance in lockstep
/// and one Adam update covers the summed objective.
pub fn fit_with(
    ds: &LeveledDataset,
    cfg: &TrainConfig,
    mut observe: impl FnMut(usize, &PolicyParams),
) -> Result<(PolicyParams, TrainLog), TrainError> {
    cfg.validate()?;
    if ds.k() == 0 {
        return Err(TrainError::InvalidConfig("dataset has no levels".into()));
    }
    for (k, l) in ds.levels.iter().enumerate() {
        if l.is_empty() {
            return Err(TrainError::EmptyLevel { level: k + 1 });
        }
        if let ActionTargets::Discrete(t) = &l.actions {
            if let Some(&bad) = t.iter().find(|&&i| i >= cfg.n_classes) {
                return Err(TrainError::TargetOutOfRange {
                    index: bad,
                    classes: cfg.n_classes,
                });
            }
        }
    }
    let shape = policy_shape(ds, cfg)?;
    let mut params = PolicyParams::init(shape, cfg.seed)?;
    let mut adam = AdamState::new(&params);
    let mut shufflers: Vec<_> = (0..ds.k()).map(|k| rng::stream(cfg.seed, 1 + k as u64)).collect();
    let mut orders: Vec<Vec<usize>> = ds.levels.iter().map(|l| (0..l.len()).collect()).collect();

    let mut log = TrainLog {
        lambda: cfg.lambda,
        epochs: vec![EpochReport {
            epoch: 0,
            levels: probe_losses(&params, ds, cfg)?,
            steps: 0,
        }],
    };
    observe(0, &params);

    for epoch in 1..=cfg.epochs {
        for (order, r) in orders.iter_mut().zip(&mut shufflers) {
            order.shuffle(r);
        }
        let chunks: Vec<Vec<&[usize]>> = orders
            .iter()
            .map(|o| o.chunks(cfg.batch_size).filter(|c| c.len() >= 2).collect())
            .collect();
        let steps = chunks.iter().map(Vec::len).max().unwrap_or(0);
        let mut norm_sum = vec![0.0; ds.k()];
        let mut norm_n = vec![0usize; ds.k()];
        for s in 0..steps {
            let batches: Vec<Option<LevelBatch>> = chunks
                .iter()
                .zip(&ds.levels)
                .map(|(c, l)| {
                    c.get(s).map(|idx| LevelBatch {
                        states: l.states.gather_rows(idx),
                        targets: l.actions.gather(idx),
                    })
                })
                .collect();
            let (report, grads) = total_loss(&params, &batches, cfg)?;
            adam_step(&mut params, &grads, &mut adam, cfg)?;
            for (k, l) in report.levels.iter().enumerate() {
                if !l.skipped {
                    norm_sum[k] += l.grad_norm;
                    norm_n[k] += 1;
                }
            }
        }
        let mut levels = probe_losses(&params, ds, cfg)?;
        for (k, l) in levels.iter_mut().enumerate() {
            l.grad_norm = norm_sum[k] / norm_n[k].max(1) as f64;
        }
        log.epochs.push(EpochReport { epoch, levels, steps });
        observe(epoch, &params);
    }
    Ok((params, log))
}
