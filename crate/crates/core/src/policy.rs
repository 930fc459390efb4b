//! Shared state encoder plus one action predictor per expert level.
//!
//! The encoder is a two-layer ReLU MLP `state_dim -> hidden -> hidden`. Each
//! predictor is `hidden -> hidden (ReLU) -> output`, where the output is either
//! an action embedding (continuous head) or class logits turned into a softmax
//! distribution (discrete head). Levels are numbered from 1, level 1 being the
//! highest-retention experts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::{Matrix, NumError};

pub const CHECKPOINT_FORMAT: &str = "sec-policy/1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("{op} needs a {expected:?} head, predictor is {got:?}")]
    WrongHead {
        op: &'static str,
        expected: HeadKind,
        got: HeadKind,
    },
    #[error("level {level} out of range 1..={levels}")]
    LevelOutOfRange { level: usize, levels: usize },
    #[error("backward called without a recorded forward pass")]
    NoForwardCache,
    #[error("invalid policy shape: {0}")]
    InvalidShape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Continuous,
    Discrete,
}

/// Affine layer `y = x · weight + bias`, weight is `in × out`, bias `1 × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: Matrix::zeros(1, output),
        }
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        Self {
            weight: Matrix::from_fn(input, output, |_, _| rng.random_range(-limit..=limit)),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix, NumError> {
        let mut y = x.matmul(&self.weight)?;
        let b = self.bias.data();
        for i in 0..y.rows() {
            for (v, bj) in y.row_mut(i).iter_mut().zip(b) {
                *v += bj;
            }
        }
        Ok(y)
    }

    /// Returns the input gradient and writes parameter gradients into `grad`.
    fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Dense) -> Result<Matrix, NumError> {
        grad.weight.add_scaled(&x.t_matmul(dy)?, 1.0)?;
        grad.bias.add_scaled(&dy.column_sums(), 1.0)?;
        dy.matmul_t(&self.weight)
    }

    fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<Dense>,
}

impl EncoderParams {
    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    pub kind: HeadKind,
    pub hidden: Dense,
    pub output: Dense,
}

/// Static description of a policy network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub state_dim: usize,
    pub hidden_dim: usize,
    /// Action embedding dimension (continuous) or class count (discrete).
    pub output_dim: usize,
    pub levels: usize,
    pub head: HeadKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub encoder: EncoderParams,
    pub predictors: Vec<PredictorParams>,
}

impl PolicyParams {
    pub fn init(shape: PolicyShape, seed: u64) -> Result<Self, PolicyError> {
        if shape.levels == 0 || shape.state_dim == 0 || shape.hidden_dim == 0 || shape.output_dim == 0 {
            return Err(PolicyError::InvalidShape(format!("{shape:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = shape.hidden_dim;
        let encoder = EncoderParams {
            layers: vec![
                Dense::glorot(shape.state_dim, h, &mut rng),
                Dense::glorot(h, h, &mut rng),
            ],
        };
        let predictors = (0..shape.levels)
            .map(|_| PredictorParams {
                kind: shape.head,
                hidden: Dense::glorot(h, h, &mut rng),
                output: Dense::glorot(h, shape.output_dim, &mut rng),
            })
            .collect();
        Ok(Self {
            encoder,
            predictors,
        })
    }

    pub fn shape(&self) -> PolicyShape {
        let p = &self.predictors[0];
        PolicyShape {
            state_dim: self.encoder.input_dim(),
            hidden_dim: self.encoder.output_dim(),
            output_dim: p.output.output_dim(),
            levels: self.predictors.len(),
            head: p.kind,
        }
    }

    pub fn levels(&self) -> usize {
        self.predictors.len()
    }

    pub fn head(&self) -> HeadKind {
        self.predictors[0].kind
    }

    /// Checks layer chaining, head uniformity and finiteness.
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::InvalidShape(m));
        if self.encoder.layers.len() != 2 {
            return bad(format!("encoder has {} layers, expected 2", self.encoder.layers.len()));
        }
        if self.predictors.is_empty() {
            return bad("no predictors".into());
        }
        let mut dense: Vec<&Dense> = self.encoder.layers.iter().collect();
        for w in self.encoder.layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return bad("encoder layers do not chain".into());
            }
        }
        let h = self.encoder.output_dim();
        let kind = self.predictors[0].kind;
        let out = self.predictors[0].output.output_dim();
        for (k, p) in self.predictors.iter().enumerate() {
            if p.kind != kind {
                return bad(format!("predictor {} has head {:?}, expected {kind:?}", k + 1, p.kind));
            }
            if p.hidden.input_dim() != h || p.hidden.output_dim() != p.output.input_dim() {
                return bad(format!("predictor {} does not chain from hidden dim {h}", k + 1));
            }
            if p.output.output_dim() != out {
                return bad(format!("predictor {} output dim differs", k + 1));
            }
            dense.push(&p.hidden);
            dense.push(&p.output);
        }
        for d in dense {
            if d.bias.rows() != 1 || d.bias.cols() != d.output_dim() {
                return bad("bias shape".into());
            }
            if !d.is_finite() {
                return Err(NumError::NonFinite("policy parameters").into());
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let z = |d: &Dense| Dense::zeros(d.input_dim(), d.output_dim());
        Self {
            encoder: EncoderParams {
                layers: self.encoder.layers.iter().map(z).collect(),
            },
            predictors: self
                .predictors
                .iter()
                .map(|p| PredictorParams {
                    kind: p.kind,
                    hidden: z(&p.hidden),
                    output: z(&p.output),
                })
                .collect(),
        }
    }

    /// Every parameter tensor in a fixed order: encoder layers, then each predictor.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut v = Vec::new();
        for l in &self.encoder.layers {
            v.push(&l.weight);
            v.push(&l.bias);
        }
        for p in &self.predictors {
            v.extend([&p.hidden.weight, &p.hidden.bias, &p.output.weight, &p.output.bias]);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = Vec::new();
        for l in &mut self.encoder.layers {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        for p in &mut self.predictors {
            v.push(&mut p.hidden.weight);
            v.push(&mut p.hidden.bias);
            v.push(&mut p.output.weight);
            v.push(&mut p.output.bias);
        }
        v
    }

    pub fn predictor(&self, level: usize) -> Result<&PredictorParams, PolicyError> {
        if level == 0 || level > self.predictors.len() {
            return Err(PolicyError::LevelOutOfRange {
                level,
                levels: self.predictors.len(),
            });
        }
        Ok(&self.predictors[level - 1])
    }

    /// Forward pass for one level, recording activations into `tape`.
    /// Returns actions (continuous) or row-wise class probabilities (discrete).
    pub fn forward(&self, states: &Matrix, level: usize, tape: &mut Tape) -> Result<Matrix, PolicyError> {
        let pred = self.predictor(level)?;
        check_input(&self.encoder, states)?;
        let l0 = &self.encoder.layers[0];
        let l1 = &self.encoder.layers[1];
        let pre0 = l0.forward(states)?;
        let act0 = relu(&pre0);
        let pre1 = l1.forward(&act0)?;
        let h = relu(&pre1);
        let pre2 = pred.hidden.forward(&h)?;
        let act2 = relu(&pre2);
        let raw = pred.output.forward(&act2)?;
        let out = match pred.kind {
            HeadKind::Continuous => raw.clone(),
            HeadKind::Discrete => softmax_rows(&raw),
        };
        tape.record = Some(Record {
            level,
            input: states.clone(),
            pre: [pre0, pre1, pre2],
            act: [act0, h, act2],
            output: out.clone(),
        });
        Ok(out)
    }

    /// Backpropagates `grad_out` through the recorded pass.
    ///
    /// `grad_out` is the loss gradient at the actions for a continuous head and
    /// at the logits for a discrete head. The returned gradient set has the
    /// shape of `self`; predictors other than the recorded level are zero.
    pub fn backward(&self, tape: &Tape, grad_out: &Matrix) -> Result<PolicyParams, PolicyError> {
        let rec = tape.record.as_ref().ok_or(PolicyError::NoForwardCache)?;
        let pred = self.predictor(rec.level)?;
        if grad_out.shape() != rec.output.shape() {
            return Err(NumError::ShapeMismatch {
                op: "backward",
                left: grad_out.shape(),
                right: rec.output.shape(),
            }
            .into());
        }
        let mut grads = self.zeros_like();
        let k = rec.level - 1;
        let [pre0, pre1, pre2] = &rec.pre;
        let [act0, h, act2] = &rec.act;

        let gp = &mut grads.predictors[k];
        let d_act2 = pred.output.backward(act2, grad_out, &mut gp.output)?;
        let d_pre2 = relu_backward(pre2, &d_act2);
        let d_h = pred.hidden.backward(h, &d_pre2, &mut gp.hidden)?;

        let (g0, g1) = grads.encoder.layers.split_at_mut(1);
        let d_pre1 = relu_backward(pre1, &d_h);
        let d_act0 = self.encoder.layers[1].backward(act0, &d_pre1, &mut g1[0])?;
        let d_pre0 = relu_backward(pre0, &d_act0);
        self.encoder.layers[0].backward(&rec.input, &d_pre0, &mut g0[0])?;
        Ok(grads)
    }

    pub fn to_checkpoint_json(&self) -> String {
        let shape = self.shape();
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            shape,
            params: self.clone(),
        };
        serde_json::to_string_pretty(&ck).expect("policy parameters serialize")
    }

    pub fn from_checkpoint_json(s: &str) -> Result<Self, PolicyError> {
        let ck: Checkpoint = serde_json::from_str(s).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(PolicyError::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        ck.params.validate()?;
        if ck.params.shape() != ck.shape {
            return Err(PolicyError::Checkpoint(format!(
                "declared shape {:?} does not match parameters {:?}",
                ck.shape,
                ck.params.shape()
            )));
        }
        Ok(ck.params)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    shape: PolicyShape,
    params: PolicyParams,
}

/// Activations of the most recent forward pass, consumed by [`PolicyParams::backward`].
#[derive(Debug, Default, Clone)]
pub struct Tape {
    record: Option<Record>,
}

#[derive(Debug, Clone)]
struct Record {
    level: usize,
    input: Matrix,
    pre: [Matrix; 3],
    act: [Matrix; 3],
    output: Matrix,
}

impl Tape {
    pub fn level(&self) -> Option<usize> {
        self.record.as_ref().map(|r| r.level)
    }

    pub fn clear(&mut self) {
        self.record = None;
    }
}

fn check_input(enc: &EncoderParams, states: &Matrix) -> Result<(), PolicyError> {
    if states.cols() != enc.input_dim() {
        return Err(NumError::ShapeMismatch {
            op: "encode",
            left: states.shape(),
            right: enc.layers[0].weight.shape(),
        }
        .into());
    }
    Ok(())
}

pub fn relu(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

fn relu_backward(pre: &Matrix, d_act: &Matrix) -> Matrix {
    let mut d = d_act.clone();
    for (g, &p) in d.data_mut().iter_mut().zip(pre.data()) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
    d
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    p
}

/// Maps a gradient at softmax outputs to a gradient at the logits:
/// `g_logit[i] = p[i] · (g[i] − Σ_j p[j] g[j])`.
pub fn softmax_backward(probs: &Matrix, grad_probs: &Matrix) -> Result<Matrix, NumError> {
    if probs.shape() != grad_probs.shape() {
        return Err(NumError::ShapeMismatch {
            op: "softmax_backward",
            left: probs.shape(),
            right: grad_probs.shape(),
        });
    }
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let g = grad_probs.row(i);
        let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for (o, (pj, gj)) in out.row_mut(i).iter_mut().zip(p.iter().zip(g)) {
            *o = pj * (gj - inner);
        }
    }
    Ok(out)
}

/// Shared encoder forward pass, `B × state_dim -> B × hidden`.
pub fn encode(params: &EncoderParams, states: &Matrix) -> Result<Matrix, PolicyError> {
    check_input(params, states)?;
    let mut x = states.clone();
    for layer in &params.layers {
        x = relu(&layer.forward(&x)?);
    }
    Ok(x)
}

fn head_logits(params: &PredictorParams, h: &Matrix) -> Result<Matrix, PolicyError> {
    if h.cols() != params.hidden.input_dim() {
        return Err(NumError::ShapeMismatch {
            op: "predict",
            left: h.shape(),
            right: params.hidden.weight.shape(),
        }
        .into());
    }
    let z = relu(&params.hidden.forward(h)?);
    Ok(params.output.forward(&z)?)
}

pub fn predict_continuous(params: &PredictorParams, h: &Matrix) -> Result<Matrix, PolicyError> {
    if params.kind != HeadKind::Continuous {
        return Err(PolicyError::WrongHead {
            op: "predict_continuous",
            expected: HeadKind::Continuous,
            got: params.kind,
        });
    }
    head_logits(params, h)
}

pub fn predict_discrete(params: &PredictorParams, h: &Matrix) -> Result<Matrix, PolicyError> {
    if params.kind != HeadKind::Discrete {
        return Err(PolicyError::WrongHead {
            op: "predict_discrete",
            expected: HeadKind::Discrete,
            got: params.kind,
        });
    }
    Ok(softmax_rows(&head_logits(params, h)?))
}

/// Inference through the encoder and the given level's head.
pub fn infer(params: &PolicyParams, states: &Matrix, level: usize) -> Result<Matrix, PolicyError> {
    let h = encode(&params.encoder, states)?;
    let pred = params.predictor(level)?;
    match pred.kind {
        HeadKind::Continuous => predict_continuous(pred, &h),
        HeadKind::Discrete => predict_discrete(pred, &h),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(head: HeadKind) -> PolicyShape {
        PolicyShape {
            state_dim: 5,
            hidden_dim: 6,
            output_dim: 4,
            levels: 3,
            head,
        }
    }

    fn random_states(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Straight-line forward pass written without the layer helpers.
    fn naive_mlp(layers: &[&Dense], x: &[f64], relu_last: bool) -> Vec<f64> {
        let mut v = x.to_vec();
        for (n, l) in layers.iter().enumerate() {
            let mut out = vec![0.0; l.output_dim()];
            for (j, o) in out.iter_mut().enumerate() {
                let mut s = l.bias.get(0, j);
                for (i, xi) in v.iter().enumerate() {
                    s += xi * l.weight.get(i, j);
                }
                *o = if n + 1 < layers.len() || relu_last { s.max(0.0) } else { s };
            }
            v = out;
        }
        v
    }

    #[test]
    fn zero_network_gives_zero_output() {
        let p = PolicyParams::init(shape(HeadKind::Continuous), 1).unwrap().zeros_like();
        let x = random_states(3, 5, 2);
        let h = encode(&p.encoder, &x).unwrap();
        assert_eq!(h, Matrix::zeros(3, 6));
        assert_eq!(predict_continuous(&p.predictors[0], &h).unwrap(), Matrix::zeros(3, 4));
    }

    #[test]
    fn identity_path_passes_positive_input() {
        let n = 4;
        let eye = || Dense {
            weight: Matrix::identity(n),
            bias: Matrix::zeros(1, n),
        };
        let enc = EncoderParams {
            layers: vec![eye(), eye()],
        };
        let x = Matrix::from_fn(2, n, |i, j| 0.5 + (i * n + j) as f64);
        assert_eq!(encode(&enc, &x).unwrap(), x);
        let pred = PredictorParams {
            kind: HeadKind::Continuous,
            hidden: eye(),
            output: eye(),
        };
        assert_eq!(predict_continuous(&pred, &x).unwrap(), x);
    }

    #[test]
    fn forward_matches_naive_implementation() {
        let p = PolicyParams::init(shape(HeadKind::Continuous), 3).unwrap();
        let x = random_states(4, 5, 4);
        let h = encode(&p.encoder, &x).unwrap();
        let a = predict_continuous(&p.predictors[1], &h).unwrap();
        let enc: Vec<&Dense> = p.encoder.layers.iter().collect();
        let head = [&p.predictors[1].hidden, &p.predictors[1].output];
        for i in 0..4 {
            let hi = naive_mlp(&enc, x.row(i), true);
            let ai = naive_mlp(&head, &hi, false);
            for (u, v) in h.row(i).iter().zip(&hi) {
                assert!((u - v).abs() < 1e-14);
            }
            for (u, v) in a.row(i).iter().zip(&ai) {
                assert!((u - v).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_rows(&Matrix::zeros(2, 4));
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let logits = Matrix::from_rows(&[vec![1000.0, 0.0, 0.0]]).unwrap();
        let p = softmax_rows(&logits);
        assert!((p.get(0, 0) - 1.0).abs() < 1e-9 && p.get(0, 1) < 1e-9);

        let logits = random_states(3, 5, 9).scale(4.0);
        let p = softmax_rows(&logits);
        for i in 0..3 {
            let row = logits.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..5 {
                assert!((p.get(i, j) - (row[j] - m).exp() / z).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn head_kind_is_enforced() {
        let p = PolicyParams::init(shape(HeadKind::Discrete), 1).unwrap();
        let h = Matrix::zeros(1, 6);
        assert!(matches!(
            predict_continuous(&p.predictors[0], &h),
            Err(PolicyError::WrongHead { .. })
        ));
        let p = PolicyParams::init(shape(HeadKind::Continuous), 1).unwrap();
        assert!(matches!(
            predict_discrete(&p.predictors[0], &h),
            Err(PolicyError::WrongHead { .. })
        ));
    }

    #[test]
    fn state_dim_mismatch_rejected() {
        let p = PolicyParams::init(shape(HeadKind::Continuous), 1).unwrap();
        assert!(encode(&p.encoder, &Matrix::zeros(2, 3)).is_err());
        assert!(p.forward(&Matrix::zeros(2, 3), 1, &mut Tape::default()).is_err());
        assert!(matches!(
            p.forward(&Matrix::zeros(2, 5), 4, &mut Tape::default()),
            Err(PolicyError::LevelOutOfRange { level: 4, levels: 3 })
        ));
    }

    #[test]
    fn backward_without_forward_is_rejected() {
        let p = PolicyParams::init(shape(HeadKind::Continuous), 1).unwrap();
        assert_eq!(
            p.backward(&Tape::default(), &Matrix::zeros(1, 4)),
            Err(PolicyError::NoForwardCache)
        );
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let p = PolicyParams::init(shape(HeadKind::Continuous), 1).unwrap();
        let mut tape = Tape::default();
        p.forward(&random_states(3, 5, 1), 2, &mut tape).unwrap();
        let g = p.backward(&tape, &Matrix::zeros(3, 4)).unwrap();
        assert!(g.tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn scalar_network_gradient_by_hand() {
        // y = w3 relu(w2 relu(w1 relu? ...)) collapsed to one unit per layer
        let d = |w: f64, b: f64| Dense {
            weight: Matrix::new(1, 1, vec![w]).unwrap(),
            bias: Matrix::new(1, 1, vec![b]).unwrap(),
        };
        let p = PolicyParams {
            encoder: EncoderParams {
                layers: vec![d(2.0, 0.5), d(3.0, 0.0)],
            },
            predictors: vec![PredictorParams {
                kind: HeadKind::Continuous,
                hidden: d(0.5, 0.0),
                output: d(4.0, 1.0),
            }],
        };
        let x = Matrix::new(1, 1, vec![1.5]).unwrap();
        let mut tape = Tape::default();
        let y = p.forward(&x, 1, &mut tape).unwrap();
        // a0 = 3.5, h = 10.5, a2 = 5.25, y = 22
        assert_eq!(y.get(0, 0), 22.0);
        let g = p.backward(&tape, &Matrix::new(1, 1, vec![1.0]).unwrap()).unwrap();
        // dy/dw1 = x * w2 * w3 * w4 = 1.5 * 3 * 0.5 * 4
        assert_eq!(g.encoder.layers[0].weight.get(0, 0), 9.0);
        assert_eq!(g.encoder.layers[0].bias.get(0, 0), 6.0);
        assert_eq!(g.predictors[0].output.weight.get(0, 0), 5.25);
    }

    fn param_fd_check(head: HeadKind, seed: u64) {
        let p = PolicyParams::init(shape(head), seed).unwrap();
        let x = random_states(4, 5, seed + 100);
        let r = random_states(4, 4, seed + 200);
        let level = 2;
        let loss = |q: &PolicyParams| -> f64 {
            let out = q.forward(&x, level, &mut Tape::default()).unwrap();
            out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let mut tape = Tape::default();
        let out = p.forward(&x, level, &mut tape).unwrap();
        let upstream = match head {
            HeadKind::Continuous => r.clone(),
            HeadKind::Discrete => softmax_backward(&out, &r).unwrap(),
        };
        let g = p.backward(&tape, &upstream).unwrap();
        let h = 1e-5;
        let n = p.tensors().len();
        for t in 0..n {
            for e in 0..p.tensors()[t].data().len() {
                let mut plus = p.clone();
                plus.tensors_mut()[t].data_mut()[e] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[t].data_mut()[e] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = g.tensors()[t].data()[e];
                assert!((fd - an).abs() < 1e-4, "tensor {t} entry {e}: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn continuous_backward_matches_finite_differences() {
        param_fd_check(HeadKind::Continuous, 5);
    }

    #[test]
    fn discrete_backward_matches_finite_differences() {
        param_fd_check(HeadKind::Discrete, 6);
    }

    #[test]
    fn other_levels_get_zero_gradient() {
        let p = PolicyParams::init(shape(HeadKind::Continuous), 8).unwrap();
        let mut tape = Tape::default();
        p.forward(&random_states(3, 5, 1), 3, &mut tape).unwrap();
        let g = p.backward(&tape, &random_states(3, 4, 2)).unwrap();
        for k in [0, 1] {
            let q = &g.predictors[k];
            for t in [&q.hidden.weight, &q.hidden.bias, &q.output.weight, &q.output.bias] {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
        assert!(g.predictors[2].output.weight.data().iter().any(|&v| v != 0.0));
        assert!(g.encoder.layers[0].weight.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        for head in [HeadKind::Continuous, HeadKind::Discrete] {
            let p = PolicyParams::init(shape(head), 17).unwrap();
            let a = p.to_checkpoint_json();
            let q = PolicyParams::from_checkpoint_json(&a).unwrap();
            assert_eq!(q, p);
            assert_eq!(q.to_checkpoint_json(), a);
        }
    }

    #[test]
    fn checkpoint_rejects_broken_shapes() {
        let p = PolicyParams::init(shape(HeadKind::Continuous), 17).unwrap();
        let mut q = p.clone();
        q.predictors[1].hidden = Dense::zeros(7, 6);
        let text = serde_json::to_string(&Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            shape: p.shape(),
            params: q,
        })
        .unwrap();
        assert!(PolicyParams::from_checkpoint_json(&text).is_err());
        assert!(PolicyParams::from_checkpoint_json("{}").is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let p = PolicyParams::init(shape(HeadKind::Discrete), 2).unwrap();
        let x = random_states(8, 5, 3);
        let a = infer(&p, &x, 1).unwrap();
        let b = infer(&p, &x, 1).unwrap();
        assert_eq!(a.data(), b.data());
        for i in 0..8 {
            let s: f64 = a.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
