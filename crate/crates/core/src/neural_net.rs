//! Feedforward network with a heteroscedastic Gaussian output.
//!
//! A shared hidden trunk `h_l = act(W_l h_{l-1} + b_l)` feeds two linear heads: the mean
//! `mu = w_mu·h_L + b_mu` and a raw variance `r = w_v·h_L + b_v`, mapped to
//! `var = softplus(r) + VAR_FLOOR`. Everything operates on the normalized scale; only
//! [`predict_batch`] converts back to physical units.
//!
//! Activation constants:
//! - LeakyReLU negative slope 0.01
//! - ELU alpha 1.0
//! - SELU lambda 1.0507009873554804934, alpha 1.6732632423543772848
//! - GELU is the exact form `x·Phi(x)` with the erf-based normal CDF
//! - ReLU derivative at 0 is taken as 0
//!
//! Training uses Adam (beta1 0.9, beta2 0.999, eps 1e-8) with decoupled weight decay.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Normalizer, SplitDataset, FEATURE_COUNT};
use crate::rng::Prng;
use crate::stats::{normal_cdf, normal_pdf};

/// Lower bound added to every predicted variance (normalized scale).
pub const VAR_FLOOR: f64 = 1e-6;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_EPOCHS: usize = 300;
pub const DEFAULT_PATIENCE: usize = 30;
pub const MAX_DROPOUT: f64 = 0.3;

const LEAKY_SLOPE: f64 = 0.01;
const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),
    #[error("input dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("length mismatch: {left} predictions vs {right} targets")]
    LengthMismatch { left: usize, right: usize },
    #[error("non-positive variance at sample {0}")]
    NonPositiveVariance(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("loss became non-finite at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("non-finite input")]
    NonFiniteInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Activation {
    ReLU,
    LeakyReLU,
    GELU,
    SELU,
    ELU,
    Softplus,
}

impl Activation {
    pub const ALL: [Activation; 6] = [
        Activation::ReLU,
        Activation::LeakyReLU,
        Activation::GELU,
        Activation::SELU,
        Activation::ELU,
        Activation::Softplus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::ReLU => "ReLU",
            Activation::LeakyReLU => "LeakyReLU",
            Activation::GELU => "GELU",
            Activation::SELU => "SELU",
            Activation::ELU => "ELU",
            Activation::Softplus => "Softplus",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::ReLU => x.max(0.0),
            Activation::LeakyReLU => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::GELU => x * normal_cdf(x),
            Activation::SELU => {
                if x > 0.0 {
                    SELU_LAMBDA * x
                } else {
                    SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
                }
            }
            Activation::ELU => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Softplus => softplus(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::ReLU => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyReLU => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::GELU => normal_cdf(x) + x * normal_pdf(x),
            Activation::SELU => {
                if x > 0.0 {
                    SELU_LAMBDA
                } else {
                    SELU_LAMBDA * SELU_ALPHA * x.exp()
                }
            }
            Activation::ELU => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Activation::Softplus => sigmoid(x),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Activation::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown activation {s:?}"))
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub activation: Activation,
    pub dropout_rate: f64,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_dim == 0 {
            return Err(NetError::InvalidConfig("input_dim must be >= 1".into()));
        }
        if self.hidden_layers == 0 {
            return Err(NetError::InvalidConfig("hidden_layers must be >= 1".into()));
        }
        if self.hidden_units == 0 {
            return Err(NetError::InvalidConfig("hidden_units must be >= 1".into()));
        }
        if !(0.0..=MAX_DROPOUT).contains(&self.dropout_rate) {
            return Err(NetError::InvalidConfig(format!(
                "dropout_rate {} outside [0, {MAX_DROPOUT}]",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            batch_size: 128,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
            patience: DEFAULT_PATIENCE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(1e-4..=1e-2).contains(&self.learning_rate) {
            return Err(NetError::InvalidTrainConfig(format!(
                "learning_rate {} outside [1e-4, 1e-2]",
                self.learning_rate
            )));
        }
        if !(1e-4..=1e-2).contains(&self.weight_decay) {
            return Err(NetError::InvalidTrainConfig(format!(
                "weight_decay {} outside [1e-4, 1e-2]",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(NetError::InvalidTrainConfig("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(NetError::InvalidTrainConfig("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Dense affine map with row-major weights of shape (rows = out, cols = in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    fn affine(&self, input: &[f64], out: &mut [f64]) {
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &self.weights[o * self.cols..(o + 1) * self.cols];
            *out_v = self.bias[o] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// All weights and biases of one network. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub hidden: Vec<Dense>,
    pub mean_head: Dense,
    pub var_head: Dense,
}

impl Parameters {
    pub fn zeros(cfg: &MlpConfig) -> Self {
        let mut hidden = Vec::with_capacity(cfg.hidden_layers);
        let mut fan_in = cfg.input_dim;
        for _ in 0..cfg.hidden_layers {
            hidden.push(Dense::zeros(cfg.hidden_units, fan_in));
            fan_in = cfg.hidden_units;
        }
        Self {
            hidden,
            mean_head: Dense::zeros(1, cfg.hidden_units),
            var_head: Dense::zeros(1, cfg.hidden_units),
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.hidden
            .iter()
            .chain(std::iter::once(&self.mean_head))
            .chain(std::iter::once(&self.var_head))
    }

    /// Every parameter tensor, in a fixed order.
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|d| [d.weights.as_slice(), d.bias.as_slice()])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.mean_head))
            .chain(std::iter::once(&mut self.var_head))
            .flat_map(|d| [d.weights.as_mut_slice(), d.bias.as_mut_slice()])
            .collect()
    }

    pub fn count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.count(), "flat parameter length");
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&values[offset..offset + s.len()]);
            offset += s.len();
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn matches(&self, cfg: &MlpConfig) -> bool {
        let reference = Parameters::zeros(cfg);
        reference.hidden.len() == self.hidden.len()
            && reference
                .layers()
                .zip(self.layers())
                .all(|(a, b)| {
                    a.shape() == b.shape()
                        && b.weights.len() == b.rows * b.cols
                        && b.bias.len() == b.rows
                })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrediction {
    pub mu: f64,
    pub var: f64,
}

/// Forward-pass mode. Dropout masks are drawn only in training mode.
pub enum Mode<'a> {
    Inference,
    Train(&'a mut Prng),
}

/// He-scaled Gaussian weights (std = sqrt(2 / fan_in)) and zero biases.
pub fn init_params(cfg: &MlpConfig, seed: u64) -> Result<Parameters, NetError> {
    cfg.validate()?;
    let mut rng = Prng::new(seed);
    let mut p = Parameters::zeros(cfg);
    for layer in p
        .hidden
        .iter_mut()
        .chain(std::iter::once(&mut p.mean_head))
        .chain(std::iter::once(&mut p.var_head))
    {
        let std = (2.0 / layer.cols as f64).sqrt();
        for w in &mut layer.weights {
            *w = std * rng.normal();
        }
    }
    Ok(p)
}

struct Trace {
    /// activations[0] is the input; activations[l] the (masked) output of hidden layer l.
    activations: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    masks: Vec<Option<Vec<f64>>>,
    mu: f64,
    raw_var: f64,
    var: f64,
}

fn check_input(cfg: &MlpConfig, x: &[f64]) -> Result<(), NetError> {
    if x.len() != cfg.input_dim {
        return Err(NetError::DimensionMismatch {
            expected: cfg.input_dim,
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(NetError::NonFiniteInput);
    }
    Ok(())
}

fn forward_trace(p: &Parameters, cfg: &MlpConfig, x: &[f64], mode: &mut Mode<'_>) -> Trace {
    let mut activations = Vec::with_capacity(p.hidden.len() + 1);
    let mut pre = Vec::with_capacity(p.hidden.len());
    let mut masks = Vec::with_capacity(p.hidden.len());
    activations.push(x.to_vec());
    let keep = 1.0 - cfg.dropout_rate;
    for layer in &p.hidden {
        let mut z = vec![0.0; layer.rows];
        layer.affine(activations.last().unwrap(), &mut z);
        let mut h: Vec<f64> = z.iter().map(|&v| cfg.activation.apply(v)).collect();
        let mask = match mode {
            Mode::Train(rng) if cfg.dropout_rate > 0.0 => {
                let m: Vec<f64> = (0..h.len())
                    .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                h.iter_mut().zip(&m).for_each(|(v, s)| *v *= s);
                Some(m)
            }
            _ => None,
        };
        pre.push(z);
        masks.push(mask);
        activations.push(h);
    }
    let last = activations.last().unwrap();
    let mut mu = [0.0];
    let mut raw = [0.0];
    p.mean_head.affine(last, &mut mu);
    p.var_head.affine(last, &mut raw);
    Trace {
        activations,
        pre,
        masks,
        mu: mu[0],
        raw_var: raw[0],
        var: softplus(raw[0]) + VAR_FLOOR,
    }
}

/// Single-sample forward pass on the normalized scale.
pub fn forward(
    p: &Parameters,
    cfg: &MlpConfig,
    x: &[f64],
    mut mode: Mode<'_>,
) -> Result<GaussianPrediction, NetError> {
    check_input(cfg, x)?;
    let t = forward_trace(p, cfg, x, &mut mode);
    Ok(GaussianPrediction { mu: t.mu, var: t.var })
}

/// Mean over samples of (y - mu)² / (2 var) + ½ log var, without the constant term.
pub fn nll_loss(preds: &[GaussianPrediction], targets: &[f64]) -> Result<f64, NetError> {
    if preds.len() != targets.len() {
        return Err(NetError::LengthMismatch {
            left: preds.len(),
            right: targets.len(),
        });
    }
    if preds.is_empty() {
        return Err(NetError::EmptyBatch);
    }
    let mut total = 0.0;
    for (i, (p, y)) in preds.iter().zip(targets).enumerate() {
        if !(p.var > 0.0) {
            return Err(NetError::NonPositiveVariance(i));
        }
        let r = y - p.mu;
        total += r * r / (2.0 * p.var) + 0.5 * p.var.ln();
    }
    Ok(total / preds.len() as f64)
}

/// Loss and analytic parameter gradient for one batch.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub loss: f64,
    /// Gradient of the mean NLL alone.
    pub data: Parameters,
}

impl BatchGradient {
    /// Data gradient plus the decoupled decay term `weight_decay · θ`.
    pub fn with_decay(&self, params: &Parameters, weight_decay: f64) -> Parameters {
        let mut g = self.data.clone();
        for (gs, ps) in g.slices_mut().into_iter().zip(params.slices()) {
            gs.iter_mut().zip(ps).for_each(|(g, p)| *g += weight_decay * p);
        }
        g
    }
}

/// Backpropagates the mean NLL over a batch of (normalized input, normalized target).
pub fn backward(
    p: &Parameters,
    cfg: &MlpConfig,
    inputs: &[Vec<f64>],
    targets: &[f64],
    mut mode: Mode<'_>,
) -> Result<BatchGradient, NetError> {
    if inputs.len() != targets.len() {
        return Err(NetError::LengthMismatch {
            left: inputs.len(),
            right: targets.len(),
        });
    }
    if inputs.is_empty() {
        return Err(NetError::EmptyBatch);
    }
    for x in inputs {
        check_input(cfg, x)?;
    }
    let n = inputs.len() as f64;
    let mut grad = Parameters::zeros(cfg);
    let mut loss = 0.0;
    for (x, &y) in inputs.iter().zip(targets) {
        let t = forward_trace(p, cfg, x, &mut mode);
        let r = y - t.mu;
        loss += r * r / (2.0 * t.var) + 0.5 * t.var.ln();

        let d_mu = -r / t.var / n;
        let d_var = (0.5 / t.var - r * r / (2.0 * t.var * t.var)) / n;
        let d_raw = d_var * sigmoid(t.raw_var);

        let h_last = t.activations.last().unwrap();
        grad.mean_head.bias[0] += d_mu;
        grad.var_head.bias[0] += d_raw;
        let mut dh: Vec<f64> = vec![0.0; h_last.len()];
        for (j, &h) in h_last.iter().enumerate() {
            grad.mean_head.weights[j] += d_mu * h;
            grad.var_head.weights[j] += d_raw * h;
            dh[j] = d_mu * p.mean_head.weights[j] + d_raw * p.var_head.weights[j];
        }

        for l in (0..p.hidden.len()).rev() {
            let layer = &p.hidden[l];
            if let Some(mask) = &t.masks[l] {
                dh.iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
            }
            let dz: Vec<f64> = dh
                .iter()
                .zip(&t.pre[l])
                .map(|(d, &z)| d * cfg.activation.derivative(z))
                .collect();
            let h_prev = &t.activations[l];
            let g = &mut grad.hidden[l];
            let mut dh_prev = vec![0.0; layer.cols];
            for (o, &dzo) in dz.iter().enumerate() {
                if dzo == 0.0 {
                    continue;
                }
                g.bias[o] += dzo;
                let g_row = &mut g.weights[o * layer.cols..(o + 1) * layer.cols];
                let w_row = &layer.weights[o * layer.cols..(o + 1) * layer.cols];
                for i in 0..layer.cols {
                    g_row[i] += dzo * h_prev[i];
                    dh_prev[i] += dzo * w_row[i];
                }
            }
            dh = dh_prev;
        }
    }
    Ok(BatchGradient {
        loss: loss / n,
        data: grad,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub wall_time_secs: f64,
}

impl TrainHistory {
    pub fn epochs_run(&self) -> usize {
        self.val_loss.len()
    }

    pub fn best_val_loss(&self) -> f64 {
        self.val_loss[self.best_epoch]
    }

    /// Equality of everything except wall-clock time.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        self.train_loss == other.train_loss
            && self.val_loss == other.val_loss
            && self.best_epoch == other.best_epoch
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
    fn update(&mut self, params: &mut Parameters, grad: &Parameters, lr: f64, wd: f64) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step);
        let mut k = 0;
        for (ps, gs) in params.slices_mut().into_iter().zip(grad.slices()) {
            for (p, &g) in ps.iter_mut().zip(gs) {
                let m = &mut self.m[k];
                let v = &mut self.v[k];
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + wd * *p);
                k += 1;
            }
        }
    }
}

pub(crate) fn normalized_rows(
    ds: &crate::dataset::Dataset,
    norm: &Normalizer,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let x = ds
        .points
        .iter()
        .map(|p| norm.normalize_inputs(&p.inputs).to_vec())
        .collect();
    let y = ds
        .points
        .iter()
        .map(|p| norm.normalize_target(p.chf.expect("training data needs targets")))
        .collect();
    (x, y)
}

/// Mean NLL of a dataset in inference mode (normalized scale).
pub fn evaluate_nll(
    p: &Parameters,
    cfg: &MlpConfig,
    inputs: &[Vec<f64>],
    targets: &[f64],
) -> Result<f64, NetError> {
    let preds = inputs
        .iter()
        .map(|x| forward(p, cfg, x, Mode::Inference))
        .collect::<Result<Vec<_>, _>>()?;
    nll_loss(&preds, targets)
}

/// Mini-batch Adam with decoupled weight decay on the normalized NLL. The parameters
/// with the lowest validation NLL are returned; training stops once `patience` epochs
/// pass without improvement.
pub fn train(
    splits: &SplitDataset,
    normalizer: &Normalizer,
    mlp: &MlpConfig,
    tc: &TrainConfig,
) -> Result<(Parameters, TrainHistory), NetError> {
    mlp.validate()?;
    tc.validate()?;
    if mlp.input_dim != FEATURE_COUNT {
        return Err(NetError::DimensionMismatch {
            expected: FEATURE_COUNT,
            got: mlp.input_dim,
        });
    }
    if splits.train.is_empty() {
        return Err(NetError::EmptySplit("train"));
    }
    if splits.validation.is_empty() {
        return Err(NetError::EmptySplit("validation"));
    }
    let started = Instant::now();
    let (train_x, train_y) = normalized_rows(&splits.train, normalizer);
    let (val_x, val_y) = normalized_rows(&splits.validation, normalizer);

    let mut params = init_params(mlp, tc.seed)?;
    let mut rng = Prng::derived(tc.seed, 1);
    let mut adam = Adam::new(params.count());
    let mut order: Vec<usize> = (0..train_x.len()).collect();

    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        wall_time_secs: 0.0,
    };

    let mut bx: Vec<Vec<f64>> = Vec::with_capacity(tc.batch_size);
    let mut by: Vec<f64> = Vec::with_capacity(tc.batch_size);
    for epoch in 0..tc.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            bx.clear();
            by.clear();
            for &i in chunk {
                bx.push(train_x[i].clone());
                by.push(train_y[i]);
            }
            let g = backward(&params, mlp, &bx, &by, Mode::Train(&mut rng))?;
            if !g.loss.is_finite() {
                return Err(NetError::DivergedLoss { epoch });
            }
            epoch_loss += g.loss * chunk.len() as f64;
            adam.update(&mut params, &g.data, tc.learning_rate, tc.weight_decay);
        }
        let val = evaluate_nll(&params, mlp, &val_x, &val_y)?;
        if !val.is_finite() || !params.is_finite() {
            return Err(NetError::DivergedLoss { epoch });
        }
        history.train_loss.push(epoch_loss / train_x.len() as f64);
        history.val_loss.push(val);
        if val < best_loss {
            best_loss = val;
            best_epoch = epoch;
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > tc.patience {
                break;
            }
        }
    }
    history.best_epoch = best_epoch;
    history.wall_time_secs = started.elapsed().as_secs_f64();
    Ok((best, history))
}

/// Inference in physical units: normalize, forward, then mu·s + m and var·s².
pub fn predict_batch(
    p: &Parameters,
    cfg: &MlpConfig,
    normalizer: &Normalizer,
    raw_inputs: &[[f64; FEATURE_COUNT]],
) -> Result<Vec<GaussianPrediction>, NetError> {
    if cfg.input_dim != FEATURE_COUNT {
        return Err(NetError::DimensionMismatch {
            expected: cfg.input_dim,
            got: FEATURE_COUNT,
        });
    }
    raw_inputs
        .iter()
        .map(|x| {
            if x.iter().any(|v| !v.is_finite()) {
                return Err(NetError::NonFiniteInput);
            }
            let z = normalizer.normalize_inputs(x);
            let g = forward(p, cfg, &z, Mode::Inference)?;
            Ok(GaussianPrediction {
                mu: normalizer.denormalize_target(g.mu),
                var: normalizer.denormalize_variance(g.var),
            })
        })
        .collect()
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Versioned on-disk form of one trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format_version: u32,
    pub config: MlpConfig,
    pub normalizer: Normalizer,
    pub tensors: Vec<TensorBlock>,
}

impl ModelDocument {
    pub fn new(cfg: &MlpConfig, normalizer: &Normalizer, p: &Parameters) -> Self {
        let mut tensors = Vec::new();
        let mut push = |name: String, d: &Dense| {
            tensors.push(TensorBlock {
                name: format!("{name}.weight"),
                shape: vec![d.rows, d.cols],
                values: d.weights.clone(),
            });
            tensors.push(TensorBlock {
                name: format!("{name}.bias"),
                shape: vec![d.rows],
                values: d.bias.clone(),
            });
        };
        for (l, d) in p.hidden.iter().enumerate() {
            push(format!("hidden{l}"), d);
        }
        push("mean_head".into(), &p.mean_head);
        push("var_head".into(), &p.var_head);
        Self {
            format_version: MODEL_FORMAT_VERSION,
            config: *cfg,
            normalizer: *normalizer,
            tensors,
        }
    }

    /// Rebuilds parameters, checking every declared shape against the config.
    pub fn parameters(&self) -> Result<Parameters, String> {
        self.config.validate().map_err(|e| e.to_string())?;
        let mut p = Parameters::zeros(&self.config);
        let expected = 2 * (self.config.hidden_layers + 2);
        if self.tensors.len() != expected {
            return Err(format!(
                "expected {expected} tensors, found {}",
                self.tensors.len()
            ));
        }
        for (slot, block) in p.slices_mut().into_iter().zip(&self.tensors) {
            let declared: usize = block.shape.iter().product();
            if declared != slot.len() || block.values.len() != slot.len() {
                return Err(format!("tensor {} has inconsistent shape", block.name));
            }
            slot.copy_from_slice(&block.values);
        }
        if !p.is_finite() {
            return Err("non-finite parameter".into());
        }
        Ok(p)
    }
}
