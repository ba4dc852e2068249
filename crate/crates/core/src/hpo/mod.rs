//! Bayesian optimization over the network hyperparameters.
//!
//! Each run evaluates a scrambled Sobol design, then repeatedly fits a GP to the
//! observed validation RMSEs and evaluates the candidate with the largest expected
//! improvement. Several independent runs execute in parallel and are merged into one
//! leaderboard, from which the best configurations seed a deep ensemble.

pub mod gp;
pub mod sobol;

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Normalizer, SplitDataset};
use crate::ensemble::MemberSpec;
use crate::evaluation::rmse;
use crate::neural_net::{predict_batch, train, Activation, MlpConfig, NetError, TrainConfig};
use crate::rng::splitmix64;
use crate::stats::{normal_cdf, normal_pdf};

pub use gp::{GpError, GpOptions, GpSurrogate};
pub use sobol::{Sobol, SobolError};

pub const DEFAULT_SOBOL_TRIALS: usize = 16;
pub const DEFAULT_BO_TRIALS: usize = 32;
pub const DEFAULT_RUNS: usize = 5;
pub const DEFAULT_CANDIDATES: usize = 2048;
pub const DEFAULT_TOP_K: usize = 15;
/// Diverged trials are scored as this multiple of the worst finished RMSE.
pub const DIVERGED_PENALTY: f64 = 2.0;

#[derive(Debug, Error)]
pub enum HpoError {
    #[error("value {value} for {name} is outside the search space")]
    OutOfDomain { name: &'static str, value: String },
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("encoded point has {got} coordinates, expected {expected}")]
    EncodingLength { expected: usize, got: usize },
    #[error("{0}")]
    Sobol(#[from] SobolError),
    #[error("surrogate: {0}")]
    Gp(#[from] GpError),
    #[error("need {needed} finished trials, board has {available}")]
    InsufficientTrials { needed: usize, available: usize },
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error("run seeds must be distinct")]
    DuplicateSeed,
    #[error("trial log: {0}")]
    Log(#[from] std::io::Error),
    #[error("trial log line {line}: {message}")]
    LogParse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRange {
    pub lo: f64,
    pub hi: f64,
}

impl LogRange {
    fn to_unit(self, v: f64) -> f64 {
        ((v.ln() - self.lo.ln()) / (self.hi.ln() - self.lo.ln())).clamp(0.0, 1.0)
    }

    fn from_unit(self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        (self.lo.ln() + u * (self.hi.ln() - self.lo.ln()))
            .exp()
            .clamp(self.lo, self.hi)
    }

    fn contains(self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub learning_rate: LogRange,
    pub weight_decay: LogRange,
    pub dropout_rate: [f64; 2],
    pub batch_size: Vec<usize>,
    pub hidden_layers: Vec<usize>,
    pub hidden_units: Vec<usize>,
    pub activation: Vec<Activation>,
}

impl SearchSpace {
    /// The seven-dimensional space used for the CHF baseline.
    pub fn standard() -> Self {
        Self {
            learning_rate: LogRange { lo: 1e-4, hi: 1e-2 },
            weight_decay: LogRange { lo: 1e-4, hi: 1e-2 },
            dropout_rate: [0.0, 0.3],
            batch_size: vec![128, 256, 512],
            hidden_layers: vec![6, 7],
            hidden_units: vec![8, 16, 24, 32, 48, 64, 96],
            activation: Activation::ALL.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<(), HpoError> {
        for (name, r) in [("learning_rate", self.learning_rate), ("weight_decay", self.weight_decay)] {
            if !(r.lo > 0.0 && r.lo < r.hi && r.hi.is_finite()) {
                return Err(HpoError::InvalidSpace(format!("{name} needs 0 < lo < hi")));
            }
        }
        let [dlo, dhi] = self.dropout_rate;
        if !(dlo >= 0.0 && dlo < dhi && dhi < 1.0) {
            return Err(HpoError::InvalidSpace("dropout_rate needs 0 <= lo < hi < 1".into()));
        }
        if self.batch_size.is_empty()
            || self.hidden_layers.is_empty()
            || self.hidden_units.is_empty()
            || self.activation.is_empty()
        {
            return Err(HpoError::InvalidSpace("every categorical dimension needs a choice".into()));
        }
        Ok(())
    }

    /// Number of coordinates of an encoded point.
    pub fn encoded_dims(&self) -> usize {
        3 + self.batch_size.len()
            + self.hidden_layers.len()
            + self.hidden_units.len()
            + self.activation.len()
    }

    /// Maps a point of the 7-D unit cube (one coordinate per hyperparameter) to a
    /// configuration. Categorical coordinates select choice floor(u·k).
    pub fn from_unit_cube(&self, u: &[f64]) -> Hyperparameters {
        fn pick<T: Copy>(choices: &[T], u: f64) -> T {
            let i = ((u.clamp(0.0, 1.0) * choices.len() as f64) as usize).min(choices.len() - 1);
            choices[i]
        }
        let [dlo, dhi] = self.dropout_rate;
        Hyperparameters {
            learning_rate: self.learning_rate.from_unit(u[0]),
            weight_decay: self.weight_decay.from_unit(u[1]),
            dropout_rate: (dlo + u[2].clamp(0.0, 1.0) * (dhi - dlo)).clamp(dlo, dhi),
            batch_size: pick(&self.batch_size, u[3]),
            hidden_layers: pick(&self.hidden_layers, u[4]),
            hidden_units: pick(&self.hidden_units, u[5]),
            activation: pick(&self.activation, u[6]),
        }
    }

    pub fn contains(&self, hp: &Hyperparameters) -> bool {
        self.learning_rate.contains(hp.learning_rate)
            && self.weight_decay.contains(hp.weight_decay)
            && hp.dropout_rate >= self.dropout_rate[0]
            && hp.dropout_rate <= self.dropout_rate[1]
            && self.batch_size.contains(&hp.batch_size)
            && self.hidden_layers.contains(&hp.hidden_layers)
            && self.hidden_units.contains(&hp.hidden_units)
            && self.activation.contains(&hp.activation)
    }

    /// Continuous coordinates (log-scaled for log ranges) followed by one-hot blocks for
    /// batch size, depth, width and activation.
    pub fn encode(&self, hp: &Hyperparameters) -> Result<EncodedPoint, HpoError> {
        fn out(name: &'static str, v: impl std::fmt::Debug) -> HpoError {
            HpoError::OutOfDomain { name, value: format!("{v:?}") }
        }
        if !self.learning_rate.contains(hp.learning_rate) {
            return Err(out("learning_rate", hp.learning_rate));
        }
        if !self.weight_decay.contains(hp.weight_decay) {
            return Err(out("weight_decay", hp.weight_decay));
        }
        let [dlo, dhi] = self.dropout_rate;
        if !(hp.dropout_rate >= dlo && hp.dropout_rate <= dhi) {
            return Err(out("dropout_rate", hp.dropout_rate));
        }
        let mut c = Vec::with_capacity(self.encoded_dims());
        c.push(self.learning_rate.to_unit(hp.learning_rate));
        c.push(self.weight_decay.to_unit(hp.weight_decay));
        c.push((hp.dropout_rate - dlo) / (dhi - dlo));
        fn one_hot<T: PartialEq + std::fmt::Debug>(
            c: &mut Vec<f64>,
            choices: &[T],
            v: &T,
            name: &'static str,
        ) -> Result<(), HpoError> {
            let i = choices.iter().position(|x| x == v).ok_or_else(|| out(name, v))?;
            c.extend((0..choices.len()).map(|k| if k == i { 1.0 } else { 0.0 }));
            Ok(())
        }
        one_hot(&mut c, &self.batch_size, &hp.batch_size, "batch_size")?;
        one_hot(&mut c, &self.hidden_layers, &hp.hidden_layers, "hidden_layers")?;
        one_hot(&mut c, &self.hidden_units, &hp.hidden_units, "hidden_units")?;
        one_hot(&mut c, &self.activation, &hp.activation, "activation")?;
        Ok(EncodedPoint(c))
    }

    /// Inverse of `encode`; each categorical block decodes to its largest weight
    /// (lowest index on ties).
    pub fn decode(&self, p: &EncodedPoint) -> Result<Hyperparameters, HpoError> {
        let c = &p.0;
        if c.len() != self.encoded_dims() {
            return Err(HpoError::EncodingLength {
                expected: self.encoded_dims(),
                got: c.len(),
            });
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(HpoError::OutOfDomain {
                name: "encoded point",
                value: "non-finite coordinate".into(),
            });
        }
        fn argmax<T: Copy>(block: &[f64], choices: &[T]) -> T {
            let mut best = 0;
            for (i, &v) in block.iter().enumerate() {
                if v > block[best] {
                    best = i;
                }
            }
            choices[best]
        }
        let mut at = 3;
        let mut block = |len: usize| {
            let b = &c[at..at + len];
            at += len;
            b
        };
        let batch = block(self.batch_size.len());
        let layers = block(self.hidden_layers.len());
        let units = block(self.hidden_units.len());
        let act = block(self.activation.len());
        let [dlo, dhi] = self.dropout_rate;
        Ok(Hyperparameters {
            learning_rate: self.learning_rate.from_unit(c[0]),
            weight_decay: self.weight_decay.from_unit(c[1]),
            dropout_rate: (dlo + c[2].clamp(0.0, 1.0) * (dhi - dlo)).clamp(dlo, dhi),
            batch_size: argmax(batch, &self.batch_size),
            hidden_layers: argmax(layers, &self.hidden_layers),
            hidden_units: argmax(units, &self.hidden_units),
            activation: argmax(act, &self.activation),
        })
    }
}

/// One assignment of all seven searched hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout_rate: f64,
    pub batch_size: usize,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub activation: Activation,
}

impl Hyperparameters {
    pub fn mlp_config(&self) -> MlpConfig {
        MlpConfig {
            input_dim: crate::dataset::FEATURE_COUNT,
            hidden_layers: self.hidden_layers,
            hidden_units: self.hidden_units,
            activation: self.activation,
            dropout_rate: self.dropout_rate,
        }
    }

    pub fn train_config(&self, epochs: usize, patience: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs,
            seed,
            patience,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPoint(pub Vec<f64>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Sobol,
    Bo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub trial_id: u64,
    pub run_id: u32,
    pub origin: Origin,
    #[serde(flatten)]
    pub hp: Hyperparameters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Ok,
    Diverged,
}

/// What an evaluator reports for one trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalOutcome {
    /// Validation RMSE in physical units.
    Ok(f64),
    Diverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    #[serde(flatten)]
    pub config: TrialConfig,
    /// Validation RMSE (kW/m²); absent for diverged trials.
    pub val_rmse: Option<f64>,
    pub status: TrialStatus,
    /// Absent from canonical logs, which must not depend on timing.
    #[serde(default)]
    pub wall_time_secs: f64,
}

impl TrialResult {
    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        self.config == other.config && self.val_rmse == other.val_rmse && self.status == other.status
    }

    fn sort_key(&self) -> (f64, u64) {
        (self.val_rmse.unwrap_or(f64::INFINITY), self.config.trial_id)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Leaderboard {
    pub results: Vec<TrialResult>,
}

impl Leaderboard {
    pub fn len(&self) -> usize {
        self.results.len()
    }

    pub fn is_empty(&self) -> bool {
        self.results.is_empty()
    }

    pub fn merge(boards: Vec<Leaderboard>) -> Self {
        Self {
            results: boards.into_iter().flat_map(|b| b.results).collect(),
        }
    }

    /// All results ordered by (validation RMSE, trial id); diverged trials last.
    pub fn sorted(&self) -> Vec<TrialResult> {
        let mut v = self.results.clone();
        v.sort_by(|a, b| {
            let (ra, ia) = a.sort_key();
            let (rb, ib) = b.sort_key();
            ra.total_cmp(&rb).then(ia.cmp(&ib))
        });
        v
    }

    pub fn ok_count(&self) -> usize {
        self.results.iter().filter(|r| r.status == TrialStatus::Ok).count()
    }

    pub fn best(&self) -> Option<TrialResult> {
        self.sorted().into_iter().find(|r| r.status == TrialStatus::Ok)
    }

    pub fn per_run_best(&self) -> BTreeMap<u32, TrialResult> {
        let mut out = BTreeMap::new();
        for r in self.sorted() {
            if r.status == TrialStatus::Ok {
                out.entry(r.config.run_id).or_insert(r);
            }
        }
        out
    }
}

pub fn select_top_k(board: &Leaderboard, k: usize) -> Result<Vec<TrialResult>, HpoError> {
    let ok: Vec<TrialResult> = board
        .sorted()
        .into_iter()
        .filter(|r| r.status == TrialStatus::Ok)
        .collect();
    if k == 0 || ok.len() < k {
        return Err(HpoError::InsufficientTrials {
            needed: k,
            available: ok.len(),
        });
    }
    Ok(ok.into_iter().take(k).collect())
}

/// Ensemble member specifications for the selected trials, with distinct seeds.
pub fn member_specs(
    trials: &[TrialResult],
    epochs: usize,
    patience: usize,
    base_seed: u64,
) -> Vec<MemberSpec> {
    trials
        .iter()
        .enumerate()
        .map(|(i, t)| MemberSpec {
            mlp: t.config.hp.mlp_config(),
            train: t.config.hp.train_config(epochs, patience, base_seed.wrapping_add(i as u64)),
            trial_id: Some(t.config.trial_id),
        })
        .collect()
}

/// Closed-form expected improvement for minimization.
pub fn ei_closed_form(mu: f64, sigma: f64, incumbent: f64) -> f64 {
    let gain = incumbent - mu;
    if !(sigma > 0.0) {
        return gain.max(0.0);
    }
    let z = gain / sigma;
    (gain * normal_cdf(z) + sigma * normal_pdf(z)).max(0.0)
}

/// Plug-in incumbent: the smallest posterior mean over the observed points.
pub fn incumbent(gp: &GpSurrogate) -> f64 {
    gp.observed_points()
        .iter()
        .map(|p| gp.predict(p).0)
        .fold(f64::INFINITY, f64::min)
}

pub fn expected_improvement(gp: &GpSurrogate, p: &EncodedPoint, incumbent: f64) -> f64 {
    let (mu, var) = gp.predict(&p.0);
    ei_closed_form(mu, var.sqrt(), incumbent)
}

/// Index of the candidate with the largest EI; earlier candidates win ties.
pub fn argmax_ei(gp: &GpSurrogate, candidates: &[EncodedPoint], incumbent: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let ei = expected_improvement(gp, c, incumbent);
        if best.is_none_or(|(_, b)| ei > b) {
            best = Some((i, ei));
        }
    }
    best.map(|(i, _)| i)
}

/// EI argmax over `candidate_count` scrambled Sobol candidates.
pub fn propose_next(
    gp: &GpSurrogate,
    space: &SearchSpace,
    candidate_count: usize,
    seed: u64,
) -> Result<Hyperparameters, HpoError> {
    let mut sobol = Sobol::scrambled(7, seed)?;
    let mut configs = Vec::with_capacity(candidate_count.max(1));
    let mut encoded = Vec::with_capacity(candidate_count.max(1));
    for _ in 0..candidate_count.max(1) {
        let hp = space.from_unit_cube(&sobol.next_point()?);
        encoded.push(space.encode(&hp)?);
        configs.push(hp);
    }
    let inc = incumbent(gp);
    let i = argmax_ei(gp, &encoded, inc).expect("at least one candidate");
    Ok(configs[i])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoBudget {
    pub n_sobol: usize,
    pub n_bo: usize,
    pub candidates: usize,
}

impl Default for BoBudget {
    fn default() -> Self {
        Self {
            n_sobol: DEFAULT_SOBOL_TRIALS,
            n_bo: DEFAULT_BO_TRIALS,
            candidates: DEFAULT_CANDIDATES,
        }
    }
}

impl BoBudget {
    pub fn total(&self) -> usize {
        self.n_sobol + self.n_bo
    }
}

/// Append-only JSON-lines trial record shared by concurrent runs.
#[derive(Debug)]
pub struct TrialLog {
    file: Mutex<File>,
}

impl TrialLog {
    pub fn open(path: &Path) -> Result<Self, HpoError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file: Mutex::new(file) })
    }

    pub fn append(&self, r: &TrialResult) -> Result<(), HpoError> {
        let mut line = serde_json::to_string(r).expect("trial result serializes");
        line.push('\n');
        let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
        f.write_all(line.as_bytes())?;
        f.flush()?;
        Ok(())
    }
}

/// Writes results sorted by trial id and without wall times, so identical searches give
/// identical files regardless of scheduling.
pub fn write_canonical_log(path: &Path, results: &[TrialResult]) -> Result<(), HpoError> {
    #[derive(Serialize)]
    struct Canonical<'a> {
        #[serde(flatten)]
        config: &'a TrialConfig,
        val_rmse: Option<f64>,
        status: TrialStatus,
    }
    let mut sorted: Vec<&TrialResult> = results.iter().collect();
    sorted.sort_by_key(|r| r.config.trial_id);
    let mut out = String::new();
    for r in sorted {
        let c = Canonical { config: &r.config, val_rmse: r.val_rmse, status: r.status };
        out.push_str(&serde_json::to_string(&c).expect("trial result serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_trial_log(path: &Path) -> Result<Vec<TrialResult>, HpoError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| HpoError::LogParse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn objectives(results: &[TrialResult]) -> Vec<f64> {
    let worst = results
        .iter()
        .filter_map(|r| r.val_rmse)
        .fold(f64::NAN, f64::max);
    let penalty = if worst.is_finite() { DIVERGED_PENALTY * worst } else { 1.0 };
    results.iter().map(|r| r.val_rmse.unwrap_or(penalty)).collect()
}

/// One BO run: `n_sobol` scrambled Sobol trials, then `n_bo` GP/EI proposals.
/// Trial ids are `run_id * budget.total() + k`.
pub fn run_bo<F>(
    space: &SearchSpace,
    budget: &BoBudget,
    seed: u64,
    run_id: u32,
    evaluator: &F,
    log: Option<&TrialLog>,
) -> Result<Leaderboard, HpoError>
where
    F: Fn(&TrialConfig) -> EvalOutcome + Sync,
{
    space.validate()?;
    if budget.n_sobol < 2 {
        return Err(HpoError::InvalidBudget("at least 2 Sobol trials are required".into()));
    }
    let total = budget.total() as u64;
    let mut results: Vec<TrialResult> = Vec::with_capacity(budget.total());
    let mut encoded: Vec<Vec<f64>> = Vec::with_capacity(budget.total());
    let mut sobol = Sobol::scrambled(7, seed)?;

    let record = |hp: Hyperparameters, origin: Origin, k: usize, results: &mut Vec<TrialResult>| {
        let config = TrialConfig {
            trial_id: run_id as u64 * total + k as u64,
            run_id,
            origin,
            hp,
        };
        let start = Instant::now();
        let outcome = evaluator(&config);
        let wall_time_secs = start.elapsed().as_secs_f64();
        let (val_rmse, status) = match outcome {
            EvalOutcome::Ok(v) if v.is_finite() && v >= 0.0 => (Some(v), TrialStatus::Ok),
            _ => (None, TrialStatus::Diverged),
        };
        let r = TrialResult { config, val_rmse, status, wall_time_secs };
        if let Some(log) = log {
            log.append(&r)?;
        }
        results.push(r);
        Ok::<(), HpoError>(())
    };

    for k in 0..budget.n_sobol {
        let hp = space.from_unit_cube(&sobol.next_point()?);
        encoded.push(space.encode(&hp)?.0);
        record(hp, Origin::Sobol, k, &mut results)?;
    }
    for j in 0..budget.n_bo {
        let gp = GpSurrogate::fit(&encoded, &objectives(&results), &GpOptions::default())?;
        let cand_seed = splitmix64(seed ^ splitmix64(0xB0 + j as u64));
        let hp = propose_next(&gp, space, budget.candidates, cand_seed)?;
        encoded.push(space.encode(&hp)?.0);
        record(hp, Origin::Bo, budget.n_sobol + j, &mut results)?;
    }
    Ok(Leaderboard { results })
}

/// Independent runs in parallel, one per seed; run ids follow seed order.
pub fn run_parallel_bo<F>(
    space: &SearchSpace,
    budget: &BoBudget,
    seeds: &[u64],
    evaluator: &F,
    log: Option<&TrialLog>,
) -> Result<Leaderboard, HpoError>
where
    F: Fn(&TrialConfig) -> EvalOutcome + Sync,
{
    let mut uniq = seeds.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    if uniq.len() != seeds.len() {
        return Err(HpoError::DuplicateSeed);
    }
    let boards = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| run_bo(space, budget, s, i as u32, evaluator, log))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Leaderboard::merge(boards))
}

/// Seeds for `runs` parallel runs derived from one harness seed.
pub fn run_seeds(seed: u64, runs: usize) -> Vec<u64> {
    (0..runs as u64).map(|i| splitmix64(seed.wrapping_add(i))).collect()
}

/// Evaluator that trains one network per trial and scores validation RMSE in physical
/// units. The training seed is derived from `seed` and the trial id.
pub fn training_evaluator<'a>(
    splits: &'a SplitDataset,
    normalizer: &'a Normalizer,
    epochs: usize,
    patience: usize,
    seed: u64,
) -> impl Fn(&TrialConfig) -> EvalOutcome + Sync + 'a {
    move |tc: &TrialConfig| {
        let mlp = tc.hp.mlp_config();
        let train_cfg = tc.hp.train_config(epochs, patience, splitmix64(seed ^ tc.trial_id));
        let params = match train(splits, normalizer, &mlp, &train_cfg) {
            Ok((p, _)) => p,
            Err(NetError::DivergedLoss { .. }) | Err(NetError::NonFiniteInput) => {
                return EvalOutcome::Diverged
            }
            Err(_) => return EvalOutcome::Diverged,
        };
        let inputs = splits.validation.inputs();
        let preds = match predict_batch(&params, &mlp, normalizer, &inputs) {
            Ok(p) => p,
            Err(_) => return EvalOutcome::Diverged,
        };
        let mu: Vec<f64> = preds.iter().map(|p| p.mu).collect();
        match rmse(&splits.validation.targets(), &mu) {
            Ok(v) if v.is_finite() => EvalOutcome::Ok(v),
            _ => EvalOutcome::Diverged,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    fn random_hp(space: &SearchSpace, rng: &mut Prng) -> Hyperparameters {
        let u: Vec<f64> = (0..7).map(|_| rng.uniform()).collect();
        space.from_unit_cube(&u)
    }

    #[test]
    fn standard_space_shape() {
        let s = SearchSpace::standard();
        assert_eq!(s.encoded_dims(), 3 + 3 + 2 + 7 + 6);
        assert_eq!(s.activation.len(), 6);
        s.validate().unwrap();
    }

    #[test]
    fn midpoint_learning_rate() {
        let s = SearchSpace::standard();
        let hp = s.from_unit_cube(&[0.5; 7]);
        assert!((hp.learning_rate - 1e-3).abs() < 1e-15);
        assert_eq!(s.encode(&Hyperparameters { learning_rate: 1e-4, ..hp }).unwrap().0[0], 0.0);
    }

    #[test]
    fn batch_256_round_trips() {
        let s = SearchSpace::standard();
        let hp = Hyperparameters { batch_size: 256, ..s.from_unit_cube(&[0.1; 7]) };
        let e = s.encode(&hp).unwrap();
        assert_eq!(&e.0[3..6], &[0.0, 1.0, 0.0]);
        assert_eq!(s.decode(&e).unwrap().batch_size, 256);
    }

    #[test]
    fn encode_rejects_out_of_domain() {
        let s = SearchSpace::standard();
        let hp = s.from_unit_cube(&[0.3; 7]);
        assert!(s.encode(&Hyperparameters { batch_size: 100, ..hp }).is_err());
        assert!(s.encode(&Hyperparameters { learning_rate: 0.1, ..hp }).is_err());
        assert!(s.encode(&Hyperparameters { dropout_rate: 0.5, ..hp }).is_err());
    }

    #[test]
    fn decode_ties_pick_lowest_index() {
        let s = SearchSpace::standard();
        let mut c = vec![0.5; s.encoded_dims()];
        for v in &mut c[3..] {
            *v = 0.25;
        }
        let hp = s.decode(&EncodedPoint(c)).unwrap();
        assert_eq!((hp.batch_size, hp.hidden_layers, hp.hidden_units), (128, 6, 8));
        assert_eq!(hp.activation, Activation::ALL[0]);
    }

    #[test]
    fn round_trip_random_configs() {
        let s = SearchSpace::standard();
        let mut rng = Prng::new(4);
        for _ in 0..500 {
            let hp = random_hp(&s, &mut rng);
            let back = s.decode(&s.encode(&hp).unwrap()).unwrap();
            assert_eq!(
                (back.batch_size, back.hidden_layers, back.hidden_units, back.activation),
                (hp.batch_size, hp.hidden_layers, hp.hidden_units, hp.activation)
            );
            for (a, b) in [
                (back.learning_rate, hp.learning_rate),
                (back.weight_decay, hp.weight_decay),
                (back.dropout_rate, hp.dropout_rate),
            ] {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-12), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn ei_degenerate_and_monotone() {
        assert_eq!(ei_closed_form(1.0, 0.0, 1.0), 0.0);
        assert_eq!(ei_closed_form(2.0, 0.0, 1.0), 0.0);
        assert!((ei_closed_form(0.0, 1.0, 0.0) - 0.398_942_280_401_432_7).abs() < 1e-15);
        let mut last = 0.0;
        for i in 1..50 {
            let ei = ei_closed_form(0.3, i as f64 * 0.1, 0.0);
            assert!(ei > last);
            last = ei;
        }
    }

    #[test]
    fn ei_matches_monte_carlo() {
        let mut rng = Prng::new(77);
        for _ in 0..5 {
            let mu = rng.normal();
            let sigma = 0.1 + rng.uniform() * 2.0;
            let inc = rng.normal();
            let n = 200_000;
            let mc = (0..n)
                .map(|_| (inc - (mu + sigma * rng.normal())).max(0.0))
                .sum::<f64>()
                / n as f64;
            assert!((mc - ei_closed_form(mu, sigma, inc)).abs() < 1e-2);
        }
    }

    fn quad_space_objective(space: &SearchSpace, hp: &Hyperparameters) -> f64 {
        let e = space.encode(hp).unwrap().0;
        (e[0] - 0.3).powi(2) + (e[1] - 0.7).powi(2) + (e[2] - 0.5).powi(2)
            + if hp.batch_size == 256 { 0.0 } else { 0.2 }
            + if hp.hidden_units == 32 { 0.0 } else { 0.1 }
    }

    #[test]
    fn argmax_prefers_positive_ei() {
        let x = vec![vec![0.0], vec![1.0]];
        let gp = GpSurrogate::fit(&x, &[0.0, 1.0], &GpOptions { fixed_noise: Some(1e-10), ..Default::default() }).unwrap();
        let inc = incumbent(&gp);
        // At an observed optimum the posterior collapses, so EI vanishes up to the
        // rounding left in the posterior variance.
        let cands = [EncodedPoint(vec![0.0]), EncodedPoint(vec![0.5])];
        let at_opt = expected_improvement(&gp, &cands[0], inc);
        assert!(at_opt < 1e-4 && at_opt < 1e-3 * expected_improvement(&gp, &cands[1], inc));
        assert_eq!(argmax_ei(&gp, &cands, inc), Some(1));
        assert_eq!(argmax_ei(&gp, &cands[..1], inc), Some(0));
    }

    #[test]
    fn proposal_is_deterministic() {
        let s = SearchSpace::standard();
        let mut rng = Prng::new(1);
        let hps: Vec<_> = (0..6).map(|_| random_hp(&s, &mut rng)).collect();
        let x: Vec<Vec<f64>> = hps.iter().map(|h| s.encode(h).unwrap().0).collect();
        let y: Vec<f64> = hps.iter().map(|h| quad_space_objective(&s, h)).collect();
        let gp = GpSurrogate::fit(&x, &y, &GpOptions::default()).unwrap();
        let a = propose_next(&gp, &s, 256, 9).unwrap();
        let b = propose_next(&gp, &s, 256, 9).unwrap();
        assert_eq!(a, b);
        assert!(s.contains(&a));
    }

    #[test]
    fn bookkeeping_and_reproducibility() {
        let s = SearchSpace::standard();
        let eval = |tc: &TrialConfig| EvalOutcome::Ok(quad_space_objective(&s, &tc.hp));
        let budget = BoBudget { n_sobol: 4, n_bo: 3, candidates: 64 };
        let a = run_bo(&s, &budget, 5, 2, &eval, None).unwrap();
        let b = run_bo(&s, &budget, 5, 2, &eval, None).unwrap();
        assert_eq!(a.len(), 7);
        assert!(a.results.iter().zip(&b.results).all(|(x, y)| x.same_outcome(y)));
        let ids: Vec<u64> = a.results.iter().map(|r| r.config.trial_id).collect();
        assert_eq!(ids, (14..21).collect::<Vec<_>>());
        assert_eq!(a.results.iter().filter(|r| r.config.origin == Origin::Sobol).count(), 4);
        assert!(a.results[4..].iter().all(|r| r.config.origin == Origin::Bo));
    }

    #[test]
    fn pure_sobol_when_no_bo_budget() {
        let s = SearchSpace::standard();
        let eval = |_: &TrialConfig| EvalOutcome::Ok(1.0);
        let b = run_bo(&s, &BoBudget { n_sobol: 5, n_bo: 0, candidates: 8 }, 0, 0, &eval, None).unwrap();
        assert!(b.results.iter().all(|r| r.config.origin == Origin::Sobol));
        assert!(run_bo(&s, &BoBudget { n_sobol: 1, n_bo: 0, candidates: 8 }, 0, 0, &eval, None).is_err());
    }

    #[test]
    fn diverged_trials_are_penalized() {
        let s = SearchSpace::standard();
        let eval = |tc: &TrialConfig| {
            if tc.trial_id.is_multiple_of(3) { EvalOutcome::Diverged } else { EvalOutcome::Ok(tc.hp.learning_rate * 100.0) }
        };
        let board = run_bo(&s, &BoBudget { n_sobol: 6, n_bo: 2, candidates: 32 }, 1, 0, &eval, None).unwrap();
        let obj = objectives(&board.results);
        let worst = board.results.iter().filter_map(|r| r.val_rmse).fold(0.0, f64::max);
        for (r, o) in board.results.iter().zip(&obj) {
            if r.status == TrialStatus::Diverged {
                assert_eq!(*o, 2.0 * worst);
            }
        }
        assert_eq!(board.sorted().last().unwrap().status, TrialStatus::Diverged);
    }

    #[test]
    fn top_k_and_ties() {
        let s = SearchSpace::standard();
        let hp = s.from_unit_cube(&[0.5; 7]);
        let mk = |id: u64, v: f64| TrialResult {
            config: TrialConfig { trial_id: id, run_id: 0, origin: Origin::Sobol, hp },
            val_rmse: Some(v),
            status: TrialStatus::Ok,
            wall_time_secs: 0.0,
        };
        let board = Leaderboard { results: vec![mk(5, 2.0), mk(3, 1.0), mk(1, 2.0)] };
        let top = select_top_k(&board, 3).unwrap();
        assert_eq!(top.iter().map(|r| r.config.trial_id).collect::<Vec<_>>(), vec![3, 1, 5]);
        assert_eq!(select_top_k(&board, 1).unwrap()[0].config.trial_id, 3);
        assert!(matches!(
            select_top_k(&board, 4),
            Err(HpoError::InsufficientTrials { needed: 4, available: 3 })
        ));
    }

    #[test]
    fn trial_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.jsonl");
        let log = TrialLog::open(&path).unwrap();
        let s = SearchSpace::standard();
        let eval = |tc: &TrialConfig| {
            if tc.trial_id == 1 { EvalOutcome::Diverged } else { EvalOutcome::Ok(0.5) }
        };
        let board = run_bo(&s, &BoBudget { n_sobol: 3, n_bo: 0, candidates: 8 }, 3, 0, &eval, Some(&log)).unwrap();
        let back = read_trial_log(&path).unwrap();
        assert_eq!(back, board.results);
        assert!(std::fs::read_to_string(&path).unwrap().contains("\"origin\":\"sobol\""));
    }

    #[test]
    fn single_parallel_run_equals_run_bo() {
        let s = SearchSpace::standard();
        let eval = |tc: &TrialConfig| EvalOutcome::Ok(quad_space_objective(&s, &tc.hp));
        let budget = BoBudget { n_sobol: 3, n_bo: 2, candidates: 32 };
        let p = run_parallel_bo(&s, &budget, &[42], &eval, None).unwrap();
        let r = run_bo(&s, &budget, 42, 0, &eval, None).unwrap();
        assert!(p.results.iter().zip(&r.results).all(|(a, b)| a.same_outcome(b)));
        assert!(matches!(run_parallel_bo(&s, &budget, &[1, 1], &eval, None), Err(HpoError::DuplicateSeed)));
    }
}
