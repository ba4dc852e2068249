use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::context::normalize;
use super::task::{EvaluatePayload, ModelPayload, Payload, TrainPayload};
use super::{ProjectContext, Role, TaskDocument, TaskKind};
use crate::dataset::{fit_normalizer, load_csv, split};
use crate::ensemble::{train_ensemble, Ensemble, MemberSpec};
use crate::evaluation::{evaluate_model, evaluate_slices, export_report, EvaluationReport};
use crate::neural_net::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SandboxAccess {
    Read,
    Write,
}

type Trace = Arc<Mutex<Vec<(SandboxAccess, PathBuf)>>>;

/// Confines engine file access to the workspace root. Every approved path can be
/// recorded for inspection.
#[derive(Debug, Clone)]
pub struct Sandbox {
    root: PathBuf,
    trace: Option<Trace>,
}

impl Sandbox {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            trace: None,
        }
    }

    /// A sandbox that records every approved access.
    pub fn recording(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            trace: Some(Arc::new(Mutex::new(Vec::new()))),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn trace(&self) -> Vec<(SandboxAccess, PathBuf)> {
        self.trace
            .as_ref()
            .map(|t| t.lock().unwrap_or_else(|e| e.into_inner()).clone())
            .unwrap_or_default()
    }

    pub fn check(&self, path: &Path, access: SandboxAccess) -> Result<PathBuf, String> {
        if !path.is_absolute() {
            return Err(format!(
                "PathError: {} is not an absolute workspace path",
                path.display()
            ));
        }
        let outside = || {
            format!(
                "SandboxViolation: {} is outside the workspace {}",
                path.display(),
                self.root.display()
            )
        };
        let p = normalize(path).ok_or_else(outside)?;
        if !p.starts_with(&self.root) {
            return Err(outside());
        }
        // Resolve symlinks on the deepest existing ancestor.
        let mut probe = p.as_path();
        while !probe.exists() {
            match probe.parent() {
                Some(parent) => probe = parent,
                None => break,
            }
        }
        if let Ok(real) = probe.canonicalize() {
            if !real.starts_with(&self.root) {
                return Err(outside());
            }
        }
        if access == SandboxAccess::Read && !p.exists() {
            return Err(format!("FileNotFoundError: {}", path.display()));
        }
        if let Some(t) = &self.trace {
            t.lock().unwrap_or_else(|e| e.into_inner()).push((access, p.clone()));
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptSet {
    All,
    Only(Vec<u32>),
}

/// Fail the given (1-based) execution attempts of one task kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub kind: TaskKind,
    pub attempts: AttemptSet,
}

impl FromStr for FaultSpec {
    type Err = String;

    /// `stage=evaluate,attempt=1`; attempts may be `all` or joined with `+` (`1+2`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut kind = None;
        let mut attempts = AttemptSet::Only(vec![1]);
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got {part:?}"))?;
            match k.trim() {
                "stage" | "kind" => {
                    kind = Some(TaskKind::parse(v).ok_or_else(|| format!("unknown stage {v:?}"))?)
                }
                "attempt" | "attempts" => {
                    attempts = if v.trim() == "all" {
                        AttemptSet::All
                    } else {
                        AttemptSet::Only(
                            v.split('+')
                                .map(|a| a.trim().parse::<u32>().map_err(|e| format!("attempt {a:?}: {e}")))
                                .collect::<Result<_, _>>()?,
                        )
                    }
                }
                other => return Err(format!("unknown fault key {other:?}")),
            }
        }
        Ok(FaultSpec {
            kind: kind.ok_or("fault spec needs stage=...")?,
            attempts,
        })
    }
}

/// Deterministic executor fault hook.
#[derive(Debug, Clone, Default)]
pub struct FaultInjector {
    specs: Vec<FaultSpec>,
    attempts: BTreeMap<TaskKind, u32>,
    fired: u32,
}

impl FaultInjector {
    pub fn new(specs: Vec<FaultSpec>) -> Self {
        Self {
            specs,
            ..Default::default()
        }
    }

    pub fn is_armed(&self) -> bool {
        !self.specs.is_empty()
    }

    pub fn fired(&self) -> u32 {
        self.fired
    }

    /// Counts an execution of `kind`; returns its attempt number if it must fail.
    fn trip(&mut self, kind: TaskKind) -> Option<u32> {
        let n = self.attempts.entry(kind).or_insert(0);
        *n += 1;
        let n = *n;
        let hit = self.specs.iter().any(|s| {
            s.kind == kind
                && match &s.attempts {
                    AttemptSet::All => true,
                    AttemptSet::Only(v) => v.contains(&n),
                }
        });
        if hit {
            self.fired += 1;
            Some(n)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    /// `None` for tool calls that are not task executions.
    pub kind: Option<TaskKind>,
    pub status: ExecStatus,
    pub log: String,
    /// One-line description of the main artifact, for observations.
    pub summary: String,
    pub artifacts: Vec<(Role, PathBuf)>,
    pub wall_time_secs: f64,
    pub injected_fault: bool,
}

impl ExecutionResult {
    pub fn ok(kind: Option<TaskKind>, summary: impl Into<String>, log: impl Into<String>) -> Self {
        Self {
            kind,
            status: ExecStatus::Ok,
            log: log.into(),
            summary: summary.into(),
            artifacts: vec![],
            wall_time_secs: 0.0,
            injected_fault: false,
        }
    }

    /// An error result; an empty log is replaced by the summary so the log is never empty.
    pub fn error(kind: Option<TaskKind>, log: impl Into<String>) -> Self {
        let mut log = log.into();
        if log.trim().is_empty() {
            log = "error (no log captured)".into();
        }
        Self {
            kind,
            status: ExecStatus::Error,
            summary: log.lines().next().unwrap_or_default().to_string(),
            log,
            artifacts: vec![],
            wall_time_secs: 0.0,
            injected_fault: false,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ExecStatus::Ok
    }

    pub fn first_log_line(&self) -> &str {
        self.log.lines().find(|l| !l.trim().is_empty()).unwrap_or("")
    }
}

/// Runs validated task documents with the built-in engine inside a sandbox.
#[derive(Debug, Clone)]
pub struct Executor {
    pub sandbox: Sandbox,
    pub faults: FaultInjector,
    last_failure: Option<String>,
}

struct EngineOutput {
    artifacts: Vec<(Role, PathBuf)>,
    summary: String,
}

impl Executor {
    pub fn new(sandbox: Sandbox) -> Self {
        Self {
            sandbox,
            faults: FaultInjector::default(),
            last_failure: None,
        }
    }

    pub fn with_faults(mut self, faults: FaultInjector) -> Self {
        self.faults = faults;
        self
    }

    pub fn last_failure(&self) -> Option<&str> {
        self.last_failure.as_deref()
    }

    /// Never fails: engine errors, sandbox violations and injected faults come back as
    /// error results with the log attached.
    pub fn execute(&mut self, doc: &TaskDocument, ctx: &mut ProjectContext) -> ExecutionResult {
        let start = Instant::now();
        let mut log = String::new();
        let mut injected = false;
        let outcome = match doc.validate() {
            Err(e) => Err(format!("SchemaError: {e}")),
            Ok(payload) => match self.faults.trip(doc.kind) {
                Some(n) => {
                    injected = true;
                    Err(format!(
                        "InjectedFault: synthetic {} failure on attempt {n}\n\
                         the executor fault hook was armed for this call; the task document is unchanged",
                        doc.kind
                    ))
                }
                None => self.run(&payload, ctx, &mut log),
            },
        };
        let wall_time_secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(out) => {
                for (role, path) in &out.artifacts {
                    if let Err(e) = ctx.bind(*role, path) {
                        return self.failure(doc.kind, format!("ContextError: {e}\n{log}"), wall_time_secs, false);
                    }
                }
                if let Err(e) = ctx.save() {
                    return self.failure(doc.kind, format!("ContextError: {e}\n{log}"), wall_time_secs, false);
                }
                ExecutionResult {
                    kind: Some(doc.kind),
                    status: ExecStatus::Ok,
                    log,
                    summary: out.summary,
                    artifacts: out.artifacts,
                    wall_time_secs,
                    injected_fault: false,
                }
            }
            Err(err) => {
                let full = if log.is_empty() { err } else { format!("{err}\n{log}") };
                self.failure(doc.kind, full, wall_time_secs, injected)
            }
        }
    }

    fn failure(&mut self, kind: TaskKind, log: String, wall_time_secs: f64, injected: bool) -> ExecutionResult {
        self.last_failure = Some(log.clone());
        ExecutionResult {
            kind: Some(kind),
            status: ExecStatus::Error,
            summary: log.lines().next().unwrap_or("error").to_string(),
            log,
            artifacts: vec![],
            wall_time_secs,
            injected_fault: injected,
        }
    }

    fn run(&self, payload: &Payload, ctx: &ProjectContext, log: &mut String) -> Result<EngineOutput, String> {
        match payload {
            Payload::Model(p) => self.run_model(p, ctx, log),
            Payload::Train(p) => self.run_train(p, log),
            Payload::Evaluate(p) => self.run_evaluate(p, log),
        }
    }

    fn run_model(&self, p: &ModelPayload, ctx: &ProjectContext, log: &mut String) -> Result<EngineOutput, String> {
        for (i, m) in p.members.iter().enumerate() {
            let _ = writeln!(
                log,
                "member {i}: {} x {} {} dropout {}",
                m.mlp.hidden_layers,
                m.mlp.hidden_units,
                m.mlp.activation.name(),
                m.mlp.dropout_rate
            );
        }
        let spec = ctx.lookup(Role::ModelSpec).map_err(|e| format!("ContextError: {e}"))?;
        let spec = self.sandbox.check(spec, SandboxAccess::Read)?;
        Ok(EngineOutput {
            artifacts: vec![(Role::ModelSpec, spec)],
            summary: format!("model spec validated ({} members)", p.members.len()),
        })
    }

    fn run_train(&self, p: &TrainPayload, log: &mut String) -> Result<EngineOutput, String> {
        let data_path = self.sandbox.check(&p.dataset.path, SandboxAccess::Read)?;
        let spec_path = self.sandbox.check(&p.model_spec.path, SandboxAccess::Read)?;
        let out_dir = self.sandbox.check(&p.output.path, SandboxAccess::Write)?;

        let data = load_csv(&data_path).map_err(|e| format!("DataError: {e}"))?;
        let splits = split(&data, p.split.fractions, p.split.seed).map_err(|e| format!("DataError: {e}"))?;
        let norm = fit_normalizer(&splits.train).map_err(|e| format!("DataError: {e}"))?;
        let spec_doc = TaskDocument::load(&spec_path).map_err(|e| format!("ModelSpecError: {e}"))?;
        let members = match spec_doc.validate() {
            Ok(Payload::Model(m)) => m.members,
            Ok(_) => return Err(format!("ModelSpecError: {} is not a model document", spec_path.display())),
            Err(e) => return Err(format!("ModelSpecError: {e}")),
        };
        let specs: Vec<MemberSpec> = members
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let mut train = TrainConfig {
                    seed: p.train.seed.wrapping_add(i as u64),
                    ..p.train
                };
                if let Some(o) = m.optimizer {
                    train.learning_rate = o.learning_rate;
                    train.weight_decay = o.weight_decay;
                    train.batch_size = o.batch_size;
                }
                MemberSpec { mlp: m.mlp, train, trial_id: m.trial_id }
            })
            .collect();
        let _ = writeln!(
            log,
            "split {}/{}/{} rows; training {} members",
            splits.train.len(),
            splits.validation.len(),
            splits.test.len(),
            specs.len()
        );
        let ens = train_ensemble(&splits, &norm, &specs).map_err(|e| format!("TrainingError: {e}"))?;
        for (i, m) in ens.members.iter().enumerate() {
            if let Some(h) = &m.history {
                let _ = writeln!(
                    log,
                    "member {i}: {} epochs, best epoch {}, best validation NLL {:.6}",
                    h.epochs_run(),
                    h.best_epoch,
                    h.best_val_loss()
                );
            }
        }
        ens.save(&out_dir).map_err(|e| format!("IoError: {e}"))?;
        Ok(EngineOutput {
            artifacts: vec![(Role::TrainedEnsemble, out_dir)],
            summary: format!("trained ensemble saved ({} members)", ens.len()),
        })
    }

    fn run_evaluate(&self, p: &EvaluatePayload, log: &mut String) -> Result<EngineOutput, String> {
        let data_path = self.sandbox.check(&p.dataset.path, SandboxAccess::Read)?;
        let ens_dir = self.sandbox.check(&p.ensemble.path, SandboxAccess::Read)?;
        let out_dir = self.sandbox.check(&p.output.path, SandboxAccess::Write)?;

        let ens = Ensemble::load(&ens_dir).map_err(|e| format!("EnsembleError: {e}"))?;
        let data = load_csv(&data_path).map_err(|e| format!("DataError: {e}"))?;
        let splits = split(&data, p.split.fractions, p.split.seed).map_err(|e| format!("DataError: {e}"))?;
        let mut metrics = Vec::new();
        let mut points = Vec::new();
        for (label, ds) in [("train", &splits.train), ("validation", &splits.validation), ("test", &splits.test)] {
            if ds.is_empty() {
                continue;
            }
            let ev = evaluate_model(&ens, ds, label).map_err(|e| format!("EvaluationError: {e}"))?;
            let m = &ev.metrics;
            let mut line = format!("{label}: n={}", m.n);
            for name in &p.metrics {
                let _ = match name.as_str() {
                    "rmse" => write!(line, " rmse={:.3}", m.rmse_kw_m2),
                    "mape" => write!(line, " mape={:.3}%", m.mape_pct),
                    "rmspe" => write!(line, " rmspe={:.3}%", m.rmspe_pct),
                    _ => write!(line, " ratio_mean={:.4} inside={:.4}", m.ratio_mean, m.ratio_inside_frac),
                };
            }
            let _ = writeln!(log, "{line}");
            metrics.push(ev.metrics);
            if label == "test" {
                points = ev.points;
            }
        }
        let slices = if p.slices.is_empty() {
            None
        } else {
            Some(evaluate_slices(&ens, &p.slices, p.level).map_err(|e| format!("EvaluationError: {e}"))?)
        };
        let report = EvaluationReport { metrics, points, slices };
        let files = export_report(&report, &out_dir).map_err(|e| format!("IoError: {e}"))?;
        let json = serde_json::to_vec_pretty(&report.metrics).expect("metrics serialize");
        std::fs::write(out_dir.join("metrics.json"), json).map_err(|e| format!("IoError: {e}"))?;
        let _ = writeln!(log, "wrote {} report files", files.len() + 1);
        Ok(EngineOutput {
            artifacts: vec![(Role::ReportDir, out_dir)],
            summary: "evaluation report written".into(),
        })
    }
}
