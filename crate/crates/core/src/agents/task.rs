use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::context::write_atomic;
use super::{AgentError, ProjectContext, Role, TaskKind};
use crate::dataset::{SliceSpec, DEFAULT_FRACTIONS, FEATURE_COUNT};
use crate::evaluation::TWO_SIGMA_LEVEL;
use crate::neural_net::{Activation, MlpConfig, TrainConfig};

pub const TASK_VERSION: u32 = 1;
pub const METRIC_NAMES: [&str; 4] = ["rmse", "mape", "rmspe", "ratio"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub planner: String,
    /// SHA-256 of the prompt that produced the document.
    pub prompt_digest: String,
    /// Digests of the tuning prompts applied since generation.
    #[serde(default)]
    pub patches: Vec<String>,
}

/// A declarative pipeline task: what to build, train or evaluate, and where the
/// artifacts live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDocument {
    pub version: u32,
    pub kind: TaskKind,
    pub payload: serde_json::Value,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactRef {
    pub role: Role,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerOverride {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMember {
    pub mlp: MlpConfig,
    #[serde(default)]
    pub trial_id: Option<u64>,
    /// Per-member optimizer settings (from tuning); the train task's values otherwise.
    #[serde(default)]
    pub optimizer: Option<OptimizerOverride>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPayload {
    pub members: Vec<ModelMember>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub fractions: [f64; 3],
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPayload {
    /// Shared settings; member i trains with seed `train.seed + i`.
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub dataset: ArtifactRef,
    pub model_spec: ArtifactRef,
    pub output: ArtifactRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluatePayload {
    pub metrics: Vec<String>,
    /// Central probability of the uncertainty band.
    pub level: f64,
    #[serde(default)]
    pub slices: Vec<SliceSpec>,
    pub split: SplitSpec,
    pub dataset: ArtifactRef,
    pub ensemble: ArtifactRef,
    pub output: ArtifactRef,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Model(ModelPayload),
    Train(TrainPayload),
    Evaluate(EvaluatePayload),
}

impl Payload {
    pub fn kind(&self) -> TaskKind {
        match self {
            Payload::Model(_) => TaskKind::Model,
            Payload::Train(_) => TaskKind::Train,
            Payload::Evaluate(_) => TaskKind::Evaluate,
        }
    }

    pub fn to_value(&self) -> serde_json::Value {
        match self {
            Payload::Model(p) => serde_json::to_value(p),
            Payload::Train(p) => serde_json::to_value(p),
            Payload::Evaluate(p) => serde_json::to_value(p),
        }
        .expect("payload serializes")
    }

    pub fn artifact_refs_mut(&mut self) -> Vec<&mut ArtifactRef> {
        match self {
            Payload::Model(_) => vec![],
            Payload::Train(p) => vec![&mut p.dataset, &mut p.model_spec, &mut p.output],
            Payload::Evaluate(p) => vec![&mut p.dataset, &mut p.ensemble, &mut p.output],
        }
    }
}

fn invalid(msg: impl Into<String>) -> AgentError {
    AgentError::SchemaInvalid(msg.into())
}

fn check_role(r: &ArtifactRef, expected: Role, field: &str) -> Result<(), AgentError> {
    if r.role != expected {
        return Err(invalid(format!("{field} must reference role {expected}, got {}", r.role)));
    }
    Ok(())
}

fn check_split(s: &SplitSpec) -> Result<(), AgentError> {
    let sum: f64 = s.fractions.iter().sum();
    if s.fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split fractions {:?} must be >= 0 and sum to 1", s.fractions)));
    }
    if s.fractions[0] <= 0.0 {
        return Err(invalid("training fraction must be positive"));
    }
    Ok(())
}

impl TaskDocument {
    pub fn new(payload: &Payload, provenance: Provenance) -> Self {
        Self {
            version: TASK_VERSION,
            kind: payload.kind(),
            payload: payload.to_value(),
            provenance,
        }
    }

    /// Parses the payload for the document's kind and checks every field; nothing is
    /// executed for a document that fails here.
    pub fn validate(&self) -> Result<Payload, AgentError> {
        if self.version != TASK_VERSION {
            return Err(invalid(format!(
                "task document version {} (expected {TASK_VERSION})",
                self.version
            )));
        }
        let v = self.payload.clone();
        let parsed = match self.kind {
            TaskKind::Model => serde_json::from_value(v).map(Payload::Model),
            TaskKind::Train => serde_json::from_value(v).map(Payload::Train),
            TaskKind::Evaluate => serde_json::from_value(v).map(Payload::Evaluate),
        }
        .map_err(|e| invalid(format!("{} payload: {e}", self.kind)))?;

        match &parsed {
            Payload::Model(p) => {
                if p.members.is_empty() {
                    return Err(invalid("model payload lists no members"));
                }
                for (i, m) in p.members.iter().enumerate() {
                    if m.mlp.input_dim != FEATURE_COUNT {
                        return Err(invalid(format!("member {i}: input_dim must be {FEATURE_COUNT}")));
                    }
                    m.mlp
                        .validate()
                        .map_err(|e| invalid(format!("member {i}: {e}")))?;
                    if let Some(o) = m.optimizer {
                        TrainConfig {
                            learning_rate: o.learning_rate,
                            weight_decay: o.weight_decay,
                            batch_size: o.batch_size,
                            ..TrainConfig::default()
                        }
                        .validate()
                        .map_err(|e| invalid(format!("member {i}: {e}")))?;
                    }
                }
            }
            Payload::Train(p) => {
                p.train.validate().map_err(|e| invalid(e.to_string()))?;
                check_split(&p.split)?;
                check_role(&p.dataset, Role::Dataset, "dataset")?;
                check_role(&p.model_spec, Role::ModelSpec, "model_spec")?;
                check_role(&p.output, Role::TrainedEnsemble, "output")?;
            }
            Payload::Evaluate(p) => {
                if p.metrics.is_empty() {
                    return Err(invalid("metric list is empty"));
                }
                if let Some(m) = p.metrics.iter().find(|m| !METRIC_NAMES.contains(&m.as_str())) {
                    return Err(invalid(format!("unknown metric {m:?}")));
                }
                if !(p.level > 0.0 && p.level < 1.0) {
                    return Err(invalid("level must be in (0, 1)"));
                }
                for s in &p.slices {
                    s.validate().map_err(|e| invalid(e.to_string()))?;
                }
                check_split(&p.split)?;
                check_role(&p.dataset, Role::Dataset, "dataset")?;
                check_role(&p.ensemble, Role::TrainedEnsemble, "ensemble")?;
                check_role(&p.output, Role::ReportDir, "output")?;
            }
        }
        Ok(parsed)
    }

    pub fn save(&self, path: &Path) -> Result<(), AgentError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let json = serde_json::to_vec_pretty(self).expect("document serializes");
        write_atomic(path, &json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }
}

/// Everything the scripted planner needs to write known-good documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRecipe {
    pub members: Vec<ModelMember>,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub metrics: Vec<String>,
    pub level: f64,
    #[serde(default)]
    pub slices: Vec<SliceSpec>,
}

impl PipelineRecipe {
    /// `ensemble_size` copies of one mid-sized architecture, differing only by seed.
    pub fn baseline(ensemble_size: usize, seed: u64) -> Self {
        let mlp = MlpConfig {
            input_dim: FEATURE_COUNT,
            hidden_layers: 6,
            hidden_units: 32,
            activation: Activation::GELU,
            dropout_rate: 0.05,
        };
        Self {
            members: (0..ensemble_size)
                .map(|_| ModelMember { mlp, trial_id: None, optimizer: None })
                .collect(),
            train: TrainConfig {
                learning_rate: 2e-3,
                weight_decay: 1e-4,
                batch_size: 128,
                seed,
                ..TrainConfig::default()
            },
            split: SplitSpec { fractions: DEFAULT_FRACTIONS, seed },
            metrics: METRIC_NAMES.iter().map(|s| s.to_string()).collect(),
            level: TWO_SIGMA_LEVEL,
            slices: Vec::new(),
        }
    }

    /// Payload for one stage with artifact paths taken from the context (conventional
    /// locations for artifacts not produced yet).
    pub fn payload(&self, kind: TaskKind, ctx: &ProjectContext) -> Payload {
        let at = |role: Role| ArtifactRef {
            role,
            path: ctx
                .lookup(role)
                .map(Path::to_path_buf)
                .unwrap_or_else(|_| ctx.default_path(role)),
        };
        match kind {
            TaskKind::Model => Payload::Model(ModelPayload { members: self.members.clone() }),
            TaskKind::Train => Payload::Train(TrainPayload {
                train: self.train,
                split: self.split,
                dataset: at(Role::Dataset),
                model_spec: at(Role::ModelSpec),
                output: at(Role::TrainedEnsemble),
            }),
            TaskKind::Evaluate => Payload::Evaluate(EvaluatePayload {
                metrics: self.metrics.clone(),
                level: self.level,
                slices: self.slices.clone(),
                split: self.split,
                dataset: at(Role::Dataset),
                ensemble: at(Role::TrainedEnsemble),
                output: at(Role::ReportDir),
            }),
        }
    }
}

/// Human-readable script equivalent of a document, for audit trails.
pub fn render_script(doc: &TaskDocument) -> String {
    let mut s = format!(
        "# {} task, document schema v{}\n# planner: {}\n# prompt sha256: {}\n",
        doc.kind, doc.version, doc.provenance.planner, doc.provenance.prompt_digest
    );
    for p in &doc.provenance.patches {
        let _ = writeln!(s, "# patched by prompt sha256: {p}");
    }
    match doc.validate() {
        Err(e) => {
            let _ = writeln!(s, "# INVALID: {e}");
        }
        Ok(Payload::Model(p)) => {
            s.push_str("members = [\n");
            for m in &p.members {
                let _ = writeln!(
                    s,
                    "    mlp(layers={}, units={}, activation=\"{}\", dropout={}),",
                    m.mlp.hidden_layers,
                    m.mlp.hidden_units,
                    m.mlp.activation.name(),
                    m.mlp.dropout_rate
                );
            }
            s.push_str("]\nregister_model_spec(members)\n");
        }
        Ok(Payload::Train(p)) => {
            let _ = writeln!(s, "data = load_csv({:?})", p.dataset.path);
            let _ = writeln!(
                s,
                "train, val, test = split(data, fractions={:?}, seed={})",
                p.split.fractions, p.split.seed
            );
            s.push_str("norm = fit_normalizer(train)\n");
            let _ = writeln!(s, "members = load_model_spec({:?})", p.model_spec.path);
            let _ = writeln!(
                s,
                "ensemble = train_ensemble(members, lr={}, weight_decay={}, batch_size={}, epochs={}, patience={}, seed={})",
                p.train.learning_rate, p.train.weight_decay, p.train.batch_size, p.train.epochs, p.train.patience, p.train.seed
            );
            let _ = writeln!(s, "ensemble.save({:?})", p.output.path);
        }
        Ok(Payload::Evaluate(p)) => {
            let _ = writeln!(s, "ensemble = load_ensemble({:?})", p.ensemble.path);
            let _ = writeln!(s, "data = load_csv({:?})", p.dataset.path);
            let _ = writeln!(
                s,
                "train, val, test = split(data, fractions={:?}, seed={})",
                p.split.fractions, p.split.seed
            );
            let _ = writeln!(s, "metrics = evaluate(ensemble, [train, val, test], {:?})", p.metrics);
            let _ = writeln!(s, "slices = evaluate_slices(ensemble, {} specs, level={})", p.slices.len(), p.level);
            let _ = writeln!(s, "export_report(metrics, slices, {:?})", p.output.path);
        }
    }
    s
}
