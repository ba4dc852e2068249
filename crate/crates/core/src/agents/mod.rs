//! Agentic orchestration of the modeling pipeline.
//!
//! Two control loops drive the same three stages (model specification, ensemble
//! training, evaluation) followed by report synthesis:
//!
//! * [`run_multi_agent`]: a supervisor routes every stage through generate → execute →
//!   tune-on-error, persisting state after each transition.
//! * [`run_react`]: a single agent alternates thought, tool call and observation over a
//!   bounded transcript window until it calls `finish_task`.
//!
//! Pipeline stages are described by declarative [`TaskDocument`]s that a [`Planner`]
//! produces and the sandboxed [`Executor`] runs with the built-in engine.

mod context;
mod executor;
mod harness;
mod llm;
mod multi;
mod planner;
mod react;
mod report;
mod state;
mod task;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use context::{ProjectContext, Workspace, CONTEXT_FILE};
pub use executor::{
    AttemptSet, ExecStatus, ExecutionResult, Executor, FaultInjector, FaultSpec, Sandbox, SandboxAccess,
};
pub use harness::{run_trials, HarnessConfig, HarnessPlanner, TrialOutcome};
pub use llm::{AttemptRecord, LlmConfig, LlmPlanner, API_KEY_ENV};
pub use multi::{run_multi_agent, MultiAgentOptions, DEFAULT_MAX_RETRIES};
pub use planner::{
    build_prompt, sha256_hex, CallUsage, Planner, PlannerQuery, PlannerResponse, PlannerSession, Purpose,
    QueryContext, ScriptedPlanner, TokenModel, TokenUsage, PLANNER_LOG_FILE, PROMPT_TEMPLATE_VERSION,
};
pub use react::{
    observe, run_react, Directive, ReactOptions, Step, Transcript, DEFAULT_MAX_STEPS, DEFAULT_WINDOW,
    OBSERVATION_LIMIT, TOOLS,
};
pub use report::{run_direct, FinalReport, StageSummary, TokenTotals, REPORT_FILE, REPORT_TEXT_FILE, TIMINGS_FILE};
pub use state::{load_state, persist_state, StageRecord, StageStatus, WorkflowState, STATE_VERSION};
pub use task::{
    render_script, ArtifactRef, EvaluatePayload, ModelMember, ModelPayload, OptimizerOverride, Payload,
    PipelineRecipe, Provenance, SplitSpec, TaskDocument, TrainPayload, TASK_VERSION,
};

use crate::dataset::DataError;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("schema invalid: {0}")]
    SchemaInvalid(String),
    #[error("planner unavailable: {0}")]
    PlannerUnavailable(String),
    #[error("authentication failure: {0}")]
    AuthFailure(String),
    #[error("unknown tool {0:?}")]
    UnknownTool(String),
    #[error("stage {stage} exhausted its retries ({error_count} errors)")]
    StageExhausted { stage: StageName, error_count: u32 },
    #[error("step budget exhausted after {0} steps")]
    StepBudgetExhausted(usize),
    #[error("artifact role {0} is not bound")]
    UnboundRole(Role),
    #[error("artifact role {0} is already bound to a different path")]
    RoleAlreadyBound(Role),
    #[error("path {0} is outside the workspace")]
    PathOutsideWorkspace(PathBuf),
    #[error("corrupt state: {0}")]
    CorruptState(String),
    #[error("state format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u64, expected: u32 },
    #[error("invalid stage transition: {0}")]
    InvalidTransition(String),
    #[error("run halted after stage {0}")]
    Halted(StageName),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// The four persisted workflow stages, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    ModelGeneration,
    TrainingExecution,
    EvaluationExecution,
    ReportSynthesis,
}

impl StageName {
    pub const ALL: [StageName; 4] = [
        StageName::ModelGeneration,
        StageName::TrainingExecution,
        StageName::EvaluationExecution,
        StageName::ReportSynthesis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StageName::ModelGeneration => "model_generation",
            StageName::TrainingExecution => "training_execution",
            StageName::EvaluationExecution => "evaluation_execution",
            StageName::ReportSynthesis => "report_synthesis",
        }
    }

    pub fn task_kind(self) -> Option<TaskKind> {
        match self {
            StageName::ModelGeneration => Some(TaskKind::Model),
            StageName::TrainingExecution => Some(TaskKind::Train),
            StageName::EvaluationExecution => Some(TaskKind::Evaluate),
            StageName::ReportSynthesis => None,
        }
    }
}

impl std::fmt::Display for StageName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Model,
    Train,
    Evaluate,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Model, TaskKind::Train, TaskKind::Evaluate];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Model => "model",
            TaskKind::Train => "train",
            TaskKind::Evaluate => "evaluate",
        }
    }

    pub fn stage(self) -> StageName {
        match self {
            TaskKind::Model => StageName::ModelGeneration,
            TaskKind::Train => StageName::TrainingExecution,
            TaskKind::Evaluate => StageName::EvaluationExecution,
        }
    }

    /// Role under which the task document itself is stored.
    pub fn spec_role(self) -> Role {
        match self {
            TaskKind::Model => Role::ModelSpec,
            TaskKind::Train => Role::TrainingSpec,
            TaskKind::Evaluate => Role::EvaluationSpec,
        }
    }

    /// Accepts task kinds and stage names (`evaluate`, `evaluation`, `evaluation_execution`).
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "model" | "model_generation" | "generate" => Some(TaskKind::Model),
            "train" | "training" | "training_execution" => Some(TaskKind::Train),
            "evaluate" | "evaluation" | "evaluation_execution" | "eval" => Some(TaskKind::Evaluate),
            _ => None,
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Named artifacts tracked by the project context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Dataset,
    ModelSpec,
    TrainingSpec,
    EvaluationSpec,
    TrainedEnsemble,
    ReportDir,
    StateFile,
}

impl Role {
    pub const ALL: [Role; 7] = [
        Role::Dataset,
        Role::ModelSpec,
        Role::TrainingSpec,
        Role::EvaluationSpec,
        Role::TrainedEnsemble,
        Role::ReportDir,
        Role::StateFile,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Role::Dataset => "dataset",
            Role::ModelSpec => "model_spec",
            Role::TrainingSpec => "training_spec",
            Role::EvaluationSpec => "evaluation_spec",
            Role::TrainedEnsemble => "trained_ensemble",
            Role::ReportDir => "report_dir",
            Role::StateFile => "state_file",
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    MultiAgent,
    React,
    Direct,
}

impl RunMode {
    pub fn name(self) -> &'static str {
        match self {
            RunMode::MultiAgent => "multi_agent",
            RunMode::React => "react",
            RunMode::Direct => "direct",
        }
    }
}
