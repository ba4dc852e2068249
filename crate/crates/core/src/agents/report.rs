use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::context::write_atomic;
use super::executor::Executor;
use super::planner::{sha256_hex, TokenUsage};
use super::state::{persist_state, StageStatus, WorkflowState};
use super::task::{PipelineRecipe, Provenance};
use super::{AgentError, ProjectContext, Role, RunMode, StageName, TaskDocument, TaskKind};
use crate::evaluation::{MetricsReport, RunSummary};

pub const REPORT_FILE: &str = "report.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const TIMINGS_FILE: &str = "timings.json";
pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: StageName,
    pub status: StageStatus,
    pub error_count: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTotals {
    pub calls: usize,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

impl From<&TokenUsage> for TokenTotals {
    fn from(u: &TokenUsage) -> Self {
        Self {
            calls: u.calls.len(),
            prompt_tokens: u.prompt_tokens(),
            completion_tokens: u.completion_tokens(),
            total_tokens: u.total(),
        }
    }
}

/// Outcome of one agent run. Holds no paths or wall times, so identical runs in
/// different workspaces produce identical bytes; timings go to `timings.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub format_version: u32,
    pub run_id: String,
    pub mode: RunMode,
    pub planner: String,
    pub completed: bool,
    pub stages: Vec<StageSummary>,
    /// Errors over the whole run.
    pub error_count: u32,
    /// Stages that hit at least one error.
    pub stages_with_errors: usize,
    /// Task documents patched by the tuning step.
    pub tune_cycles: usize,
    /// `patch_task` calls in the ReAct transcript.
    pub patch_actions: usize,
    pub steps: usize,
    pub test_rmse: Option<f64>,
    pub metrics: Vec<MetricsReport>,
    pub tokens: TokenTotals,
    pub failure: Option<String>,
}

impl FinalReport {
    pub fn summary(&self) -> RunSummary {
        RunSummary {
            completed: self.completed,
            error_count: self.error_count,
            test_rmse: self.test_rmse,
            total_tokens: self.tokens.total_tokens,
        }
    }

    pub fn render_text(&self) -> String {
        let mut s = format!(
            "run {} ({}, planner {})\nstatus: {}\n",
            self.run_id,
            self.mode.name(),
            self.planner,
            if self.completed { "completed" } else { "failed" }
        );
        for st in &self.stages {
            let _ = writeln!(s, "  {:<22} {:<12} errors {}", st.stage.name(), format!("{:?}", st.status).to_lowercase(), st.error_count);
        }
        let _ = writeln!(
            s,
            "errors: {} in {} stage(s); tune cycles: {}; patch actions: {}; steps: {}",
            self.error_count, self.stages_with_errors, self.tune_cycles, self.patch_actions, self.steps
        );
        for m in &self.metrics {
            let _ = writeln!(
                s,
                "  {:<10} n={:<6} rmse={:.1} kW/m2  mape={:.2}%  rmspe={:.2}%",
                m.split, m.n, m.rmse_kw_m2, m.mape_pct, m.rmspe_pct
            );
        }
        let _ = writeln!(
            s,
            "tokens: {} total ({} prompt, {} completion) over {} planner calls",
            self.tokens.total_tokens, self.tokens.prompt_tokens, self.tokens.completion_tokens, self.tokens.calls
        );
        if let Some(f) = &self.failure {
            let _ = writeln!(s, "failure: {f}");
        }
        s
    }

    pub fn load(ctx: &ProjectContext) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(ctx.root.join(REPORT_FILE))?;
        serde_json::from_str(&text).map_err(|e| AgentError::CorruptState(format!("{REPORT_FILE}: {e}")))
    }
}

/// Loop-specific counts the state file does not carry.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct RunCounters {
    pub patch_actions: usize,
    pub steps: usize,
}

/// Accumulated execution wall time per stage, persisted across resumes.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub(crate) struct StageClock(BTreeMap<StageName, f64>);

impl StageClock {
    pub fn load(ctx: &ProjectContext) -> Result<Self, AgentError> {
        let path = ctx.root.join(TIMINGS_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| AgentError::CorruptState(format!("{TIMINGS_FILE}: {e}")))
    }

    pub fn add(&mut self, stage: StageName, secs: f64) {
        *self.0.entry(stage).or_insert(0.0) += secs;
    }

    pub fn save(&self, ctx: &ProjectContext) -> Result<(), AgentError> {
        write_atomic(&ctx.root.join(TIMINGS_FILE), &serde_json::to_vec_pretty(self).expect("timings serialize"))?;
        Ok(())
    }
}

fn read_metrics(ctx: &ProjectContext) -> Vec<MetricsReport> {
    ctx.lookup(Role::ReportDir)
        .ok()
        .and_then(|d| std::fs::read_to_string(d.join("metrics.json")).ok())
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default()
}

fn count_patches(ctx: &ProjectContext) -> usize {
    TaskKind::ALL
        .iter()
        .filter_map(|k| ctx.lookup(k.spec_role()).ok())
        .filter_map(|p| TaskDocument::load(p).ok())
        .map(|d| d.provenance.patches.len())
        .sum()
}

/// Builds the final report from the workspace and writes `report.json` and `report.txt`.
pub(crate) fn synthesize_report(
    ctx: &ProjectContext,
    state: &WorkflowState,
    mode: RunMode,
    planner: &str,
    usage: &TokenUsage,
    counters: RunCounters,
    failure: Option<String>,
) -> Result<FinalReport, AgentError> {
    let metrics = read_metrics(ctx);
    let completed = failure.is_none() && state.is_complete();
    let report = FinalReport {
        format_version: REPORT_FORMAT_VERSION,
        run_id: ctx.run_id.clone(),
        mode,
        planner: planner.to_string(),
        completed,
        stages: StageName::ALL
            .iter()
            .map(|&s| StageSummary { stage: s, status: state.status(s), error_count: state.error_count(s) })
            .collect(),
        error_count: state.total_errors(),
        stages_with_errors: StageName::ALL.iter().filter(|s| state.error_count(**s) > 0).count(),
        tune_cycles: count_patches(ctx),
        patch_actions: counters.patch_actions,
        steps: counters.steps,
        test_rmse: metrics.iter().find(|m| m.split == "test").map(|m| m.rmse_kw_m2),
        metrics,
        tokens: TokenTotals::from(usage),
        failure,
    };
    let json = serde_json::to_vec_pretty(&report).expect("report serializes");
    write_atomic(&ctx.root.join(REPORT_FILE), &json)?;
    write_atomic(&ctx.root.join(REPORT_TEXT_FILE), report.render_text().as_bytes())?;
    Ok(report)
}

/// Runs the recipe's documents in order without a planner or retries; the baseline the
/// agent loops are compared against.
pub fn run_direct(
    ctx: &mut ProjectContext,
    recipe: &PipelineRecipe,
    executor: &mut Executor,
) -> Result<FinalReport, AgentError> {
    let state_path = ctx.lookup(Role::StateFile)?.to_path_buf();
    let mut state = WorkflowState::new(&ctx.run_id, RunMode::Direct);
    let mut clock = StageClock::default();
    let usage = TokenUsage::default();
    persist_state(&state, &state_path)?;
    for kind in TaskKind::ALL {
        let payload = recipe.payload(kind, ctx);
        let doc = TaskDocument::new(
            &payload,
            Provenance { planner: "direct".into(), prompt_digest: sha256_hex(&payload.to_value().to_string()), patches: vec![] },
        );
        let path = ctx.default_path(kind.spec_role());
        doc.save(&path)?;
        ctx.bind(kind.spec_role(), &path)?;
        state.set_status(kind.stage(), StageStatus::InProgress)?;
        let result = executor.execute(&doc, ctx);
        clock.add(kind.stage(), result.wall_time_secs);
        if result.is_ok() {
            state.set_status(kind.stage(), StageStatus::Done)?;
            persist_state(&state, &state_path)?;
            continue;
        }
        let error_count = state.record_error(kind.stage());
        state.set_status(kind.stage(), StageStatus::Failed)?;
        persist_state(&state, &state_path)?;
        clock.save(ctx)?;
        let err = AgentError::StageExhausted { stage: kind.stage(), error_count };
        synthesize_report(ctx, &state, RunMode::Direct, "direct", &usage, RunCounters::default(), Some(err.to_string()))?;
        return Err(err);
    }
    state.set_status(StageName::ReportSynthesis, StageStatus::Done)?;
    clock.save(ctx)?;
    let report = synthesize_report(ctx, &state, RunMode::Direct, "direct", &usage, RunCounters::default(), None)?;
    persist_state(&state, &state_path)?;
    Ok(report)
}
