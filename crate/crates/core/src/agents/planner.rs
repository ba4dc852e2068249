use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::react::{Directive, Step};
use super::state::{StageStatus, WorkflowState};
use super::task::{PipelineRecipe, Provenance};
use super::{AgentError, ProjectContext, Role, StageName, TaskDocument, TaskKind};

/// Bumped whenever any prompt template text changes.
pub const PROMPT_TEMPLATE_VERSION: u32 = 1;
pub const PLANNER_LOG_FILE: &str = "planner_log.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "purpose", content = "kind")]
pub enum Purpose {
    Generate(TaskKind),
    Tune(TaskKind),
    Think,
}

impl Purpose {
    pub fn label(self) -> String {
        match self {
            Purpose::Generate(k) => format!("generate/{k}"),
            Purpose::Tune(k) => format!("tune/{k}"),
            Purpose::Think => "think".into(),
        }
    }
}

/// Structured view of what the prompt was built from, so offline planners need not
/// parse prose.
#[derive(Debug, Clone)]
pub struct QueryContext {
    pub task: String,
    pub ctx: ProjectContext,
    pub state: WorkflowState,
    /// The failed document, for tuning.
    pub document: Option<TaskDocument>,
    pub error_log: Option<String>,
    /// Recent transcript steps, for thinking.
    pub window: Vec<Step>,
}

#[derive(Debug, Clone)]
pub struct PlannerQuery {
    pub purpose: Purpose,
    pub prompt: String,
    /// Hex SHA-256 of `prompt`.
    pub digest: String,
    pub context: QueryContext,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl CallUsage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerResponse {
    pub text: String,
    pub usage: CallUsage,
}

/// Decision backend behind both control loops.
pub trait Planner: Send {
    fn id(&self) -> String;
    fn plan(&mut self, query: &PlannerQuery) -> Result<PlannerResponse, AgentError>;
}

/// Per-call token counts for one run; totals are always recomputed from the calls.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub calls: Vec<CallUsage>,
}

impl TokenUsage {
    pub fn record(&mut self, usage: CallUsage) {
        self.calls.push(usage);
    }

    pub fn prompt_tokens(&self) -> u64 {
        self.calls.iter().map(|c| c.prompt_tokens).sum()
    }

    pub fn completion_tokens(&self) -> u64 {
        self.calls.iter().map(|c| c.completion_tokens).sum()
    }

    pub fn total(&self) -> u64 {
        self.calls.iter().map(CallUsage::total).sum()
    }
}

pub fn sha256_hex(text: &str) -> String {
    let d = Sha256::digest(text.as_bytes());
    d.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn agent_role(purpose: Purpose) -> &'static str {
    match purpose {
        Purpose::Generate(TaskKind::Model) => "Model Generation agent",
        Purpose::Generate(TaskKind::Train) => "Training agent",
        Purpose::Generate(TaskKind::Evaluate) => "Evaluation agent",
        Purpose::Tune(_) => "Tuning agent",
        Purpose::Think => "ReAct agent",
    }
}

fn payload_schema(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Model => {
            "{\"members\": [{\"mlp\": {\"input_dim\": 5, \"hidden_layers\": int, \"hidden_units\": int, \
             \"activation\": \"relu|leaky_relu|gelu|selu|elu|softplus\", \"dropout_rate\": float}, \
             \"trial_id\": int|null, \"optimizer\": {\"learning_rate\", \"weight_decay\", \"batch_size\"}|null}]}"
        }
        TaskKind::Train => {
            "{\"train\": {\"learning_rate\", \"weight_decay\", \"batch_size\", \"epochs\", \"patience\", \"seed\"}, \
             \"split\": {\"fractions\": [train, validation, test], \"seed\"}, \
             \"dataset\": {\"role\": \"dataset\", \"path\"}, \"model_spec\": {\"role\": \"model_spec\", \"path\"}, \
             \"output\": {\"role\": \"trained_ensemble\", \"path\"}}"
        }
        TaskKind::Evaluate => {
            "{\"metrics\": [\"rmse\"|\"mape\"|\"rmspe\"|\"ratio\"], \"level\": float, \"slices\": [...], \
             \"split\": {\"fractions\", \"seed\"}, \"dataset\": {\"role\": \"dataset\", \"path\"}, \
             \"ensemble\": {\"role\": \"trained_ensemble\", \"path\"}, \"output\": {\"role\": \"report_dir\", \"path\"}}"
        }
    }
}

/// Stage statuses and error counts only; timestamps would make prompts unstable.
fn state_summary(state: &WorkflowState) -> String {
    let mut s = String::new();
    for stage in StageName::ALL {
        let rec = &state.stages[&stage];
        let _ = writeln!(s, "  {stage}: {:?} (errors: {})", rec.status, rec.error_count);
    }
    s
}

fn paths_block(ctx: &ProjectContext) -> String {
    let mut s = format!("  workspace_root: {}\n", ctx.root.display());
    for role in Role::ALL {
        let p = ctx.lookup(role).map(Path::to_path_buf).unwrap_or_else(|_| ctx.default_path(role));
        let _ = writeln!(s, "  {role}: {}", p.display());
    }
    s
}

/// Assembles the prompt for a query from its template and the live context.
pub fn build_prompt(purpose: Purpose, qc: &QueryContext) -> String {
    let mut p = format!(
        "[template v{PROMPT_TEMPLATE_VERSION}: {}]\nYou are the {} in a workflow that builds deep-ensemble \
         surrogate models for critical heat flux.\nTask: {}\nArtifact paths (use these exactly):\n{}",
        purpose.label(),
        agent_role(purpose),
        qc.task,
        paths_block(&qc.ctx)
    );
    match purpose {
        Purpose::Generate(kind) => {
            let _ = write!(
                p,
                "Write the {kind} task document payload.\nRespond with one JSON object of the form {}\n",
                payload_schema(kind)
            );
        }
        Purpose::Tune(kind) => {
            let doc = qc
                .document
                .as_ref()
                .map(|d| serde_json::to_string_pretty(d).expect("document serializes"))
                .unwrap_or_default();
            let _ = write!(
                p,
                "The {kind} task below failed. Return a corrected payload as one JSON object of the form {}\n\
                 Failed document:\n{doc}\nError log:\n{}\n",
                payload_schema(kind),
                qc.error_log.as_deref().unwrap_or("")
            );
        }
        Purpose::Think => {
            let _ = write!(p, "Workflow state:\n{}Tools: {}\nRecent steps:\n", state_summary(&qc.state), super::TOOLS.join(", "));
            for s in &qc.window {
                let _ = writeln!(
                    p,
                    "  [{}] thought: {} | action: {} {} | observation: {}",
                    s.index, s.thought, s.action, s.args, s.observation
                );
            }
            p.push_str(
                "Decide the next action. Respond with one JSON object \
                 {\"thought\": string, \"action\": tool name, \"args\": object}\n",
            );
        }
    }
    p
}

/// Pulls the JSON object out of a planner reply, tolerating code fences and prose.
pub fn extract_json(text: &str) -> Result<serde_json::Value, AgentError> {
    let t = text.trim();
    if let Ok(v) = serde_json::from_str::<serde_json::Value>(t) {
        return Ok(v);
    }
    let (start, end) = (t.find('{'), t.rfind('}'));
    match (start, end) {
        (Some(a), Some(b)) if a < b => serde_json::from_str(&t[a..=b])
            .map_err(|e| AgentError::SchemaInvalid(format!("planner reply is not JSON: {e}"))),
        _ => Err(AgentError::SchemaInvalid("planner reply contains no JSON object".into())),
    }
}

#[derive(Serialize, Deserialize)]
struct LogEntry {
    purpose: Purpose,
    planner: String,
    prompt_digest: String,
    usage: CallUsage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    response: Option<String>,
}

/// A planner bound to one workspace: builds prompts, parses replies, validates the
/// resulting documents and accounts tokens in the workspace's planner log.
pub struct PlannerSession<'p> {
    planner: &'p mut dyn Planner,
    pub usage: TokenUsage,
    log_path: PathBuf,
    verbose: bool,
}

impl<'p> PlannerSession<'p> {
    /// Reloads the usage of earlier invocations from the workspace's planner log so that
    /// resumed runs account every call.
    pub fn open(planner: &'p mut dyn Planner, ctx: &ProjectContext, verbose: bool) -> Result<Self, AgentError> {
        let log_path = ctx.root.join(PLANNER_LOG_FILE);
        let mut usage = TokenUsage::default();
        if log_path.exists() {
            for (i, line) in std::fs::read_to_string(&log_path)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let e: LogEntry = serde_json::from_str(line)
                    .map_err(|e| AgentError::CorruptState(format!("{PLANNER_LOG_FILE} line {}: {e}", i + 1)))?;
                usage.record(e.usage);
            }
        }
        Ok(Self { planner, usage, log_path, verbose })
    }

    pub fn planner_id(&self) -> String {
        self.planner.id()
    }

    fn call(&mut self, purpose: Purpose, qc: QueryContext) -> Result<(PlannerResponse, String), AgentError> {
        let prompt = build_prompt(purpose, &qc);
        let digest = sha256_hex(&prompt);
        let query = PlannerQuery { purpose, prompt, digest: digest.clone(), context: qc };
        let resp = self.planner.plan(&query)?;
        self.usage.record(resp.usage);
        let entry = LogEntry {
            purpose,
            planner: self.planner.id(),
            prompt_digest: digest.clone(),
            usage: resp.usage,
            prompt: self.verbose.then(|| query.prompt.clone()),
            response: self.verbose.then(|| resp.text.clone()),
        };
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&self.log_path)?;
        writeln!(f, "{}", serde_json::to_string(&entry).expect("log entry serializes"))?;
        Ok((resp, digest))
    }

    /// Asks the planner for a stage document; rejected before execution if it fails
    /// schema validation.
    pub fn generate_task(
        &mut self,
        kind: TaskKind,
        task: &str,
        ctx: &ProjectContext,
        state: &WorkflowState,
    ) -> Result<TaskDocument, AgentError> {
        let qc = QueryContext {
            task: task.into(),
            ctx: ctx.clone(),
            state: state.clone(),
            document: None,
            error_log: None,
            window: vec![],
        };
        let (resp, digest) = self.call(Purpose::Generate(kind), qc)?;
        let doc = TaskDocument {
            version: super::TASK_VERSION,
            kind,
            payload: extract_json(&resp.text)?,
            provenance: Provenance { planner: self.planner.id(), prompt_digest: digest, patches: vec![] },
        };
        doc.validate()?;
        Ok(doc)
    }

    /// Hands the failed document and its log to the planner and validates the patch.
    pub fn tune_task(
        &mut self,
        doc: &TaskDocument,
        error_log: &str,
        task: &str,
        ctx: &ProjectContext,
        state: &WorkflowState,
    ) -> Result<TaskDocument, AgentError> {
        if error_log.trim().is_empty() {
            return Err(AgentError::SchemaInvalid("tuning needs a non-empty error log".into()));
        }
        let qc = QueryContext {
            task: task.into(),
            ctx: ctx.clone(),
            state: state.clone(),
            document: Some(doc.clone()),
            error_log: Some(error_log.into()),
            window: vec![],
        };
        let (resp, digest) = self.call(Purpose::Tune(doc.kind), qc)?;
        let mut provenance = doc.provenance.clone();
        provenance.patches.push(digest);
        let patched = TaskDocument {
            version: super::TASK_VERSION,
            kind: doc.kind,
            payload: extract_json(&resp.text)?,
            provenance,
        };
        patched.validate()?;
        Ok(patched)
    }

    /// Next directive for the ReAct loop; the action must name a registered tool.
    pub fn think(
        &mut self,
        task: &str,
        ctx: &ProjectContext,
        state: &WorkflowState,
        window: &[Step],
    ) -> Result<Directive, AgentError> {
        let qc = QueryContext {
            task: task.into(),
            ctx: ctx.clone(),
            state: state.clone(),
            document: None,
            error_log: None,
            window: window.to_vec(),
        };
        let (resp, _) = self.call(Purpose::Think, qc)?;
        Directive::parse(&resp.text)
    }
}

/// Token accounting for the offline planner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenModel {
    /// Fixed prompt/completion counts per purpose, independent of workspace paths.
    Table,
    /// Every call counts as this many prompt tokens.
    Fixed(u64),
    /// Four characters per token of prompt and reply.
    Estimate,
}

impl TokenModel {
    fn usage(self, purpose: Purpose, prompt: &str, reply: &str) -> CallUsage {
        match self {
            TokenModel::Table => {
                let (p, c) = match purpose {
                    Purpose::Generate(TaskKind::Model) => (820, 610),
                    Purpose::Generate(TaskKind::Train) => (910, 380),
                    Purpose::Generate(TaskKind::Evaluate) => (940, 350),
                    Purpose::Tune(_) => (1450, 420),
                    Purpose::Think => (1280, 95),
                };
                CallUsage { prompt_tokens: p, completion_tokens: c }
            }
            TokenModel::Fixed(n) => CallUsage { prompt_tokens: n, completion_tokens: 0 },
            TokenModel::Estimate => CallUsage {
                prompt_tokens: prompt.len().div_ceil(4) as u64,
                completion_tokens: reply.len().div_ceil(4) as u64,
            },
        }
    }
}

/// Deterministic rule-table planner: known-good documents from a recipe, path repair
/// on tuning, and a fixed stage-ordered policy for the ReAct loop.
#[derive(Debug, Clone)]
pub struct ScriptedPlanner {
    pub recipe: PipelineRecipe,
    pub tokens: TokenModel,
    /// Test hook: the first generated document of this kind gets relative artifact paths,
    /// reproducing a planner that writes a wrong path.
    pub relative_path_bug: Option<TaskKind>,
    /// Test hook: think never proposes `finish_task`.
    pub never_finish: bool,
}

impl ScriptedPlanner {
    pub fn new(recipe: PipelineRecipe) -> Self {
        Self { recipe, tokens: TokenModel::Table, relative_path_bug: None, never_finish: false }
    }

    pub fn with_tokens(mut self, tokens: TokenModel) -> Self {
        self.tokens = tokens;
        self
    }

    fn generate(&mut self, kind: TaskKind, qc: &QueryContext) -> serde_json::Value {
        let mut payload = self.recipe.payload(kind, &qc.ctx);
        if self.relative_path_bug == Some(kind) {
            self.relative_path_bug = None;
            for r in payload.artifact_refs_mut() {
                if let Ok(rel) = r.path.strip_prefix(&qc.ctx.root) {
                    r.path = rel.to_path_buf();
                }
            }
        }
        payload.to_value()
    }

    /// Rebinds every artifact reference to the context's path for its role. A document
    /// that no longer parses is regenerated from the recipe.
    fn tune(&self, kind: TaskKind, qc: &QueryContext) -> serde_json::Value {
        let Some(Ok(mut payload)) = qc.document.as_ref().map(TaskDocument::validate) else {
            return self.recipe.payload(kind, &qc.ctx).to_value();
        };
        for r in payload.artifact_refs_mut() {
            r.path = qc
                .ctx
                .lookup(r.role)
                .map(Path::to_path_buf)
                .unwrap_or_else(|_| qc.ctx.default_path(r.role));
        }
        payload.to_value()
    }

    fn think(&self, qc: &QueryContext) -> Directive {
        let d = |thought: &str, action: &str, args: serde_json::Value| Directive {
            thought: thought.into(),
            action: action.into(),
            args,
        };
        if let Some(last) = qc.window.last() {
            let kind = last.args.get("kind").and_then(|k| k.as_str()).and_then(TaskKind::parse);
            if let Some(kind) = kind {
                if last.action == "execute_task" && !last.ok {
                    return d(
                        &format!("The {kind} task failed; patch it using the error log."),
                        "patch_task",
                        serde_json::json!({ "kind": kind }),
                    );
                }
                if last.action == "patch_task" && last.ok {
                    return d(
                        &format!("The {kind} task was patched; run it again."),
                        "execute_task",
                        serde_json::json!({ "kind": kind }),
                    );
                }
            }
        }
        match qc.state.next_stage().and_then(StageName::task_kind) {
            None if self.never_finish => d("Check the last log once more.", "read_log", serde_json::json!({})),
            None => d("Every stage is done; write the report.", "finish_task", serde_json::json!({})),
            Some(kind) => match qc.state.status(kind.stage()) {
                StageStatus::Pending => {
                    let tool = match kind {
                        TaskKind::Model => "generate_model",
                        TaskKind::Train => "generate_training_task",
                        TaskKind::Evaluate => "generate_evaluation_task",
                    };
                    d(&format!("The {kind} stage has no document yet."), tool, serde_json::json!({}))
                }
                _ => d(
                    &format!("The {kind} document is ready; execute it."),
                    "execute_task",
                    serde_json::json!({ "kind": kind }),
                ),
            },
        }
    }
}

impl Planner for ScriptedPlanner {
    fn id(&self) -> String {
        "scripted".into()
    }

    fn plan(&mut self, q: &PlannerQuery) -> Result<PlannerResponse, AgentError> {
        let value = match q.purpose {
            Purpose::Generate(kind) => self.generate(kind, &q.context),
            Purpose::Tune(kind) => self.tune(kind, &q.context),
            Purpose::Think => serde_json::to_value(self.think(&q.context)).expect("directive serializes"),
        };
        let text = serde_json::to_string(&value).expect("reply serializes");
        Ok(PlannerResponse { usage: self.tokens.usage(q.purpose, &q.prompt, &text), text })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::RunMode;

    fn fixture() -> (tempfile::TempDir, ProjectContext, WorkflowState) {
        let dir = tempfile::tempdir().unwrap();
        let ctx = ProjectContext::new(dir.path(), "r").unwrap();
        (dir, ctx, WorkflowState::new("r", RunMode::MultiAgent))
    }

    #[test]
    fn token_totals_are_sums() {
        let mut u = TokenUsage::default();
        assert_eq!(u.total(), 0);
        for _ in 0..7 {
            u.record(CallUsage { prompt_tokens: 100, completion_tokens: 0 });
        }
        assert_eq!(u.total(), 700);
        u.record(CallUsage { prompt_tokens: 3, completion_tokens: 4 });
        assert_eq!(u.total(), u.prompt_tokens() + u.completion_tokens());
    }

    #[test]
    fn scripted_generation_is_deterministic_and_valid() {
        let (_d, ctx, state) = fixture();
        let mut digests = vec![];
        for _ in 0..2 {
            let mut p = ScriptedPlanner::new(PipelineRecipe::baseline(2, 3));
            let mut s = PlannerSession::open(&mut p, &ctx, false).unwrap();
            let doc = s.generate_task(TaskKind::Model, "build", &ctx, &state).unwrap();
            digests.push(doc.provenance.prompt_digest);
        }
        assert_eq!(digests[0], digests[1]);
        assert_eq!(digests[0].len(), 64);
    }

    struct Canned(String);
    impl Planner for Canned {
        fn id(&self) -> String {
            "canned".into()
        }
        fn plan(&mut self, _: &PlannerQuery) -> Result<PlannerResponse, AgentError> {
            Ok(PlannerResponse { text: self.0.clone(), usage: CallUsage::default() })
        }
    }

    #[test]
    fn invalid_generated_payload_is_rejected() {
        let (_d, ctx, state) = fixture();
        let mut p = Canned("```json\n{\"members\": []}\n```".into());
        let mut s = PlannerSession::open(&mut p, &ctx, false).unwrap();
        assert!(matches!(
            s.generate_task(TaskKind::Model, "t", &ctx, &state),
            Err(AgentError::SchemaInvalid(_))
        ));
        let mut p = Canned("{\"thought\": \"x\", \"action\": \"rm_everything\", \"args\": {}}".into());
        let mut s = PlannerSession::open(&mut p, &ctx, false).unwrap();
        assert!(matches!(s.think("t", &ctx, &state, &[]), Err(AgentError::UnknownTool(t)) if t == "rm_everything"));
    }

    #[test]
    fn tuning_repairs_relative_paths() {
        let (_d, mut ctx, state) = fixture();
        ctx.bind(Role::Dataset, &ctx.default_path(Role::Dataset)).unwrap();
        let mut p = ScriptedPlanner::new(PipelineRecipe::baseline(1, 1));
        p.relative_path_bug = Some(TaskKind::Train);
        let mut s = PlannerSession::open(&mut p, &ctx, false).unwrap();
        let doc = s.generate_task(TaskKind::Train, "t", &ctx, &state).unwrap();
        assert_eq!(doc.payload["dataset"]["path"], "data/dataset.csv");
        let fixed = s.tune_task(&doc, "PathError: data/dataset.csv", "t", &ctx, &state).unwrap();
        assert_eq!(fixed.payload["dataset"]["path"].as_str().unwrap(), ctx.default_path(Role::Dataset).to_str().unwrap());
        assert_eq!(fixed.provenance.patches.len(), 1);
        assert!(s.tune_task(&doc, "  ", "t", &ctx, &state).is_err());
    }

    #[test]
    fn session_log_reloads_usage() {
        let (_d, ctx, state) = fixture();
        let mut p = ScriptedPlanner::new(PipelineRecipe::baseline(1, 1)).with_tokens(TokenModel::Fixed(100));
        {
            let mut s = PlannerSession::open(&mut p, &ctx, true).unwrap();
            s.think("t", &ctx, &state, &[]).unwrap();
            s.think("t", &ctx, &state, &[]).unwrap();
        }
        let s = PlannerSession::open(&mut p, &ctx, false).unwrap();
        assert_eq!(s.usage.total(), 200);
    }

    #[test]
    fn fresh_state_starts_with_model_generation() {
        let (_d, ctx, state) = fixture();
        let mut p = ScriptedPlanner::new(PipelineRecipe::baseline(1, 1));
        let mut s = PlannerSession::open(&mut p, &ctx, false).unwrap();
        assert_eq!(s.think("t", &ctx, &state, &[]).unwrap().action, "generate_model");
    }
}
