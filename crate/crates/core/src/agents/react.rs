use serde::{Deserialize, Serialize};

use super::executor::{ExecutionResult, Executor};
use super::planner::{extract_json, Planner, PlannerSession};
use super::report::{synthesize_report, FinalReport, RunCounters, StageClock};
use super::state::{persist_state, StageStatus, WorkflowState};
use super::{AgentError, ProjectContext, Role, RunMode, StageName, TaskDocument, TaskKind};

pub const TOOLS: [&str; 7] = [
    "generate_model",
    "generate_training_task",
    "generate_evaluation_task",
    "execute_task",
    "patch_task",
    "read_log",
    "finish_task",
];
pub const DEFAULT_WINDOW: usize = 8;
pub const DEFAULT_MAX_STEPS: usize = 40;
pub const OBSERVATION_LIMIT: usize = 512;

/// One planner decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Directive {
    pub thought: String,
    pub action: String,
    #[serde(default)]
    pub args: serde_json::Value,
}

impl Directive {
    /// Parses a planner reply; the action must be a registered tool.
    pub fn parse(text: &str) -> Result<Self, AgentError> {
        let d: Directive = serde_json::from_value(extract_json(text)?)
            .map_err(|e| AgentError::SchemaInvalid(format!("directive: {e}")))?;
        if !TOOLS.contains(&d.action.as_str()) {
            return Err(AgentError::UnknownTool(d.action));
        }
        Ok(d)
    }

    fn kind_arg(&self) -> Option<TaskKind> {
        self.args.get("kind").and_then(|k| k.as_str()).and_then(TaskKind::parse)
    }
}

/// A thought, action, observation triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub thought: String,
    pub action: String,
    pub args: serde_json::Value,
    pub observation: String,
    pub ok: bool,
}

/// Append-only step history with a bounded window of recent steps for prompting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    bound: usize,
    history: Vec<Step>,
}

impl Transcript {
    pub fn new(bound: usize) -> Self {
        Self { bound: bound.max(1), history: Vec::new() }
    }

    pub fn bound(&self) -> usize {
        self.bound
    }

    pub fn push(&mut self, step: Step) {
        self.history.push(step);
    }

    pub fn window(&self) -> &[Step] {
        &self.history[self.history.len().saturating_sub(self.bound)..]
    }

    pub fn history(&self) -> &[Step] {
        &self.history
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn count_action(&self, action: &str) -> usize {
        self.history.iter().filter(|s| s.action == action).count()
    }
}

/// One-line summary of a tool result, capped at `OBSERVATION_LIMIT` characters.
pub fn observe(action: &str, result: &ExecutionResult) -> String {
    let line = if result.is_ok() {
        format!("ok: {action} → {}", result.summary)
    } else {
        format!("error: {action} → {}", result.first_log_line())
    };
    match line.char_indices().nth(OBSERVATION_LIMIT) {
        Some((cut, _)) => line[..cut].to_string(),
        None => line,
    }
}

#[derive(Debug, Clone)]
pub struct ReactOptions {
    pub max_steps: usize,
    pub window: usize,
    /// Store full prompts in the planner log.
    pub verbose: bool,
}

impl Default for ReactOptions {
    fn default() -> Self {
        Self { max_steps: DEFAULT_MAX_STEPS, window: DEFAULT_WINDOW, verbose: false }
    }
}

struct Loop<'a, 'p> {
    task: &'a str,
    ctx: &'a mut ProjectContext,
    state: WorkflowState,
    session: PlannerSession<'p>,
    executor: &'a mut Executor,
    clock: StageClock,
}

impl Loop<'_, '_> {
    fn persist(&self) -> Result<(), AgentError> {
        persist_state(&self.state, self.ctx.lookup(Role::StateFile)?)
    }

    fn load_doc(&self, kind: TaskKind) -> Result<TaskDocument, AgentError> {
        TaskDocument::load(self.ctx.lookup(kind.spec_role())?)
    }

    fn store_doc(&mut self, doc: &TaskDocument) -> Result<(), AgentError> {
        let path = self.ctx.default_path(doc.kind.spec_role());
        let path = self.ctx.lookup(doc.kind.spec_role()).map(|p| p.to_path_buf()).unwrap_or(path);
        doc.save(&path)?;
        self.ctx.bind(doc.kind.spec_role(), &path)?;
        self.ctx.save()
    }

    fn predecessors_done(&self, kind: TaskKind) -> Result<(), String> {
        let stage = kind.stage();
        match StageName::ALL
            .iter()
            .take_while(|s| **s != stage)
            .find(|s| self.state.status(**s) != StageStatus::Done)
        {
            Some(prior) => Err(format!("PreconditionError: {stage} needs {prior} to be done first")),
            None => Ok(()),
        }
    }

    fn generate(&mut self, kind: TaskKind) -> Result<ExecutionResult, AgentError> {
        if let Err(msg) = self.predecessors_done(kind) {
            return Ok(ExecutionResult::error(Some(kind), msg));
        }
        let doc = match self.session.generate_task(kind, self.task, self.ctx, &self.state) {
            Ok(d) => d,
            Err(e @ AgentError::SchemaInvalid(_)) => return Ok(ExecutionResult::error(Some(kind), e.to_string())),
            Err(e) => return Err(e),
        };
        self.store_doc(&doc)?;
        if self.state.status(kind.stage()) != StageStatus::Done {
            self.state.set_status(kind.stage(), StageStatus::InProgress)?;
        }
        let what = match kind {
            TaskKind::Model => "model spec",
            TaskKind::Train => "training task",
            TaskKind::Evaluate => "evaluation task",
        };
        Ok(ExecutionResult::ok(Some(kind), format!("{what} registered"), super::render_script(&doc)))
    }

    fn execute(&mut self, kind: TaskKind) -> Result<ExecutionResult, AgentError> {
        let doc = match self.load_doc(kind) {
            Ok(d) => d,
            Err(e) => return Ok(ExecutionResult::error(Some(kind), format!("no {kind} document: {e}"))),
        };
        if let Err(msg) = self.predecessors_done(kind) {
            return Ok(ExecutionResult::error(Some(kind), msg));
        }
        let result = self.executor.execute(&doc, self.ctx);
        self.clock.add(kind.stage(), result.wall_time_secs);
        if result.is_ok() {
            self.state.set_status(kind.stage(), StageStatus::Done)?;
        } else if self.state.status(kind.stage()) != StageStatus::Done {
            self.state.record_error(kind.stage());
            self.state.set_status(kind.stage(), StageStatus::Failed)?;
        }
        Ok(result)
    }

    fn patch(&mut self, kind: TaskKind) -> Result<ExecutionResult, AgentError> {
        let doc = match self.load_doc(kind) {
            Ok(d) => d,
            Err(e) => return Ok(ExecutionResult::error(Some(kind), format!("no {kind} document: {e}"))),
        };
        let Some(log) = self.executor.last_failure().map(str::to_string) else {
            return Ok(ExecutionResult::error(Some(kind), "nothing to patch: no failed execution"));
        };
        let patched = match self.session.tune_task(&doc, &log, self.task, self.ctx, &self.state) {
            Ok(d) => d,
            Err(e @ AgentError::SchemaInvalid(_)) => return Ok(ExecutionResult::error(Some(kind), e.to_string())),
            Err(e) => return Err(e),
        };
        self.store_doc(&patched)?;
        if self.state.status(kind.stage()) != StageStatus::Done {
            self.state.set_status(kind.stage(), StageStatus::InProgress)?;
        }
        Ok(ExecutionResult::ok(Some(kind), format!("{kind} task patched"), super::render_script(&patched)))
    }

    fn act(&mut self, d: &Directive) -> Result<(ExecutionResult, bool), AgentError> {
        let needs_kind = |k: Option<TaskKind>| {
            k.ok_or_else(|| ExecutionResult::error(None, format!("{} needs args.kind (model, train or evaluate)", d.action)))
        };
        let r = match d.action.as_str() {
            "generate_model" => self.generate(TaskKind::Model)?,
            "generate_training_task" => self.generate(TaskKind::Train)?,
            "generate_evaluation_task" => self.generate(TaskKind::Evaluate)?,
            "execute_task" => match needs_kind(d.kind_arg()) {
                Ok(k) => self.execute(k)?,
                Err(r) => r,
            },
            "patch_task" => match needs_kind(d.kind_arg()) {
                Ok(k) => self.patch(k)?,
                Err(r) => r,
            },
            "read_log" => match self.executor.last_failure() {
                Some(log) => ExecutionResult::ok(None, log.lines().next().unwrap_or_default().to_string(), log),
                None => ExecutionResult::ok(None, "no failures recorded", ""),
            },
            "finish_task" => {
                return Ok(match self.state.next_stage() {
                    Some(StageName::ReportSynthesis) | None => {
                        (ExecutionResult::ok(None, "report synthesis requested", ""), true)
                    }
                    Some(stage) => (
                        ExecutionResult::error(None, format!("PreconditionError: cannot finish while {stage} is not done")),
                        false,
                    ),
                });
            }
            other => ExecutionResult::error(None, format!("UnknownTool: {other}")),
        };
        Ok((r, false))
    }
}

/// Single-agent loop: think, act, observe until `finish_task` or the step budget runs out.
/// Resumes from the workspace's state file when one exists.
pub fn run_react(
    task: &str,
    ctx: &mut ProjectContext,
    planner: &mut dyn Planner,
    executor: &mut Executor,
    opts: &ReactOptions,
) -> Result<(FinalReport, WorkflowState, Transcript), AgentError> {
    let state = super::multi::load_or_new_state(ctx, RunMode::React)?;
    let session = PlannerSession::open(planner, ctx, opts.verbose)?;
    let clock = StageClock::load(ctx)?;
    let mut lp = Loop { task, ctx, state, session, executor, clock };
    let mut transcript = Transcript::new(opts.window);
    lp.persist()?;

    let mut finished = lp.state.is_complete();
    while !finished {
        if transcript.len() >= opts.max_steps {
            lp.clock.save(lp.ctx)?;
            let counters = RunCounters { patch_actions: transcript.count_action("patch_task"), steps: transcript.len() };
            let err = AgentError::StepBudgetExhausted(transcript.len());
            let id = lp.session.planner_id();
            synthesize_report(lp.ctx, &lp.state, RunMode::React, &id, &lp.session.usage, counters, Some(err.to_string()))?;
            return Err(err);
        }
        let index = transcript.len();
        let (directive, result, done) = match lp.session.think(task, lp.ctx, &lp.state, transcript.window()) {
            Ok(d) => {
                let (r, done) = lp.act(&d)?;
                (d, r, done)
            }
            Err(e @ (AgentError::UnknownTool(_) | AgentError::SchemaInvalid(_))) => {
                let d = Directive { thought: String::new(), action: "invalid_directive".into(), args: serde_json::Value::Null };
                (d, ExecutionResult::error(None, e.to_string()), false)
            }
            Err(e) => return Err(e),
        };
        transcript.push(Step {
            index,
            observation: observe(&directive.action, &result),
            ok: result.is_ok(),
            thought: directive.thought,
            action: directive.action,
            args: directive.args,
        });
        lp.persist()?;
        finished = done;
    }

    lp.clock.save(lp.ctx)?;
    let counters = RunCounters {
        patch_actions: transcript.count_action("patch_task"),
        steps: transcript.len(),
    };
    if lp.state.status(StageName::ReportSynthesis) != StageStatus::Done {
        lp.state.set_status(StageName::ReportSynthesis, StageStatus::Done)?;
    }
    let id = lp.session.planner_id();
    let report = synthesize_report(lp.ctx, &lp.state, RunMode::React, &id, &lp.session.usage, counters, None)?;
    lp.persist()?;
    Ok((report, lp.state, transcript))
}
