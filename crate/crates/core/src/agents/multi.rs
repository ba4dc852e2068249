use super::executor::Executor;
use super::planner::{Planner, PlannerSession};
use super::report::{synthesize_report, FinalReport, RunCounters, StageClock};
use super::state::{load_state, persist_state, StageStatus, WorkflowState};
use super::{AgentError, ProjectContext, Role, RunMode, StageName, TaskDocument, TaskKind};

pub const DEFAULT_MAX_RETRIES: u32 = 3;

#[derive(Debug, Clone)]
pub struct MultiAgentOptions {
    /// Executions allowed per stage within one invocation before giving up.
    pub max_retries: u32,
    /// Stop (as if killed) right after this stage completes.
    pub halt_after: Option<StageName>,
    pub verbose: bool,
}

impl Default for MultiAgentOptions {
    fn default() -> Self {
        Self { max_retries: DEFAULT_MAX_RETRIES, halt_after: None, verbose: false }
    }
}

/// The state file of the workspace, or a fresh state when there is none yet.
pub(crate) fn load_or_new_state(ctx: &ProjectContext, mode: RunMode) -> Result<WorkflowState, AgentError> {
    let path = ctx.lookup(Role::StateFile)?;
    if path.exists() {
        load_state(path)
    } else {
        Ok(WorkflowState::new(&ctx.run_id, mode))
    }
}

/// The supervisor. Every document, result and error log passes through here; the
/// generating, executing and tuning roles never talk to each other.
struct Supervisor<'a, 'p> {
    task: &'a str,
    ctx: &'a mut ProjectContext,
    state: WorkflowState,
    session: PlannerSession<'p>,
    executor: &'a mut Executor,
    clock: StageClock,
    state_path: std::path::PathBuf,
}

impl Supervisor<'_, '_> {
    fn persist(&self) -> Result<(), AgentError> {
        persist_state(&self.state, &self.state_path)
    }

    fn store(&mut self, doc: &TaskDocument) -> Result<(), AgentError> {
        let role = doc.kind.spec_role();
        let path = match self.ctx.lookup(role) {
            Ok(p) => p.to_path_buf(),
            Err(_) => self.ctx.default_path(role),
        };
        doc.save(&path)?;
        self.ctx.bind(role, &path)?;
        self.ctx.save()
    }

    /// A resumed stage reuses its stored document; otherwise the planner writes one.
    fn document_for(&mut self, kind: TaskKind) -> Result<TaskDocument, AgentError> {
        let stage = kind.stage();
        if self.state.status(stage) != StageStatus::Pending {
            if let Ok(doc) = self.ctx.lookup(kind.spec_role()).and_then(TaskDocument::load) {
                if doc.kind == kind && doc.validate().is_ok() {
                    return Ok(doc);
                }
            }
        }
        let doc = self.session.generate_task(kind, self.task, self.ctx, &self.state)?;
        self.store(&doc)?;
        self.state.set_status(stage, StageStatus::InProgress)?;
        self.persist()?;
        Ok(doc)
    }

    fn run_stage(&mut self, kind: TaskKind, max_retries: u32) -> Result<(), AgentError> {
        let stage = kind.stage();
        let mut doc = self.document_for(kind)?;
        let mut attempts = 0;
        loop {
            let result = self.executor.execute(&doc, self.ctx);
            self.clock.add(stage, result.wall_time_secs);
            attempts += 1;
            if result.is_ok() {
                self.state.set_status(stage, StageStatus::Done)?;
                self.persist()?;
                return Ok(());
            }
            let error_count = self.state.record_error(stage);
            if attempts >= max_retries {
                self.state.set_status(stage, StageStatus::Failed)?;
                self.persist()?;
                return Err(AgentError::StageExhausted { stage, error_count });
            }
            self.state.set_status(stage, StageStatus::Failed)?;
            self.persist()?;
            doc = self.session.tune_task(&doc, &result.log, self.task, self.ctx, &self.state)?;
            self.store(&doc)?;
            self.state.set_status(stage, StageStatus::InProgress)?;
            self.persist()?;
        }
    }

    fn report(&mut self, failure: Option<String>) -> Result<FinalReport, AgentError> {
        self.clock.save(self.ctx)?;
        let id = self.session.planner_id();
        synthesize_report(self.ctx, &self.state, RunMode::MultiAgent, &id, &self.session.usage, RunCounters::default(), failure)
    }
}

/// Supervisor loop: for each stage, generate a document, execute it, and on error tune
/// and re-execute up to `max_retries` executions; then synthesize the report. State is
/// persisted after every transition, and an existing state file is resumed.
pub fn run_multi_agent(
    task: &str,
    ctx: &mut ProjectContext,
    planner: &mut dyn Planner,
    executor: &mut Executor,
    opts: &MultiAgentOptions,
) -> Result<(FinalReport, WorkflowState), AgentError> {
    let max_retries = opts.max_retries.max(1);
    let state = load_or_new_state(ctx, RunMode::MultiAgent)?;
    let state_path = ctx.lookup(Role::StateFile)?.to_path_buf();
    let session = PlannerSession::open(planner, ctx, opts.verbose)?;
    let clock = StageClock::load(ctx)?;
    let mut sup = Supervisor { task, ctx, state, session, executor, clock, state_path };
    sup.persist()?;

    for kind in TaskKind::ALL {
        if sup.state.status(kind.stage()) == StageStatus::Done {
            continue;
        }
        if let Err(e) = sup.run_stage(kind, max_retries) {
            sup.report(Some(e.to_string()))?;
            return Err(e);
        }
        if opts.halt_after == Some(kind.stage()) {
            sup.clock.save(sup.ctx)?;
            return Err(AgentError::Halted(kind.stage()));
        }
    }
    if sup.state.status(StageName::ReportSynthesis) != StageStatus::Done {
        sup.state.set_status(StageName::ReportSynthesis, StageStatus::InProgress)?;
        sup.persist()?;
    }
    sup.state.set_status(StageName::ReportSynthesis, StageStatus::Done)?;
    let report = sup.report(None)?;
    sup.persist()?;
    Ok((report, sup.state))
}
