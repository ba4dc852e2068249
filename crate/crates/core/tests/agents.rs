mod common;

use autoduct::agents::*;
use common::{small_dataset, small_recipe, workspace};

const TASK: &str = "Build a deep-ensemble CHF surrogate and report its test metrics.";

fn executor(ctx: &ProjectContext, faults: &[&str]) -> Executor {
    let specs = faults.iter().map(|f| f.parse().unwrap()).collect();
    Executor::new(Sandbox::recording(&ctx.root)).with_faults(FaultInjector::new(specs))
}

#[test]
fn multi_agent_fault_free_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut ctx = workspace(dir.path(), &small_dataset(300, 1));
    let mut planner = ScriptedPlanner::new(small_recipe(2, 7, 8));
    let mut ex = executor(&ctx, &[]);
    let (report, state) = run_multi_agent(TASK, &mut ctx, &mut planner, &mut ex, &MultiAgentOptions::default()).unwrap();
    assert!(report.completed && state.is_complete());
    assert_eq!((report.tune_cycles, report.error_count), (0, 0));
    assert!(report.test_rmse.unwrap().is_finite());
    assert_eq!(report.tokens.calls, 3);
    for role in [Role::ModelSpec, Role::TrainingSpec, Role::EvaluationSpec, Role::TrainedEnsemble, Role::ReportDir] {
        assert!(ctx.lookup(role).unwrap().exists(), "{role}");
    }
    assert!(ctx.root.join(REPORT_FILE).exists() && ctx.root.join(TIMINGS_FILE).exists());
    assert_eq!(load_state(ctx.lookup(Role::StateFile).unwrap()).unwrap(), state);
    assert!(!ex.sandbox.trace().is_empty());
    assert!(ex.sandbox.trace().iter().all(|(_, p)| p.starts_with(&ctx.root)));
}

#[test]
fn multi_agent_recovers_from_one_fault() {
    let dir = tempfile::tempdir().unwrap();
    let mut ctx = workspace(dir.path(), &small_dataset(300, 1));
    let mut planner = ScriptedPlanner::new(small_recipe(2, 7, 8));
    let mut ex = executor(&ctx, &["stage=evaluate,attempt=1"]);
    let (report, state) = run_multi_agent(TASK, &mut ctx, &mut planner, &mut ex, &MultiAgentOptions::default()).unwrap();
    assert!(report.completed);
    assert_eq!(report.tune_cycles, 1);
    assert_eq!(state.error_count(StageName::EvaluationExecution), 1);
    assert_eq!(report.stages_with_errors, 1);
    assert_eq!(ex.faults.fired(), 1);
}

#[test]
fn persistent_fault_exhausts_then_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let mut ctx = workspace(dir.path(), &small_dataset(300, 1));
    let mut planner = ScriptedPlanner::new(small_recipe(2, 7, 8));
    let mut ex = executor(&ctx, &["stage=evaluate,attempt=all"]);
    let err = run_multi_agent(TASK, &mut ctx, &mut planner, &mut ex, &MultiAgentOptions::default()).unwrap_err();
    assert!(matches!(err, AgentError::StageExhausted { stage: StageName::EvaluationExecution, error_count: 3 }));
    let state = load_state(ctx.lookup(Role::StateFile).unwrap()).unwrap();
    assert_eq!(state.status(StageName::EvaluationExecution), StageStatus::Failed);
    assert_eq!(state.status(StageName::TrainingExecution), StageStatus::Done);
    assert_eq!(state.error_count(StageName::EvaluationExecution), 3);
    let report = FinalReport::load(&ctx).unwrap();
    assert!(!report.completed && report.failure.is_some());

    // The fault clears; the run picks up at evaluation without retraining.
    let mut ctx = ProjectContext::load(dir.path()).unwrap();
    let mut ex = executor(&ctx, &[]);
    let (report, state) = run_multi_agent(TASK, &mut ctx, &mut planner, &mut ex, &MultiAgentOptions::default()).unwrap();
    assert!(report.completed && state.is_complete());
    assert_eq!(report.error_count, 3);
    assert!(ex.sandbox.trace().iter().all(|(a, p)| !(*a == SandboxAccess::Write && p.ends_with("ensemble"))));
}

#[test]
fn wrong_relative_path_is_repaired_by_tuning() {
    let dir = tempfile::tempdir().unwrap();
    let mut ctx = workspace(dir.path(), &small_dataset(300, 1));
    let mut planner = ScriptedPlanner::new(small_recipe(2, 7, 8));
    planner.relative_path_bug = Some(TaskKind::Train);
    let mut ex = executor(&ctx, &[]);
    let (report, _) = run_multi_agent(TASK, &mut ctx, &mut planner, &mut ex, &MultiAgentOptions::default()).unwrap();
    assert_eq!(report.tune_cycles, 1);
    assert_eq!(report.stages[1].error_count, 1);
    let doc = TaskDocument::load(ctx.lookup(Role::TrainingSpec).unwrap()).unwrap();
    assert_eq!(doc.provenance.patches.len(), 1);
}

#[test]
fn react_fault_free_and_with_fault() {
    let dir = tempfile::tempdir().unwrap();
    let mut ctx = workspace(dir.path(), &small_dataset(300, 1));
    let mut planner = ScriptedPlanner::new(small_recipe(2, 7, 8));
    let mut ex = executor(&ctx, &[]);
    let (report, state, t) = run_react(TASK, &mut ctx, &mut planner, &mut ex, &ReactOptions::default()).unwrap();
    assert!(report.completed && state.is_complete());
    let actions: Vec<&str> = t.history().iter().map(|s| s.action.as_str()).collect();
    assert_eq!(
        actions,
        [
            "generate_model",
            "execute_task",
            "generate_training_task",
            "execute_task",
            "generate_evaluation_task",
            "execute_task",
            "finish_task"
        ]
    );
    assert_eq!(t.history()[0].observation, "ok: generate_model → model spec registered");
    assert_eq!(report.patch_actions, 0);
    assert_eq!(report.steps, 7);

    let dir = tempfile::tempdir().unwrap();
    let mut ctx = workspace(dir.path(), &small_dataset(300, 1));
    let mut ex = executor(&ctx, &["stage=evaluate,attempt=1"]);
    let opts = ReactOptions { window: 3, ..Default::default() };
    let (report, _, t) = run_react(TASK, &mut ctx, &mut planner, &mut ex, &opts).unwrap();
    assert!(report.completed);
    let errors: Vec<usize> = t.history().iter().filter(|s| !s.ok).map(|s| s.index).collect();
    assert_eq!(errors.len(), 1);
    let e = errors[0];
    assert!(t.history()[e].observation.starts_with("error: execute_task → InjectedFault"));
    assert_eq!(t.history()[e + 1].action, "patch_task");
    assert_eq!(t.count_action("patch_task"), 1);
    assert_eq!(report.patch_actions, 1);
    assert!(t.window().len() <= 3);
    assert_eq!(t.history().last().unwrap().action, "finish_task");
}

#[test]
fn react_step_budget() {
    let dir = tempfile::tempdir().unwrap();
    let mut ctx = workspace(dir.path(), &small_dataset(300, 1));
    let mut planner = ScriptedPlanner::new(small_recipe(1, 7, 3));
    planner.never_finish = true;
    let mut ex = executor(&ctx, &[]);
    let opts = ReactOptions { max_steps: 20, ..Default::default() };
    let err = run_react(TASK, &mut ctx, &mut planner, &mut ex, &opts).unwrap_err();
    assert!(matches!(err, AgentError::StepBudgetExhausted(20)));
    assert_eq!(FinalReport::load(&ctx).unwrap().steps, 20);
}

#[test]
fn execution_outside_workspace_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let outside = tempfile::tempdir().unwrap();
    let mut ctx = workspace(dir.path(), &small_dataset(200, 1));
    let recipe = small_recipe(1, 1, 2);
    let mut payload = recipe.payload(TaskKind::Train, &ctx);
    if let Payload::Train(p) = &mut payload {
        p.output.path = outside.path().join("ens");
    }
    let prov = Provenance { planner: "test".into(), prompt_digest: String::new(), patches: vec![] };
    let model = TaskDocument::new(&recipe.payload(TaskKind::Model, &ctx), prov.clone());
    let spec = ctx.default_path(Role::ModelSpec);
    model.save(&spec).unwrap();
    ctx.bind(Role::ModelSpec, &spec).unwrap();
    let mut ex = executor(&ctx, &[]);
    let r = ex.execute(&TaskDocument::new(&payload, prov), &mut ctx);
    assert_eq!(r.status, ExecStatus::Error);
    assert!(r.log.contains("SandboxViolation"));
    assert!(!outside.path().join("ens").exists());
    assert!(!ctx.is_bound(Role::TrainedEnsemble));
    assert!(ex.sandbox.trace().iter().all(|(_, p)| p.starts_with(&ctx.root)));
}

#[test]
fn direct_mode_and_determinism() {
    let data = small_dataset(300, 1);
    let mut bytes = vec![];
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let mut ctx = workspace(dir.path(), &data);
        let mut ex = executor(&ctx, &[]);
        let report = run_direct(&mut ctx, &small_recipe(2, 3, 6), &mut ex).unwrap();
        assert!(report.completed);
        assert_eq!(report.tokens.total_tokens, 0);
        bytes.push(std::fs::read(ctx.root.join(REPORT_FILE)).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn harness_buckets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = HarnessConfig {
        root: dir.path().to_path_buf(),
        trials: 4,
        jobs: 2,
        mode: RunMode::MultiAgent,
        task: TASK.into(),
        base_seed: 10,
        recipe: small_recipe(1, 0, 4),
        fault_trials: vec![2],
        fault: "stage=train,attempt=1".parse().unwrap(),
        planner: HarnessPlanner::Scripted(TokenModel::Fixed(100)),
        max_retries: 3,
        max_steps: 40,
    };
    let (outcomes, stats) = run_trials(&cfg, &small_dataset(200, 2)).unwrap();
    assert_eq!(outcomes.len(), 4);
    assert_eq!((stats.completed_without_error, stats.completed_with_one_error, stats.failed), (3, 1, 0));
    // 3 generations per run plus one tuning call in the faulted run.
    assert_eq!(stats.total_tokens, 100 * (3 * 4 + 1));
    assert!(outcomes[2].faulted && outcomes[2].summary.error_count == 1);
    assert!(dir.path().join("trial_03").join(REPORT_FILE).exists());
}
