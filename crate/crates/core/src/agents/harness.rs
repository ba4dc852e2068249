use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::executor::{Executor, FaultInjector, FaultSpec, Sandbox};
use super::multi::{run_multi_agent, MultiAgentOptions};
use super::llm::{LlmConfig, LlmPlanner};
use super::planner::{Planner, ScriptedPlanner, TokenModel};
use super::react::{run_react, ReactOptions};
use super::report::{run_direct, FinalReport};
use super::task::PipelineRecipe;
use super::{AgentError, RunMode, Workspace};
use crate::dataset::Dataset;
use crate::evaluation::{aggregate_trials, RunSummary, TrialStats};

/// Repeated end-to-end runs in separate workspaces.
#[derive(Debug, Clone)]
pub struct HarnessConfig {
    /// Parent directory; trial `i` runs in `root/trial_{i:02}`.
    pub root: PathBuf,
    pub trials: usize,
    /// Trials run concurrently on this many threads.
    pub jobs: usize,
    pub mode: RunMode,
    pub task: String,
    /// Trial `i` trains with seed `base_seed + i`; the split is shared.
    pub base_seed: u64,
    pub recipe: PipelineRecipe,
    /// Indices of trials that get `fault` injected.
    pub fault_trials: Vec<usize>,
    pub fault: FaultSpec,
    pub planner: HarnessPlanner,
    pub max_retries: u32,
    pub max_steps: usize,
}

/// Planner backend instantiated once per trial.
#[derive(Debug, Clone, PartialEq)]
pub enum HarnessPlanner {
    Scripted(TokenModel),
    Llm(LlmConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub index: usize,
    pub seed: u64,
    pub faulted: bool,
    pub summary: RunSummary,
    pub report: Option<FinalReport>,
    pub error: Option<String>,
}

fn run_one(cfg: &HarnessConfig, dataset: &Dataset, index: usize) -> Result<TrialOutcome, AgentError> {
    let seed = cfg.base_seed.wrapping_add(index as u64);
    let root = cfg.root.join(format!("trial_{index:02}"));
    if root.exists() {
        std::fs::remove_dir_all(&root)?;
    }
    let mut ctx = Workspace::init(&root, &format!("trial-{index:02}"), dataset)?;
    let mut recipe = cfg.recipe.clone();
    recipe.train.seed = seed;
    let faulted = cfg.fault_trials.contains(&index);
    let faults = if faulted { FaultInjector::new(vec![cfg.fault.clone()]) } else { FaultInjector::default() };
    let mut executor = Executor::new(Sandbox::new(&ctx.root)).with_faults(faults);
    let mut planner: Box<dyn Planner> = match &cfg.planner {
        HarnessPlanner::Scripted(tokens) => Box::new(ScriptedPlanner::new(recipe.clone()).with_tokens(*tokens)),
        HarnessPlanner::Llm(c) => Box::new(LlmPlanner::from_env(c.clone())?),
    };
    let result = match cfg.mode {
        RunMode::MultiAgent => {
            let opts = MultiAgentOptions { max_retries: cfg.max_retries, ..Default::default() };
            run_multi_agent(&cfg.task, &mut ctx, planner.as_mut(), &mut executor, &opts).map(|(r, _)| r)
        }
        RunMode::React => {
            let opts = ReactOptions { max_steps: cfg.max_steps, ..Default::default() };
            run_react(&cfg.task, &mut ctx, planner.as_mut(), &mut executor, &opts).map(|(r, _, _)| r)
        }
        RunMode::Direct => run_direct(&mut ctx, &recipe, &mut executor),
    };
    let (report, error) = match result {
        Ok(r) => (Some(r), None),
        // Failed runs still leave a report describing how far they got.
        Err(e) => (FinalReport::load(&ctx).ok(), Some(e.to_string())),
    };
    let summary = match &report {
        Some(r) if error.is_none() => r.summary(),
        Some(r) => RunSummary { completed: false, ..r.summary() },
        None => RunSummary { completed: false, error_count: 0, test_rmse: None, total_tokens: 0 },
    };
    Ok(TrialOutcome { index, seed, faulted, summary, report, error })
}

/// Runs every trial and aggregates the robustness statistics. Infrastructure errors
/// (unwritable root, thread pool) abort; agent failures are recorded per trial.
pub fn run_trials(cfg: &HarnessConfig, dataset: &Dataset) -> Result<(Vec<TrialOutcome>, TrialStats), AgentError> {
    std::fs::create_dir_all(&cfg.root)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .map_err(|e| AgentError::Io(std::io::Error::other(e)))?;
    let outcomes: Vec<TrialOutcome> = pool.install(|| {
        (0..cfg.trials)
            .into_par_iter()
            .map(|i| run_one(cfg, dataset, i))
            .collect::<Result<_, _>>()
    })?;
    let summaries: Vec<RunSummary> = outcomes.iter().map(|o| o.summary).collect();
    let stats = aggregate_trials(&summaries);
    Ok((outcomes, stats))
}
