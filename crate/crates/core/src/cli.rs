//! Command-line front end. The binary only forwards its arguments to [`run`].
//!
//! Exit codes: 0 success, 1 error, 2 validation findings.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::agents::{
    self, run_direct, run_multi_agent, run_react, run_trials, Executor, FaultInjector, FaultSpec, HarnessConfig,
    HarnessPlanner, LlmConfig, LlmPlanner, MultiAgentOptions, PipelineRecipe, Planner, ProjectContext,
    ReactOptions, RunMode, Sandbox, ScriptedPlanner, StageName, TokenModel, Workspace, DEFAULT_MAX_RETRIES,
    DEFAULT_MAX_STEPS,
};
use crate::dataset::{
    fit_normalizer, generate_synthetic, load_csv, load_slice_specs, split, standard_slices, validate_ranges, Dataset,
    SliceSpec, SplitDataset, SyntheticConfig, DEFAULT_FRACTIONS,
};
use crate::ensemble::{train_ensemble, Ensemble, MemberSpec, ENSEMBLE_FORMAT_VERSION, FAST_ENSEMBLE_SIZE};
use crate::evaluation::{
    evaluate_model, evaluate_slices, export_report, load_reference_curve, render_robustness_table, EvaluationReport,
    TWO_SIGMA_LEVEL,
};
use crate::hpo::{
    member_specs, run_parallel_bo, run_seeds, select_top_k, training_evaluator, write_canonical_log, BoBudget,
    SearchSpace, TrialResult, DEFAULT_BO_TRIALS, DEFAULT_CANDIDATES, DEFAULT_RUNS, DEFAULT_SOBOL_TRIALS,
    DEFAULT_TOP_K,
};
use crate::neural_net::{MODEL_FORMAT_VERSION, DEFAULT_EPOCHS, DEFAULT_PATIENCE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_FINDINGS: i32 = 2;

const DEFAULT_TASK: &str =
    "Build a deep-ensemble surrogate for critical heat flux from the workspace dataset, train it, evaluate it \
     on the held-out test split and report RMSE, MAPE and RMSPE.";

#[derive(Debug, Parser)]
#[command(name = "autoduct", about = "Deep-ensemble CHF regression with agent-driven orchestration", disable_version_flag = true)]
struct Cli {
    /// Print artifact and schema versions.
    #[arg(long)]
    version: bool,
    /// JSON run configuration; flags given on the command line take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate, validate or split datasets.
    #[command(subcommand)]
    Data(DataCommand),
    /// Hyperparameter search: parallel Sobol + Bayesian-optimization runs.
    Tune(TuneArgs),
    /// Train an ensemble from a top-k manifest or a fixed architecture.
    Train(TrainArgs),
    /// Evaluate a trained ensemble and export metrics, plots and slices.
    Evaluate(EvaluateArgs),
    /// Run the pipeline through an agent loop.
    Agent(AgentArgs),
    /// Repeat agent runs in isolated workspaces and aggregate robustness statistics.
    Trials(TrialsArgs),
}

#[derive(Debug, Subcommand)]
enum DataCommand {
    /// Write a synthetic heteroscedastic dataset.
    Gen(GenArgs),
    /// Report values outside the reference variable ranges (exit 2 if any).
    Validate(ValidateArgs),
    /// Write train/validation/test CSVs.
    Split(DataSplitArgs),
    /// Write the eight tabulated slice specifications as JSON.
    Slices(SlicesArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    #[value(alias = "multi_agent")]
    Multi,
    React,
    Direct,
}

impl From<ModeArg> for RunMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Multi => RunMode::MultiAgent,
            ModeArg::React => RunMode::React,
            ModeArg::Direct => RunMode::Direct,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerArg {
    Scripted,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub noise_scale: f64,
}

fn one() -> f64 {
    1.0
}

/// File form of the shared run settings. Every field is optional; command-line flags
/// override file values, which override built-in defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub workspace: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub synthetic: Option<SyntheticSource>,
    pub fracs: Option<[f64; 3]>,
    pub split_seed: Option<u64>,
    pub seed: Option<u64>,
    pub mode: Option<ModeArg>,
    pub planner: Option<PlannerArg>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub ensemble_size: Option<usize>,
    pub epochs: Option<usize>,
    pub patience: Option<usize>,
    pub sobol: Option<usize>,
    pub bo: Option<usize>,
    pub runs: Option<usize>,
    pub top_k: Option<usize>,
    pub candidates: Option<usize>,
    pub level: Option<f64>,
    pub trials: Option<usize>,
    pub jobs: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Consistency checks that do not depend on the command.
    pub fn validate(&self) -> Result<(), String> {
        if self.data.is_some() && self.synthetic.is_some() {
            return Err("give either a data file or a synthetic source, not both".into());
        }
        if let Some(p) = &self.data {
            if !p.is_file() {
                return Err(format!("data file {} does not exist", p.display()));
            }
        }
        if let Some(f) = self.fracs {
            check_fracs(f)?;
        }
        if self.planner == Some(PlannerArg::Llm) && self.endpoint.is_none() {
            return Err("the llm planner needs an endpoint".into());
        }
        if let Some(l) = self.level {
            if !(l > 0.0 && l < 1.0) {
                return Err(format!("level {l} must be in (0, 1)"));
            }
        }
        for (name, v) in [("ensemble_size", self.ensemble_size), ("epochs", self.epochs), ("trials", self.trials), ("jobs", self.jobs), ("runs", self.runs)] {
            if v == Some(0) {
                return Err(format!("{name} must be at least 1"));
            }
        }
        Ok(())
    }
}

fn check_fracs(f: [f64; 3]) -> Result<(), String> {
    let sum: f64 = f.iter().sum();
    if f.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (sum - 1.0).abs() > 1e-9 || f[0] <= 0.0 {
        return Err(format!("split fractions {f:?} must be non-negative, sum to 1 and give a training share"));
    }
    Ok(())
}

fn parse_fracs(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let f: [f64; 3] = v.try_into().map_err(|_| "expected three comma-separated fractions".to_string())?;
    check_fracs(f)?;
    Ok(f)
}

/// Where the rows come from.
#[derive(Debug, Clone, Default, Args)]
struct DataSource {
    /// CSV file with header D,L,P,G,X,CHF.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use a synthetic dataset of this many rows instead of a file.
    #[arg(long)]
    synthetic_n: Option<usize>,
    /// Seed of the synthetic dataset.
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
struct SplitOpts {
    /// Train,validation,test fractions.
    #[arg(long, value_parser = parse_fracs)]
    fracs: Option<[f64; 3]>,
    /// Seed of the train/validation/test shuffle.
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Rows to generate.
    #[arg(long, default_value_t = 5000)]
    n: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Multiplier on the noise law; 0 gives noiseless targets.
    #[arg(long, default_value_t = 1.0)]
    noise_scale: f64,
    /// CSV file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// CSV file with header D,L,P,G,X,CHF.
    #[arg(long)]
    data: PathBuf,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct DataSplitArgs {
    /// CSV file with header D,L,P,G,X,CHF.
    #[arg(long)]
    data: PathBuf,
    /// Train,validation,test fractions.
    #[arg(long, value_parser = parse_fracs)]
    fracs: Option<[f64; 3]>,
    /// Seed of the shuffle.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for train.csv, validation.csv and test.csv.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct SlicesArgs {
    /// Grid points per slice.
    #[arg(long, default_value_t = 101)]
    points: usize,
    /// JSON file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TuneArgs {
    #[command(flatten)]
    source: DataSource,
    #[command(flatten)]
    split: SplitOpts,
    /// Independent optimization runs, executed in parallel.
    #[arg(long)]
    runs: Option<usize>,
    /// Sobol initialization trials per run.
    #[arg(long)]
    sobol: Option<usize>,
    /// Bayesian-optimization trials per run.
    #[arg(long)]
    bo: Option<usize>,
    /// Trials kept for the ensemble manifest.
    #[arg(long)]
    top_k: Option<usize>,
    /// Candidate points scored by expected improvement per proposal.
    #[arg(long)]
    candidates: Option<usize>,
    /// Maximum training epochs per network.
    #[arg(long)]
    epochs: Option<usize>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    patience: Option<usize>,
    /// Base seed; run seeds and the evaluator derive from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the trial log and top-k manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    source: DataSource,
    #[command(flatten)]
    split: SplitOpts,
    /// Top-k manifest written by `tune`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Members of the fixed baseline architecture when no manifest is given.
    #[arg(long)]
    size: Option<usize>,
    /// Maximum training epochs per network.
    #[arg(long)]
    epochs: Option<usize>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    patience: Option<usize>,
    /// Seed of the first member; member i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
    /// Ensemble directory to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Ensemble directory written by `train`.
    #[arg(long)]
    ensemble: PathBuf,
    #[command(flatten)]
    source: DataSource,
    #[command(flatten)]
    split: SplitOpts,
    /// JSON list of slice specifications.
    #[arg(long, conflicts_with = "standard_slices")]
    slices: Option<PathBuf>,
    /// Evaluate the eight tabulated slices.
    #[arg(long)]
    standard_slices: bool,
    /// Grid points per slice.
    #[arg(long, default_value_t = 101)]
    slice_points: usize,
    /// Reference curve for a slice, as ID=path to a two-column CSV.
    #[arg(long = "reference", value_name = "ID=PATH")]
    references: Vec<String>,
    /// Central probability of the uncertainty band.
    #[arg(long)]
    level: Option<f64>,
    /// Report directory to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args)]
struct PlannerOpts {
    /// Agent loop: multi-agent supervisor, single ReAct loop, or direct train and evaluate.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Scripted rule-table planner or an HTTP chat-completion model.
    #[arg(long, value_enum)]
    planner: Option<PlannerArg>,
    /// Base URL of an OpenAI-compatible API (llm planner). The key is read from AUTODUCT_API_KEY.
    #[arg(long)]
    endpoint: Option<String>,
    /// Model name sent to the chat-completion endpoint.
    #[arg(long)]
    model: Option<String>,
    /// Ensemble members.
    #[arg(long)]
    size: Option<usize>,
    /// Maximum training epochs per network.
    #[arg(long)]
    epochs: Option<usize>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    patience: Option<usize>,
    /// Base training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Central probability of the uncertainty band.
    #[arg(long)]
    level: Option<f64>,
    /// Include the eight tabulated slices in the evaluation task.
    #[arg(long)]
    standard_slices: bool,
    /// Attempts per stage before the multi-agent loop gives up.
    #[arg(long, default_value_t = DEFAULT_MAX_RETRIES)]
    max_retries: u32,
    /// Step budget of the ReAct loop.
    #[arg(long, default_value_t = DEFAULT_MAX_STEPS)]
    max_steps: usize,
}

#[derive(Debug, Args)]
struct AgentArgs {
    /// Run directory; created if missing.
    #[arg(long)]
    workspace: Option<PathBuf>,
    #[command(flatten)]
    source: DataSource,
    #[command(flatten)]
    split: SplitOpts,
    #[command(flatten)]
    planner: PlannerOpts,
    /// Arm the executor fault hook, e.g. stage=evaluate,attempt=1. Repeatable.
    #[arg(long = "inject-fault", value_name = "SPEC")]
    faults: Vec<FaultSpec>,
    /// Continue the run persisted in the workspace.
    #[arg(long)]
    resume: bool,
    /// Store full prompts in the planner log.
    #[arg(long)]
    verbose: bool,
    /// Task statement handed to the planner.
    #[arg(long, default_value = DEFAULT_TASK)]
    task: String,
    /// Stop after this stage as if the process were killed (multi mode).
    #[arg(long, hide = true)]
    halt_after: Option<String>,
}

#[derive(Debug, Args)]
struct TrialsArgs {
    /// Parent directory of the per-trial workspaces.
    #[arg(long)]
    root: PathBuf,
    /// Number of trials.
    #[arg(long)]
    n: Option<usize>,
    /// Trials run concurrently.
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    source: DataSource,
    #[command(flatten)]
    split: SplitOpts,
    #[command(flatten)]
    planner: PlannerOpts,
    /// Comma-separated trial indices that get the fault injected.
    #[arg(long, value_delimiter = ',')]
    fault_trials: Vec<usize>,
    /// Fault armed in the selected trials.
    #[arg(long, default_value = "stage=evaluate,attempt=1")]
    fault: FaultSpec,
    /// Task statement handed to the planner.
    #[arg(long, default_value = DEFAULT_TASK)]
    task: String,
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if cli.version {
        print!("{}", version_text());
        return EXIT_OK;
    }
    let Some(command) = cli.command else {
        eprintln!("no command given; see --help");
        return EXIT_ERROR;
    };
    let config = match cli.config.as_deref().map(RunConfig::load).transpose() {
        Ok(c) => c.unwrap_or_default(),
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    match dispatch(command, &config) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

pub fn version_text() -> String {
    format!(
        "autoduct {}\nmodel format v{MODEL_FORMAT_VERSION}\nensemble format v{ENSEMBLE_FORMAT_VERSION}\n\
         task schema v{}\nstate format v{}\nprompt templates v{}\n",
        env!("CARGO_PKG_VERSION"),
        agents::TASK_VERSION,
        agents::STATE_VERSION,
        agents::PROMPT_TEMPLATE_VERSION
    )
}

type CmdResult = Result<i32, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn dispatch(command: Command, cfg: &RunConfig) -> CmdResult {
    match command {
        Command::Data(d) => match d {
            DataCommand::Gen(a) => cmd_gen(a),
            DataCommand::Validate(a) => cmd_validate(a),
            DataCommand::Split(a) => cmd_split(a),
            DataCommand::Slices(a) => cmd_slices(a),
        },
        Command::Tune(a) => cmd_tune(a, cfg),
        Command::Train(a) => cmd_train(a, cfg),
        Command::Evaluate(a) => cmd_evaluate(a, cfg),
        Command::Agent(a) => cmd_agent(a, cfg),
        Command::Trials(a) => cmd_trials(a, cfg),
    }
}

/// Merges flags over the config file and validates the result.
fn merged(cfg: &RunConfig, source: &DataSource, split: &SplitOpts) -> Result<RunConfig, String> {
    let mut c = cfg.clone();
    if source.data.is_some() {
        c.data = source.data.clone();
        c.synthetic = None;
    }
    if let Some(n) = source.synthetic_n {
        c.data = None;
        c.synthetic = Some(SyntheticSource {
            n,
            seed: source.data_seed.unwrap_or(0),
            noise_scale: 1.0,
        });
    } else if let (Some(s), Some(syn)) = (source.data_seed, c.synthetic.as_mut()) {
        syn.seed = s;
    }
    c.fracs = split.fracs.or(c.fracs);
    c.split_seed = split.split_seed.or(c.split_seed);
    Ok(c)
}

fn load_dataset(c: &RunConfig) -> Result<Dataset, String> {
    match (&c.data, &c.synthetic) {
        (Some(p), _) => load_csv(p).map_err(|e| format!("{}: {e}", p.display())),
        (None, Some(s)) => generate_synthetic(&SyntheticConfig {
            n: s.n,
            seed: s.seed,
            noise_scale: s.noise_scale,
            ..SyntheticConfig::default()
        })
        .map_err(err),
        (None, None) => Err("no dataset: pass --data FILE or --synthetic-n N".into()),
    }
}

fn split_of(c: &RunConfig, ds: &Dataset) -> Result<SplitDataset, String> {
    split(ds, c.fracs.unwrap_or(DEFAULT_FRACTIONS), c.split_seed.unwrap_or(0)).map_err(err)
}

fn cmd_gen(a: GenArgs) -> CmdResult {
    let ds = generate_synthetic(&SyntheticConfig {
        n: a.n,
        seed: a.seed,
        noise_scale: a.noise_scale,
        ..SyntheticConfig::default()
    })
    .map_err(err)?;
    ds.write_csv(&a.out).map_err(err)?;
    println!("wrote {} rows to {}", ds.len(), a.out.display());
    Ok(EXIT_OK)
}

fn cmd_validate(a: ValidateArgs) -> CmdResult {
    let ds = load_csv(&a.data).map_err(|e| format!("{}: {e}", a.data.display()))?;
    let report = validate_ranges(&ds);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(err)?);
    } else {
        print!("{report}");
        println!("{} of {} rows checked; {} values outside the reference ranges", report.n, ds.len(), report.total_violations());
    }
    Ok(if report.is_clean() { EXIT_OK } else { EXIT_FINDINGS })
}

fn cmd_split(a: DataSplitArgs) -> CmdResult {
    let ds = load_csv(&a.data).map_err(|e| format!("{}: {e}", a.data.display()))?;
    let s = split(&ds, a.fracs.unwrap_or(DEFAULT_FRACTIONS), a.seed).map_err(err)?;
    std::fs::create_dir_all(&a.out_dir).map_err(err)?;
    for (name, part) in [("train", &s.train), ("validation", &s.validation), ("test", &s.test)] {
        part.write_csv(&a.out_dir.join(format!("{name}.csv"))).map_err(err)?;
        println!("{name}: {} rows", part.len());
    }
    Ok(EXIT_OK)
}

fn cmd_slices(a: SlicesArgs) -> CmdResult {
    let specs = standard_slices(a.points);
    for s in &specs {
        s.validate().map_err(err)?;
    }
    std::fs::write(&a.out, serde_json::to_string_pretty(&specs).map_err(err)?).map_err(err)?;
    println!("wrote {} slice specs to {}", specs.len(), a.out.display());
    Ok(EXIT_OK)
}

/// Manifest of the selected trials, consumed by `train --manifest`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKManifest {
    pub seed: u64,
    pub epochs: usize,
    pub patience: usize,
    pub trials: Vec<TrialResult>,
}

fn cmd_tune(a: TuneArgs, cfg: &RunConfig) -> CmdResult {
    let c = merged(cfg, &a.source, &a.split)?;
    c.validate()?;
    let ds = load_dataset(&c)?;
    let splits = split_of(&c, &ds)?;
    let norm = fit_normalizer(&splits.train).map_err(err)?;
    let seed = a.seed.or(c.seed).unwrap_or(0);
    let epochs = a.epochs.or(c.epochs).unwrap_or(DEFAULT_EPOCHS);
    let patience = a.patience.or(c.patience).unwrap_or(DEFAULT_PATIENCE);
    let runs = a.runs.or(c.runs).unwrap_or(DEFAULT_RUNS);
    let top_k = a.top_k.or(c.top_k).unwrap_or(DEFAULT_TOP_K);
    let budget = BoBudget {
        n_sobol: a.sobol.or(c.sobol).unwrap_or(DEFAULT_SOBOL_TRIALS),
        n_bo: a.bo.or(c.bo).unwrap_or(DEFAULT_BO_TRIALS),
        candidates: a.candidates.or(c.candidates).unwrap_or(DEFAULT_CANDIDATES),
    };
    eprintln!(
        "tune: {runs} runs x ({} sobol + {} bo) trials, {epochs} epochs, {} train rows",
        budget.n_sobol,
        budget.n_bo,
        splits.train.len()
    );
    let evaluator = training_evaluator(&splits, &norm, epochs, patience, seed);
    let board = run_parallel_bo(&SearchSpace::standard(), &budget, &run_seeds(seed, runs), &evaluator, None).map_err(err)?;

    std::fs::create_dir_all(&a.out).map_err(err)?;
    write_canonical_log(&a.out.join("trials.jsonl"), &board.results).map_err(err)?;
    let mut timings = String::from("trial_id,wall_time_secs\n");
    let mut by_id = board.results.clone();
    by_id.sort_by_key(|r| r.config.trial_id);
    for r in &by_id {
        timings.push_str(&format!("{},{}\n", r.config.trial_id, r.wall_time_secs));
    }
    std::fs::write(a.out.join("trial_timings.csv"), timings).map_err(err)?;
    for (run, best) in board.per_run_best() {
        println!("run {run}: best validation RMSE {:.3} (trial {})", best.val_rmse.unwrap_or(f64::NAN), best.config.trial_id);
    }
    println!("{} trials, {} finished", board.len(), board.ok_count());

    let mut selected = select_top_k(&board, top_k).map_err(err)?;
    // Timings live in trial_timings.csv so the manifest is reproducible.
    for t in &mut selected {
        t.wall_time_secs = 0.0;
    }
    let manifest = TopKManifest { seed, epochs, patience, trials: selected };
    std::fs::write(a.out.join("top_k.json"), serde_json::to_string_pretty(&manifest).map_err(err)?).map_err(err)?;
    println!("top-{top_k} manifest written to {}", a.out.join("top_k.json").display());
    Ok(EXIT_OK)
}

fn cmd_train(a: TrainArgs, cfg: &RunConfig) -> CmdResult {
    let c = merged(cfg, &a.source, &a.split)?;
    c.validate()?;
    let ds = load_dataset(&c)?;
    let splits = split_of(&c, &ds)?;
    let norm = fit_normalizer(&splits.train).map_err(err)?;
    let seed = a.seed.or(c.seed).unwrap_or(0);
    let specs: Vec<MemberSpec> = match &a.manifest {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            let m: TopKManifest = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?;
            let epochs = a.epochs.or(c.epochs).unwrap_or(m.epochs);
            let patience = a.patience.or(c.patience).unwrap_or(m.patience);
            member_specs(&m.trials, epochs, patience, seed)
        }
        None => {
            let size = a.size.or(c.ensemble_size).unwrap_or(FAST_ENSEMBLE_SIZE);
            let mut r = PipelineRecipe::baseline(size, seed);
            r.train.epochs = a.epochs.or(c.epochs).unwrap_or(DEFAULT_EPOCHS);
            r.train.patience = a.patience.or(c.patience).unwrap_or(DEFAULT_PATIENCE);
            r.members
                .iter()
                .enumerate()
                .map(|(i, m)| MemberSpec {
                    mlp: m.mlp,
                    train: crate::neural_net::TrainConfig { seed: seed.wrapping_add(i as u64), ..r.train },
                    trial_id: None,
                })
                .collect()
        }
    };
    eprintln!("train: {} members on {} rows", specs.len(), splits.train.len());
    let ens = train_ensemble(&splits, &norm, &specs).map_err(err)?;
    ens.save(&a.out).map_err(err)?;
    for (i, m) in ens.members.iter().enumerate() {
        if let Some(h) = &m.history {
            println!("member {i}: best epoch {} of {}, validation NLL {:.5}", h.best_epoch, h.epochs_run(), h.best_val_loss());
        }
    }
    println!("ensemble of {} members written to {}", ens.len(), a.out.display());
    Ok(EXIT_OK)
}

fn parse_reference(s: &str) -> Result<(u32, PathBuf), String> {
    let (id, path) = s.split_once('=').ok_or_else(|| format!("expected ID=PATH, got {s:?}"))?;
    Ok((id.trim().parse().map_err(|e| format!("slice id {id:?}: {e}"))?, PathBuf::from(path)))
}

fn cmd_evaluate(a: EvaluateArgs, cfg: &RunConfig) -> CmdResult {
    let c = merged(cfg, &a.source, &a.split)?;
    c.validate()?;
    let level = a.level.or(c.level).unwrap_or(TWO_SIGMA_LEVEL);
    let ens = Ensemble::load(&a.ensemble).map_err(|e| format!("{}: {e}", a.ensemble.display()))?;
    let mut metrics = Vec::new();
    let mut points = Vec::new();
    if c.data.is_some() || c.synthetic.is_some() {
        let ds = load_dataset(&c)?;
        let splits = split_of(&c, &ds)?;
        for (label, part) in [("train", &splits.train), ("validation", &splits.validation), ("test", &splits.test)] {
            if part.is_empty() {
                continue;
            }
            let ev = evaluate_model(&ens, part, label).map_err(err)?;
            let m = &ev.metrics;
            println!(
                "{label:<10} n={:<6} rmse={:.2} kW/m2  mape={:.2}%  rmspe={:.2}%  ratio={:.4}±{:.4}",
                m.n, m.rmse_kw_m2, m.mape_pct, m.rmspe_pct, m.ratio_mean, m.ratio_std
            );
            metrics.push(ev.metrics);
            if label == "test" {
                points = ev.points;
            }
        }
    }
    let specs: Vec<SliceSpec> = match (&a.slices, a.standard_slices) {
        (Some(p), _) => load_slice_specs(p).map_err(|e| format!("{}: {e}", p.display()))?,
        (None, true) => standard_slices(a.slice_points),
        (None, false) => Vec::new(),
    };
    let slices = if specs.is_empty() {
        None
    } else {
        let mut report = evaluate_slices(&ens, &specs, level).map_err(err)?;
        for r in &a.references {
            let (id, path) = parse_reference(r)?;
            let curve = load_reference_curve(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            let pos = report
                .slices
                .iter()
                .position(|s| s.spec.id == id)
                .ok_or_else(|| format!("no slice with id {id}"))?;
            let s = report.slices.remove(pos);
            report.slices.insert(pos, s.with_reference(&curve).map_err(err)?);
        }
        Some(report)
    };
    if metrics.is_empty() && slices.is_none() {
        return Err("nothing to evaluate: give a dataset and/or slices".into());
    }
    let report = EvaluationReport { metrics, points, slices };
    let files = export_report(&report, &a.out).map_err(err)?;
    std::fs::write(a.out.join("metrics.json"), serde_json::to_string_pretty(&report.metrics).map_err(err)?).map_err(err)?;
    println!("{} files written to {}", files.len() + 1, a.out.display());
    Ok(EXIT_OK)
}

fn recipe_from(p: &PlannerOpts, c: &RunConfig) -> Result<PipelineRecipe, String> {
    let seed = p.seed.or(c.seed).unwrap_or(0);
    let mut r = PipelineRecipe::baseline(p.size.or(c.ensemble_size).unwrap_or(FAST_ENSEMBLE_SIZE), seed);
    r.train.epochs = p.epochs.or(c.epochs).unwrap_or(DEFAULT_EPOCHS);
    r.train.patience = p.patience.or(c.patience).unwrap_or(DEFAULT_PATIENCE);
    r.split.fractions = c.fracs.unwrap_or(DEFAULT_FRACTIONS);
    r.split.seed = c.split_seed.unwrap_or(seed);
    r.level = p.level.or(c.level).unwrap_or(TWO_SIGMA_LEVEL);
    if p.standard_slices {
        r.slices = standard_slices(101);
    }
    Ok(r)
}

fn merged_planner(p: &PlannerOpts, c: &mut RunConfig) {
    c.mode = p.mode.or(c.mode);
    c.planner = p.planner.or(c.planner);
    c.endpoint = p.endpoint.clone().or(c.endpoint.take());
    c.model = p.model.clone().or(c.model.take());
}

fn llm_config(c: &RunConfig) -> LlmConfig {
    let mut l = LlmConfig::default();
    if let Some(e) = &c.endpoint {
        l.base_url = e.clone();
    }
    if let Some(m) = &c.model {
        l.model = m.clone();
    }
    l
}

fn cmd_agent(a: AgentArgs, cfg: &RunConfig) -> CmdResult {
    let mut c = merged(cfg, &a.source, &a.split)?;
    merged_planner(&a.planner, &mut c);
    c.workspace = a.workspace.clone().or(c.workspace);
    c.validate()?;
    let root = c.workspace.clone().ok_or("no workspace: pass --workspace DIR")?;
    let mode: RunMode = c.mode.unwrap_or(ModeArg::Multi).into();
    let recipe = recipe_from(&a.planner, &c)?;
    let halt_after = a
        .halt_after
        .as_deref()
        .map(|s| {
            StageName::ALL
                .into_iter()
                .find(|st| st.name() == s || st.task_kind().is_some_and(|k| k.name() == s))
                .ok_or_else(|| format!("unknown stage {s:?}"))
        })
        .transpose()?;

    // Built first so a missing credential does not leave a half-initialized workspace.
    let mut planner: Box<dyn Planner> = match c.planner.unwrap_or(PlannerArg::Scripted) {
        PlannerArg::Scripted => Box::new(ScriptedPlanner::new(recipe.clone())),
        PlannerArg::Llm => Box::new(LlmPlanner::from_env(llm_config(&c)).map_err(err)?),
    };
    let mut ctx = if a.resume {
        if !Workspace::exists(&root) {
            return Err(format!("{} holds no run to resume", root.display()));
        }
        ProjectContext::load(&root).map_err(err)?
    } else {
        if Workspace::exists(&root) {
            return Err(format!("{} already holds a run; pass --resume or choose a new directory", root.display()));
        }
        let ds = load_dataset(&c)?;
        let run_id = format!("run-{}", recipe.train.seed);
        Workspace::init(&root, &run_id, &ds).map_err(err)?
    };
    let mut executor = Executor::new(Sandbox::new(&ctx.root)).with_faults(FaultInjector::new(a.faults.clone()));
    eprintln!("agent: {} run in {}", mode.name(), ctx.root.display());
    let result = match mode {
        RunMode::MultiAgent => {
            let opts = MultiAgentOptions { max_retries: a.planner.max_retries, halt_after, verbose: a.verbose };
            run_multi_agent(&a.task, &mut ctx, planner.as_mut(), &mut executor, &opts).map(|(r, _)| r)
        }
        RunMode::React => {
            let opts = ReactOptions { max_steps: a.planner.max_steps, verbose: a.verbose, ..ReactOptions::default() };
            run_react(&a.task, &mut ctx, planner.as_mut(), &mut executor, &opts).map(|(r, _, _)| r)
        }
        RunMode::Direct => run_direct(&mut ctx, &recipe, &mut executor),
    };
    match result {
        Ok(report) => {
            print!("{}", report.render_text());
            Ok(EXIT_OK)
        }
        Err(e) => Err(format!("{e} (state kept in {}; rerun with --resume)", ctx.root.display())),
    }
}

fn cmd_trials(a: TrialsArgs, cfg: &RunConfig) -> CmdResult {
    let mut c = merged(cfg, &a.source, &a.split)?;
    merged_planner(&a.planner, &mut c);
    c.validate()?;
    let n = a.n.or(c.trials).unwrap_or(10);
    if n == 0 {
        return Err("--n must be at least 1".into());
    }
    if let Some(bad) = a.fault_trials.iter().find(|i| **i >= n) {
        return Err(format!("fault trial {bad} is out of range for {n} trials"));
    }
    let ds = load_dataset(&c)?;
    let mode: RunMode = c.mode.unwrap_or(ModeArg::Multi).into();
    let recipe = recipe_from(&a.planner, &c)?;
    let planner = match c.planner.unwrap_or(PlannerArg::Scripted) {
        PlannerArg::Scripted => HarnessPlanner::Scripted(TokenModel::Table),
        PlannerArg::Llm => HarnessPlanner::Llm(llm_config(&c)),
    };
    let hc = HarnessConfig {
        root: a.root.clone(),
        trials: n,
        jobs: a.jobs.or(c.jobs).unwrap_or(1),
        mode,
        task: a.task.clone(),
        base_seed: recipe.train.seed,
        recipe,
        fault_trials: a.fault_trials.clone(),
        fault: a.fault.clone(),
        planner,
        max_retries: a.planner.max_retries,
        max_steps: a.planner.max_steps,
    };
    eprintln!("trials: {n} {} runs in {}", mode.name(), a.root.display());
    let (outcomes, stats) = run_trials(&hc, &ds).map_err(err)?;
    for o in &outcomes {
        let rmse = o.summary.test_rmse.map_or("n/a".to_string(), |v| format!("{v:.1}"));
        println!(
            "trial {:02}: {} errors={} rmse={rmse} tokens={}{}",
            o.index,
            if o.summary.completed { "completed" } else { "failed" },
            o.summary.error_count,
            o.summary.total_tokens,
            o.error.as_deref().map(|e| format!(" ({e})")).unwrap_or_default()
        );
    }
    let table = render_robustness_table(&[(mode.name(), &stats)]);
    print!("{table}");
    std::fs::write(a.root.join("stats.json"), serde_json::to_string_pretty(&stats).map_err(err)?).map_err(err)?;
    std::fs::write(a.root.join("outcomes.json"), serde_json::to_string_pretty(&outcomes).map_err(err)?).map_err(err)?;
    std::fs::write(a.root.join("robustness.txt"), table).map_err(err)?;
    Ok(EXIT_OK)
}
