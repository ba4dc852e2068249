//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line (written straight to
//! stderr so it shows without `--nocapture`) and then asserts. Reference values are
//! computed here by independent code, never by the library under test.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use autoduct::agents::*;
use autoduct::dataset::{
    build_slice_grid, fit_normalizer, generate_synthetic, split, standard_slices, Feature, SyntheticConfig,
    DEFAULT_FRACTIONS,
};
use autoduct::ensemble::{aggregate, train_ensemble, MemberSpec};
use autoduct::evaluation::{mape, render_robustness_table, rmse, rmspe, evaluate_slices, ROBUSTNESS_ROWS, TWO_SIGMA_LEVEL};
use autoduct::hpo::sobol::Sobol;
use autoduct::hpo::{ei_closed_form, run_parallel_bo, run_seeds, select_top_k, training_evaluator, BoBudget, SearchSpace};
use autoduct::neural_net::{backward, forward, init_params, nll_loss, Activation, GaussianPrediction, MlpConfig, Mode, TrainConfig};
use common::{small_dataset, small_recipe, workspace};

const TASK: &str = "Build a deep-ensemble CHF surrogate and report its test metrics.";

/// Runs one criterion, prints its verdict line and fails the test on a miss. `check`
/// returns (passed, measured detail); the runtime limit is part of the verdict.
fn criterion(id: u32, title: &str, limit: Duration, check: impl FnOnce() -> (bool, String)) {
    let start = Instant::now();
    let (ok, detail) = check();
    let elapsed = start.elapsed();
    let in_time = elapsed <= limit;
    let verdict = if ok && in_time { "PASS" } else { "FAIL" };
    let line = format!(
        "ACCEPTANCE {id:>2} {verdict}: {title} | {detail} | {:.1}s (limit {}s)\n",
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    let mut err = std::io::stderr().lock();
    let _ = err.write_all(line.as_bytes());
    let _ = err.flush();
    assert!(ok && in_time, "{}", line.trim_end());
}

fn mins(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

/// Box-Muller standard normal pair.
fn normal_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    let r = (-2.0 * u1.ln()).sqrt();
    let t = std::f64::consts::TAU * u2;
    (r * t.cos(), r * t.sin())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if !n.is_multiple_of(2) {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn c01_variance_decomposition() {
    criterion(1, "variance decomposition identity and mixture Monte-Carlo", mins(1), || {
        const ENSEMBLES: usize = 1000;
        const DRAWS: usize = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(0xC01);
        let (mut worst_identity, mut worst_oracle, mut worst_mc) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..ENSEMBLES {
            let m = rng.random_range(1..=32usize);
            let members: Vec<GaussianPrediction> = (0..m)
                .map(|_| GaussianPrediction { mu: rng.random_range(100.0..5000.0), var: rng.random_range(1.0..1e5) })
                .collect();
            let ep = aggregate(&members).unwrap();
            worst_identity = worst_identity.max((ep.aleatory_var + ep.epistemic_var - ep.total_var).abs() / ep.total_var);

            // Mixture moments from their definitions.
            let mean = members.iter().map(|p| p.mu).sum::<f64>() / m as f64;
            let alea = members.iter().map(|p| p.var).sum::<f64>() / m as f64;
            let epi = members.iter().map(|p| (p.mu - mean).powi(2)).sum::<f64>() / m as f64;
            worst_oracle = worst_oracle
                .max((ep.mean - mean).abs() / mean)
                .max((ep.total_var - (alea + epi)).abs() / (alea + epi));

            // Sample the equal-weight mixture: pick a member, then draw from its Gaussian.
            let sd: Vec<f64> = members.iter().map(|p| p.var.sqrt()).collect();
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..DRAWS / 2 {
                let (z1, z2) = normal_pair(&mut rng);
                for z in [z1, z2] {
                    let k = rng.random_range(0..m);
                    let d = members[k].mu + sd[k] * z - mean;
                    s1 += d;
                    s2 += d * d;
                }
            }
            let n = DRAWS as f64;
            let mc_var = s2 / n - (s1 / n).powi(2);
            worst_mc = worst_mc.max((mc_var - ep.total_var).abs() / ep.total_var);
        }
        let ok = worst_identity <= 1e-12 && worst_oracle <= 1e-12 && worst_mc <= 0.01;
        (
            ok,
            format!(
                "{ENSEMBLES} ensembles: identity rel err {worst_identity:.1e} (<= 1e-12), definition rel err \
                 {worst_oracle:.1e} (<= 1e-12), MC rel err {worst_mc:.2e} (<= 1e-2)"
            ),
        )
    });
}

#[test]
fn c02_gradient_correctness() {
    criterion(2, "analytic gradients vs central finite differences", mins(1), || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC02);
        let mut worst = 0.0f64;
        let mut covered = std::collections::BTreeSet::new();
        for case in 0..20 {
            let activation = Activation::ALL[case % Activation::ALL.len()];
            covered.insert(activation.name());
            let cfg = MlpConfig {
                input_dim: 5,
                hidden_layers: rng.random_range(1..=4),
                hidden_units: rng.random_range(2..=12),
                activation,
                dropout_rate: 0.0,
            };
            let mut params = init_params(&cfg, case as u64).unwrap();
            // Non-zero biases so every unit sits away from activation kinks with high probability.
            let mut flat = params.flat();
            flat.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
            params.set_flat(&flat);

            let batch = rng.random_range(1..=8);
            let inputs: Vec<Vec<f64>> =
                (0..batch).map(|_| (0..5).map(|_| normal_pair(&mut rng).0).collect()).collect();
            let targets: Vec<f64> = (0..batch).map(|_| normal_pair(&mut rng).0).collect();

            let analytic = backward(&params, &cfg, &inputs, &targets, Mode::Inference).unwrap().data.flat();
            let loss = |flat: &[f64]| {
                let mut p = params.clone();
                p.set_flat(flat);
                let preds: Vec<GaussianPrediction> =
                    inputs.iter().map(|x| forward(&p, &cfg, x, Mode::Inference).unwrap()).collect();
                nll_loss(&preds, &targets).unwrap()
            };
            let mut numeric = vec![0.0; flat.len()];
            let mut probe = flat.clone();
            for i in 0..flat.len() {
                let h = 1e-6 * flat[i].abs().max(1.0);
                probe[i] = flat[i] + h;
                let up = loss(&probe);
                probe[i] = flat[i] - h;
                let down = loss(&probe);
                probe[i] = flat[i];
                numeric[i] = (up - down) / (2.0 * h);
            }
            let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
            let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
            worst = worst.max(diff / scale);
        }
        let ok = worst <= 1e-4 && covered.len() == 6;
        (ok, format!("20 cases over {} activations, worst relative max-norm error {worst:.2e} (<= 1e-4)", covered.len()))
    });
}

#[test]
fn c03_uq_calibration() {
    criterion(3, "95% interval coverage and RMSE on heteroscedastic synthetic data", mins(10), || {
        let data = generate_synthetic(&SyntheticConfig { n: 5000, seed: 31, ..Default::default() }).unwrap();
        let held_out = generate_synthetic(&SyntheticConfig { n: 10_000, seed: 32, ..Default::default() }).unwrap();
        let splits = split(&data, DEFAULT_FRACTIONS, 31).unwrap();
        let norm = fit_normalizer(&splits.train).unwrap();
        let mlp = MlpConfig { input_dim: 5, hidden_layers: 3, hidden_units: 32, activation: Activation::GELU, dropout_rate: 0.0 };
        let specs: Vec<MemberSpec> = (0..5)
            .map(|i| MemberSpec {
                mlp,
                train: TrainConfig {
                    learning_rate: 2e-3,
                    weight_decay: 1e-4,
                    batch_size: 64,
                    epochs: 150,
                    patience: 20,
                    seed: 300 + i,
                },
                trial_id: None,
            })
            .collect();
        let ens = train_ensemble(&splits, &norm, &specs).unwrap();
        let preds = ens.predict(&held_out.inputs()).unwrap();
        let y = held_out.targets();

        const Z95: f64 = 1.959_963_984_540_054;
        let inside = preds.iter().zip(&y).filter(|(p, y)| (*y - p.mean).abs() <= Z95 * p.total_var.sqrt()).count();
        let coverage = inside as f64 / y.len() as f64;
        let n = y.len() as f64;
        let y_mean = y.iter().sum::<f64>() / n;
        let y_sd = (y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n).sqrt();
        let test_rmse = (preds.iter().zip(&y).map(|(p, y)| (y - p.mean).powi(2)).sum::<f64>() / n).sqrt();
        let ok = (0.90..=0.98).contains(&coverage) && test_rmse < y_sd;
        (
            ok,
            format!(
                "M=5, coverage {:.2}% on 10000 held-out points (in [90, 98]), RMSE {test_rmse:.1} < target sd {y_sd:.1}",
                100.0 * coverage
            ),
        )
    });
}

#[test]
fn c04_bo_effectiveness() {
    criterion(4, "BO median best validation RMSE vs pure Sobol at equal budget", mins(30), || {
        let data = generate_synthetic(&SyntheticConfig { n: 500, seed: 41, ..Default::default() }).unwrap();
        let splits = split(&data, DEFAULT_FRACTIONS, 41).unwrap();
        let norm = fit_normalizer(&splits.train).unwrap();
        let space = SearchSpace::standard();
        let bo = BoBudget { n_sobol: 16, n_bo: 32, candidates: 512 };
        let sobol = BoBudget { n_sobol: 48, n_bo: 0, candidates: 512 };
        let (mut bo_best, mut sobol_best) = (vec![], vec![]);
        let mut distinct_ok = true;
        for harness_seed in 0..5u64 {
            let seeds = run_seeds(1000 + harness_seed, 5);
            let eval = training_evaluator(&splits, &norm, 4, 4, harness_seed);
            let b = run_parallel_bo(&space, &bo, &seeds, &eval, None).unwrap();
            let s = run_parallel_bo(&space, &sobol, &seeds, &eval, None).unwrap();
            bo_best.push(b.best().unwrap().val_rmse.unwrap());
            sobol_best.push(s.best().unwrap().val_rmse.unwrap());
            let top = select_top_k(&b, 15).unwrap();
            let mut keys: Vec<String> = top.iter().map(|t| serde_json::to_string(&t.config.hp).unwrap()).collect();
            keys.sort();
            keys.dedup();
            distinct_ok &= top.len() == 15 && keys.len() == 15;
        }
        let (mb, ms) = (median(bo_best.clone()), median(sobol_best.clone()));
        let ok = mb <= ms && distinct_ok;
        (
            ok,
            format!(
                "5 seeds x 5 runs x 48 trials: median best BO {mb:.2} <= Sobol {ms:.2}; top-15 distinct: {distinct_ok}"
            ),
        )
    });
}

/// Bratley-Fox construction in natural order from the primitive polynomials and initial
/// direction integers (dimension 1 is van der Corput).
fn sobol_reference(dims: usize, n: u32) -> Vec<f64> {
    // (degree s, polynomial coefficients a, initial m_1..m_s) for dimensions 2..=5.
    const TABLE: [(usize, u32, [u32; 3]); 4] = [(1, 0, [1, 0, 0]), (2, 1, [1, 3, 0]), (3, 1, [1, 3, 1]), (3, 2, [1, 1, 1])];
    const BITS: usize = 16;
    (0..dims)
        .map(|d| {
            let mut m = [0u32; BITS + 1];
            if d == 0 {
                (1..=BITS).for_each(|k| m[k] = 1);
            } else {
                let (s, a, init) = TABLE[d - 1];
                m[1..=s].copy_from_slice(&init[..s]);
                for k in s + 1..=BITS {
                    let mut v = m[k - s] ^ (m[k - s] << s);
                    for j in 1..s {
                        let a_j = (a >> (s - 1 - j)) & 1;
                        if a_j == 1 {
                            v ^= m[k - j] << j;
                        }
                    }
                    m[k] = v;
                }
            }
            let mut x = 0u32;
            for k in 1..=BITS {
                if (n >> (k - 1)) & 1 == 1 {
                    x ^= m[k] << (BITS - k);
                }
            }
            x as f64 / (1u32 << BITS) as f64
        })
        .collect()
}

#[test]
fn c05_sobol_and_ei_oracles() {
    criterion(5, "Sobol points and closed-form EI vs independent oracles", mins(2), || {
        let mut gen = Sobol::new(5).unwrap();
        let mut sobol_ok = true;
        for i in 1..=8u32 {
            let got = gen.next_point().unwrap();
            // The generator walks the sequence in Gray-code order.
            let want = sobol_reference(5, i ^ (i >> 1));
            sobol_ok &= got == want;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(0xC05);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let mu: f64 = rng.random_range(-1.0..1.0);
            let sigma: f64 = rng.random_range(0.05..0.5);
            let incumbent = mu + sigma * rng.random_range(-1.5..1.5);
            let mut sum = 0.0;
            const SAMPLES: usize = 1_000_000;
            for _ in 0..SAMPLES / 2 {
                let (z, _) = normal_pair(&mut rng);
                // Antithetic pair.
                sum += (incumbent - (mu + sigma * z)).max(0.0) + (incumbent - (mu - sigma * z)).max(0.0);
            }
            let mc = sum / SAMPLES as f64;
            worst = worst.max((mc - ei_closed_form(mu, sigma, incumbent)).abs());
        }
        let ok = sobol_ok && worst <= 1e-3;
        (ok, format!("first 8 Sobol points exact: {sobol_ok}; EI worst |closed - MC| {worst:.2e} (<= 1e-3)"))
    });
}

fn executor(ctx: &ProjectContext, faults: &[&str]) -> Executor {
    let specs = faults.iter().map(|f| f.parse().unwrap()).collect();
    Executor::new(Sandbox::new(&ctx.root)).with_faults(FaultInjector::new(specs))
}

#[test]
fn c06_supervisor_trace() {
    criterion(6, "supervisor loop tune cycles and retry exhaustion", mins(5), || {
        let data = small_dataset(400, 6);
        let run = |faults: &[&str]| {
            let dir = tempfile::tempdir().unwrap();
            let mut ctx = workspace(dir.path(), &data);
            let mut planner = ScriptedPlanner::new(small_recipe(2, 6, 8));
            let mut ex = executor(&ctx, faults);
            run_multi_agent(TASK, &mut ctx, &mut planner, &mut ex, &MultiAgentOptions::default())
        };
        let clean = run(&[]).map(|(r, _)| (r.completed, r.tune_cycles));
        let one = run(&["stage=evaluate,attempt=1"]).map(|(r, _)| (r.completed, r.tune_cycles));
        let persistent = run(&["stage=evaluate,attempt=1+2+3"]);
        let exhausted = matches!(
            persistent,
            Err(AgentError::StageExhausted { stage: StageName::EvaluationExecution, error_count: 3 })
        );
        let ok = matches!(clean, Ok((true, 0))) && matches!(one, Ok((true, 1))) && exhausted;
        (
            ok,
            format!(
                "fault-free (completed, tunes) {clean:?} want (true, 0); one fault {one:?} want (true, 1); \
                 3-of-3 faults StageExhausted(error_count 3): {exhausted}"
            ),
        )
    });
}

/// Delegates to the scripted planner and records the largest window shown to it.
struct WindowSpy {
    inner: ScriptedPlanner,
    max_window: usize,
}

impl Planner for WindowSpy {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn plan(&mut self, q: &PlannerQuery) -> Result<PlannerResponse, AgentError> {
        self.max_window = self.max_window.max(q.context.window.len());
        self.inner.plan(q)
    }
}

#[test]
fn c07_react_trace() {
    criterion(7, "ReAct transcript error/patch sequence and window bound", mins(5), || {
        let dir = tempfile::tempdir().unwrap();
        let mut ctx = workspace(dir.path(), &small_dataset(400, 7));
        let mut spy = WindowSpy { inner: ScriptedPlanner::new(small_recipe(2, 7, 8)), max_window: 0 };
        let mut ex = executor(&ctx, &["stage=evaluate,attempt=1"]);
        let opts = ReactOptions { window: 4, ..Default::default() };
        let (report, _, t) = run_react(TASK, &mut ctx, &mut spy, &mut ex, &opts).unwrap();
        let errors: Vec<usize> = t.history().iter().filter(|s| !s.ok).map(|s| s.index).collect();
        let patch_after = errors.len() == 1 && t.history().get(errors[0] + 1).is_some_and(|s| s.action == "patch_task");
        let patches = t.count_action("patch_task");
        let finished = report.completed && t.history().last().is_some_and(|s| s.action == "finish_task");
        let ok = errors.len() == 1 && patch_after && patches == 1 && finished && spy.max_window <= 4;
        (
            ok,
            format!(
                "{} steps, {} error observation(s), patch follows: {patch_after}, patch actions {patches}, completed: \
                 {finished}, max window {} (<= 4)",
                t.len(),
                errors.len(),
                spy.max_window
            ),
        )
    });
}

#[test]
fn c08_trial_statistics_table() {
    criterion(8, "10-trial harness buckets and robustness table layout", mins(60), || {
        let dir = tempfile::tempdir().unwrap();
        let cfg = HarnessConfig {
            root: dir.path().to_path_buf(),
            trials: 10,
            jobs: 1,
            mode: RunMode::MultiAgent,
            task: TASK.into(),
            base_seed: 80,
            recipe: small_recipe(2, 0, 6),
            fault_trials: vec![2, 5, 8],
            fault: "stage=evaluate,attempt=1".parse().unwrap(),
            planner: HarnessPlanner::Scripted(TokenModel::Table),
            max_retries: 3,
            max_steps: 40,
        };
        let (outcomes, stats) = run_trials(&cfg, &small_dataset(400, 8)).unwrap();
        let buckets = (
            stats.completed_without_error,
            stats.completed_with_one_error,
            stats.completed_with_two_or_more_errors,
            stats.failed,
        );

        // RMSE statistics recomputed from the individual trials.
        let rmses: Vec<f64> = outcomes.iter().filter_map(|o| o.summary.test_rmse).collect();
        let avg = rmses.iter().sum::<f64>() / rmses.len() as f64;
        let min = rmses.iter().copied().fold(f64::INFINITY, f64::min);
        let max = rmses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let rmse_ok = rmses.len() == 10
            && stats.min_rmse == Some(min)
            && stats.max_rmse == Some(max)
            && stats.avg_rmse.is_some_and(|a| (a - avg).abs() <= 1e-9 * avg);

        // Per-call token table: three generations per run, plus one tuning call per fault.
        let generate = (820 + 610) + (910 + 380) + (940 + 350);
        let tune = 1450 + 420;
        let want_tokens = 10 * generate + 3 * tune;
        let tokens_ok = stats.total_tokens == want_tokens;

        let table = render_robustness_table(&[("Multi-Agent System", &stats)]);
        let labels: Vec<&str> = table.lines().skip(1).map(|l| l.split('|').next().unwrap().trim()).collect();
        let expected = [
            "Average CHF RMSE on testing data",
            "Minimum CHF RMSE on testing data",
            "Maximum CHF RMSE on testing data",
            "Completed without error",
            "Completed with one error",
            "Completed with >= 2 error",
            "Fail to complete",
            "Average token usage",
        ];
        let layout_ok = labels == expected && ROBUSTNESS_ROWS == expected && table.starts_with("Metric");
        let ok = buckets == (7, 3, 0, 0) && rmse_ok && tokens_ok && layout_ok;
        (
            ok,
            format!(
                "buckets {buckets:?} want (7, 3, 0, 0); RMSE avg/min/max {avg:.1}/{min:.1}/{max:.1} consistent: {rmse_ok}; \
                 tokens {} want {want_tokens}; layout matches: {layout_ok}",
                stats.total_tokens
            ),
        )
    });
}

#[test]
fn c09_metric_oracles() {
    criterion(9, "RMSE/MAPE/RMSPE vs brute-force recomputation", mins(1), || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC09);
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let n = rng.random_range(1..500);
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(50.0..16000.0)).collect();
            let yhat: Vec<f64> = y.iter().map(|v| v * rng.random_range(0.5..1.5)).collect();
            // Reverse-order accumulation, so the comparison is not bit-for-bit the same sum.
            let (mut sq, mut ap, mut sp) = (0.0, 0.0, 0.0);
            for i in (0..n).rev() {
                let e = y[i] - yhat[i];
                sq += e * e;
                ap += (e / y[i]).abs();
                sp += (e / y[i]) * (e / y[i]);
            }
            let nf = n as f64;
            let want = [(sq / nf).sqrt(), 100.0 * ap / nf, 100.0 * (sp / nf).sqrt()];
            let got = [rmse(&y, &yhat).unwrap(), mape(&y, &yhat).unwrap(), rmspe(&y, &yhat).unwrap()];
            for (g, w) in got.iter().zip(want) {
                worst = worst.max((g - w).abs() / w.abs().max(f64::MIN_POSITIVE));
            }
        }
        let (y, yhat) = ([100.0, 200.0], [110.0, 180.0]);
        let fixtures = mape(&y, &yhat).unwrap() == 10.0
            && rmspe(&y, &yhat).unwrap() == 10.0
            && rmse(&y, &yhat).unwrap() == 250f64.sqrt()
            && rmse(&[3.0], &[3.0]).unwrap() == 0.0;
        let ok = worst <= 1e-12 && fixtures;
        (ok, format!("200 random fixtures, worst relative error {worst:.1e} (<= 1e-12); worked fixtures exact: {fixtures}"))
    });
}

#[test]
fn c10_resume_and_determinism() {
    criterion(10, "resume after training matches an uninterrupted run; reports byte-identical", mins(10), || {
        let data = small_dataset(400, 10);
        let recipe = small_recipe(2, 10, 8);
        let report_bytes = |ctx: &ProjectContext| std::fs::read(ctx.root.join(REPORT_FILE)).unwrap();

        let uninterrupted = |root: &std::path::Path| {
            let mut ctx = workspace(root, &data);
            let mut planner = ScriptedPlanner::new(recipe.clone());
            let mut ex = executor(&ctx, &[]);
            let (r, _) = run_multi_agent(TASK, &mut ctx, &mut planner, &mut ex, &MultiAgentOptions::default()).unwrap();
            (r, report_bytes(&ctx))
        };
        let (dir_a, dir_b, dir_c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (ra, bytes_a) = uninterrupted(dir_a.path());
        let (_, bytes_b) = uninterrupted(dir_b.path());

        // Killed right after training, then resumed by a fresh process-equivalent.
        let halted = {
            let mut ctx = workspace(dir_c.path(), &data);
            let mut planner = ScriptedPlanner::new(recipe.clone());
            let mut ex = executor(&ctx, &[]);
            let opts = MultiAgentOptions { halt_after: Some(StageName::TrainingExecution), ..Default::default() };
            matches!(
                run_multi_agent(TASK, &mut ctx, &mut planner, &mut ex, &opts),
                Err(AgentError::Halted(StageName::TrainingExecution))
            )
        };
        let mut ctx = ProjectContext::load(dir_c.path()).unwrap();
        let mut planner = ScriptedPlanner::new(recipe.clone());
        let mut ex = Executor::new(Sandbox::recording(&ctx.root));
        let (rc, _) = run_multi_agent(TASK, &mut ctx, &mut planner, &mut ex, &MultiAgentOptions::default()).unwrap();
        let trace = ex.sandbox.trace();
        let ensemble = ctx.default_path(Role::TrainedEnsemble);
        let read_back = trace.iter().any(|(a, p)| *a == SandboxAccess::Read && p.starts_with(&ensemble));
        let retrained = trace.iter().any(|(a, p)| *a == SandboxAccess::Write && p.starts_with(&ensemble));

        let metrics_equal = ra.metrics == rc.metrics && ra.test_rmse == rc.test_rmse && rc.completed;
        let identical = bytes_a == bytes_b;
        let ok = halted && metrics_equal && read_back && !retrained && identical;
        (
            ok,
            format!(
                "halted after training: {halted}; resumed metrics identical: {metrics_equal} (test RMSE {:?}); \
                 ensemble reused: {read_back}, retrained: {retrained}; identical runs byte-identical report: {identical}",
                rc.test_rmse
            ),
        )
    });
}

/// Reference slice table: D in mm, L in m, P in kPa, G in kg/m^2/s, X dimensionless.
/// A range cell is written "lo -- hi".
const SLICE_TABLE: [[&str; 5]; 8] = [
    ["8.01", "0 -- 20", "9806", "1000.0", "0.587"],
    ["8.11", "0 -- 20", "2009", "752.2", "0.756"],
    ["8.00", "0.998", "0 -- 20000", "2006.0", "0.140"],
    ["13.40", "3.658", "0 -- 20000", "2040.2", "0.378"],
    ["8.14", "1.943", "9831", "1519.5", "-0.5 -- 1.0"],
    ["0 -- 16", "6.000", "9807", "1003.3", "0.529"],
    ["8.00", "1.570", "12750", "0 -- 8000", "0.144"],
    ["10.00", "4.966", "16000", "0 -- 8000", "0.343"],
];

/// Parses a table cell to SI; millimetres are rescaled in decimal, not by division.
fn si(cell: &str, column: usize) -> f64 {
    let text = if column == 0 { format!("{cell}e-3") } else { cell.to_string() };
    text.parse().unwrap()
}

#[test]
fn c11_slice_protocol() {
    criterion(11, "slice grids reproduce the tabulated constants; bands finite everywhere", mins(2), || {
        let specs = standard_slices(101);
        let features = [Feature::D, Feature::L, Feature::P, Feature::G, Feature::X];
        let mut mismatches = Vec::new();
        for (spec, row) in specs.iter().zip(SLICE_TABLE) {
            let grid = build_slice_grid(spec).unwrap();
            for (col, cell) in row.iter().enumerate() {
                let k = features[col].index();
                if let Some((lo, hi)) = cell.split_once(" -- ") {
                    let (lo, hi) = (si(lo, col), si(hi, col));
                    let first = grid.points.first().unwrap().inputs[k];
                    let last = grid.points.last().unwrap().inputs[k];
                    if spec.varying != features[col] || first.to_bits() != lo.to_bits() || last.to_bits() != hi.to_bits() {
                        mismatches.push(format!("slice {} range {cell}", spec.id));
                    }
                } else {
                    let v = si(cell, col);
                    if grid.points.iter().any(|p| p.inputs[k].to_bits() != v.to_bits()) {
                        mismatches.push(format!("slice {} constant {cell}", spec.id));
                    }
                }
            }
        }

        let data = small_dataset(600, 11);
        let splits = split(&data, DEFAULT_FRACTIONS, 11).unwrap();
        let norm = fit_normalizer(&splits.train).unwrap();
        let recipe = small_recipe(3, 11, 10);
        let member_specs: Vec<MemberSpec> = recipe
            .members
            .iter()
            .enumerate()
            .map(|(i, m)| MemberSpec { mlp: m.mlp, train: TrainConfig { seed: 11 + i as u64, ..recipe.train }, trial_id: None })
            .collect();
        let ens = train_ensemble(&splits, &norm, &member_specs).unwrap();
        let report = evaluate_slices(&ens, &specs, TWO_SIGMA_LEVEL).unwrap();
        let mut bad_points = 0;
        for s in &report.slices {
            for i in 0..s.y_pred.len() {
                let finite = s.y_pred[i].is_finite() && s.band_lo[i].is_finite() && s.band_hi[i].is_finite();
                if !(finite && s.total_std[i] >= 0.0 && s.band_hi[i] - s.band_lo[i] >= 0.0) {
                    bad_points += 1;
                }
            }
        }
        let ok = specs.len() == 8 && mismatches.is_empty() && report.prediction_count() == 808 && bad_points == 0;
        (
            ok,
            format!(
                "8 slices x 101 points; table mismatches {mismatches:?}; predictions {}; points with non-finite mean or \
                 negative band {bad_points}",
                report.prediction_count()
            ),
        )
    });
}
