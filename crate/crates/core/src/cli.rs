//! Command-line front end.

use crate::config::{parse_config, ExperimentConfig, SystemName};
use crate::evaluation::{
    bsde_consistency, epsilon_sweep, evaluate, riccati_oracle, riccati_with_substeps,
    write_sweep_csv, write_trajectory_csv, ComparisonRow, EvalReport, LqBenchmark, SweepSetup,
};
use crate::exec::Executor;
use crate::fbsde::{HorizonGrid, Mode};
use crate::gradcheck;
use crate::tensor::Matrix;
use crate::training::{
    self, load_checkpoint, write_loss_csv, CheckpointExpectation, CheckpointSink, ParamStore,
};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

pub const RUN_SCHEMA: &str = "minmax-fbsde/run/v1";
pub const ORACLE_SCHEMA: &str = "minmax-fbsde/oracle-check/v1";

#[derive(Debug, Parser)]
#[command(name = "minmax-fbsde", version, about = "Deep min-max FBSDE controller")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML experiment config.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set cost.epsilon=0.5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true, value_parser = ["minmax", "baseline"])]
    pub mode: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train a policy; writes checkpoints and the loss history.
    Train,
    /// Evaluate a trained checkpoint.
    Eval,
    /// Train and evaluate across risk-sensitivity values.
    Sweep,
    /// Compare against the linear-quadratic closed form.
    OracleCheck,
    /// Audit gradients against central differences.
    GradCheck,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Sweep => "sweep",
            Command::OracleCheck => "oracle-check",
            Command::GradCheck => "grad-check",
        }
    }
}

impl Cli {
    /// Resolved config: file, then `--set`, then the dedicated flags.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(w) = self.workers {
            overrides.push(format!("workers={w}"));
        }
        if let Some(m) = &self.mode {
            overrides.push(format!("mode=\"{m}\""));
        }
        if let Some(o) = &self.out {
            overrides.push(format!("output_dir={}", toml::Value::String(o.display().to_string())));
        }
        Ok(parse_config(self.config.as_deref(), &overrides)?)
    }
}

#[derive(Debug, Serialize)]
struct RunMetadata<'a> {
    schema: &'static str,
    command: &'static str,
    version: &'static str,
    config_hash: String,
    seed: u64,
    eval_seed: u64,
    config: &'a ExperimentConfig,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// Creates the output directory and records the resolved config next to
/// the command's outputs.
fn prepare_output(cfg: &ExperimentConfig, command: Command) -> Result<PathBuf> {
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("cannot create output directory {}", out.display()))?;
    let stem = command.name().replace('-', "_");
    write_file(&out.join(format!("{stem}_config.toml")), &cfg.to_toml())?;
    let meta = RunMetadata {
        schema: RUN_SCHEMA,
        command: command.name(),
        version: env!("CARGO_PKG_VERSION"),
        config_hash: cfg.model_hash(),
        seed: cfg.seed,
        eval_seed: cfg.eval.seed.unwrap_or(cfg.seed),
        config: cfg,
    };
    write_file(
        &out.join(format!("{stem}_run.json")),
        &(serde_json::to_string_pretty(&meta)? + "\n"),
    )?;
    Ok(out)
}

fn executor(cfg: &ExperimentConfig) -> Executor {
    Executor::new(cfg.workers)
}

pub fn checkpoint_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.eval
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("checkpoint.json"))
}

fn expected_shapes(cfg: &ExperimentConfig) -> Result<Vec<(usize, usize)>> {
    let sys = cfg.build_system()?;
    Ok(ParamStore::init(&sys, cfg.train.hidden, cfg.train.forget_bias, cfg.train.adam, 0).shapes())
}

/// Loads a checkpoint that must match `cfg` in hash and layout.
pub fn load_for(cfg: &ExperimentConfig, path: &Path) -> Result<ParamStore> {
    let expect = CheckpointExpectation {
        config_hash: Some(cfg.model_hash()),
        shapes: Some(expected_shapes(cfg)?),
    };
    let (store, _) = load_checkpoint(path, &expect)?;
    Ok(store)
}

/// Runs one command. `Ok(false)` means it ran but a check failed.
pub fn run(cli: &Cli) -> Result<bool> {
    let cfg = cli.resolve()?;
    match cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Eval => cmd_eval(&cfg),
        Command::Sweep => cmd_sweep(&cfg),
        Command::OracleCheck => cmd_oracle(&cfg),
        Command::GradCheck => cmd_grad_check(&cfg),
    }
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<bool> {
    let out = prepare_output(cfg, Command::Train)?;
    let sys = cfg.build_system()?;
    let costs = cfg.build_costs()?;
    let train = cfg.train_config()?;
    let sink = CheckpointSink {
        manifest: out.join("checkpoint.json"),
        config_hash: cfg.model_hash(),
    };
    let mut history = Vec::new();
    let result = training::train(&train, &sys, &costs, &executor(cfg), None, Some(&sink), |r| {
        history.push(*r);
        if r.iteration % 100 == 0 {
            eprintln!(
                "iter {:>6}  loss {:>12.5}  terminal {:>10.5}  diverged {}",
                r.iteration, r.loss, r.mean_terminal_cost, r.diverged
            );
        }
    });
    write_loss_csv(&out.join("loss.csv"), &history)?;
    let outcome = result?;
    println!(
        "trained {} iterations; y0 = {:.6}; checkpoint {}",
        outcome.history.len(),
        outcome.store.policy.y0,
        sink.manifest.display()
    );
    Ok(true)
}

fn cmd_eval(cfg: &ExperimentConfig) -> Result<bool> {
    let path = checkpoint_path(cfg);
    if !path.exists() {
        bail!("checkpoint not found: {}", path.display());
    }
    let store = load_for(cfg, &path)?;
    let out = prepare_output(cfg, Command::Eval)?;
    let sys = cfg.build_system()?;
    let costs = cfg.build_costs()?;
    let exec = executor(cfg);
    let mut report = EvalReport::new(sys.name(), cfg.eval.success.clone());
    let label = match cfg.mode {
        Mode::Minmax => "minmax",
        Mode::Baseline => "baseline",
    };
    let main = evaluate(&store.policy, &sys, &costs, &cfg.eval_settings()?, label, &exec)?;
    report.conditions.push(main);

    if let Some(base_path) = &cfg.eval.baseline_checkpoint {
        if !base_path.exists() {
            bail!("checkpoint not found: {}", base_path.display());
        }
        let mut base_cfg = cfg.clone();
        base_cfg.mode = Mode::Baseline;
        let base = load_for(&base_cfg, base_path)?;
        let cond = evaluate(&base.policy, &sys, &costs, &base_cfg.eval_settings()?, "baseline", &exec)?;
        report.comparisons.push(ComparisonRow::new(&report.conditions[0], &cond));
        report.conditions.push(cond);
    }
    report.write_json(&out.join("eval_report.json"))?;
    let conds: Vec<_> = report.conditions.iter().collect();
    write_trajectory_csv(&out.join("trajectories.csv"), &conds)?;
    for c in &report.conditions {
        println!(
            "{:<9} success {:>6.2}%  total variance {:.6}  terminal cost {:.6}  diverged {}",
            c.label,
            100.0 * c.success_rate,
            c.total_state_variance,
            c.mean_terminal_cost,
            c.diverged
        );
    }
    for r in &report.comparisons {
        println!("variance reduction vs baseline: {:.2}%", r.reduction_percent);
    }
    Ok(true)
}

fn cmd_sweep(cfg: &ExperimentConfig) -> Result<bool> {
    let out = prepare_output(cfg, Command::Sweep)?;
    let sys = cfg.build_system()?;
    let costs = cfg.build_costs()?;
    let base = cfg.clone();
    let setup = SweepSetup {
        train: cfg.train_config()?,
        sys: &sys,
        costs: &costs,
        eval: cfg.eval_settings()?,
        success_threshold: cfg.sweep.success_threshold,
        cache_dir: Some(out.join("sweep_cache")),
        hash_for: Box::new(move |eps| {
            let mut c = base.clone();
            match eps {
                None => c.mode = Mode::Baseline,
                Some(e) => {
                    c.mode = Mode::Minmax;
                    c.cost.epsilon = e;
                }
            }
            c.model_hash()
        }),
        include_baseline: cfg.sweep.include_baseline,
    };
    let rows = epsilon_sweep(&setup, &cfg.sweep.epsilons, &executor(cfg));
    write_sweep_csv(&out.join("sweep.csv"), &rows)?;
    for r in &rows {
        println!(
            "{:<9} eps {:>10.4e}  success {:>6.2}%  variance {:>10.6}  {}",
            r.label,
            r.epsilon,
            100.0 * r.success_rate,
            r.total_state_variance,
            r.status
        );
    }
    Ok(true)
}

#[derive(Debug, Serialize)]
struct OracleCheck {
    name: String,
    value: f64,
    threshold: f64,
    status: &'static str,
}

#[derive(Debug, Serialize)]
struct OracleReport {
    schema: &'static str,
    value_at_start: f64,
    gradient_at_start: Vec<f64>,
    z_at_start: Vec<f64>,
    p_at_start: Vec<Vec<f64>>,
    consistency_step_sizes: Vec<f64>,
    consistency_errors: Vec<f64>,
    checks: Vec<OracleCheck>,
}

fn check(name: &str, value: f64, threshold: f64, passed: bool) -> OracleCheck {
    OracleCheck {
        name: name.into(),
        value,
        threshold,
        status: if passed { "passed" } else { "failed" },
    }
}

/// Relative errors of a trained initial value and gradient against the
/// closed form.
pub fn oracle_errors(store: &ParamStore, value: f64, z: &[f64]) -> (f64, f64) {
    let y_err = (store.policy.y0 - value).abs() / value.abs();
    let diff: f64 = store.policy.z0.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = z.iter().map(|b| b * b).sum::<f64>().sqrt();
    (y_err, diff / norm)
}

fn cmd_oracle(cfg: &ExperimentConfig) -> Result<bool> {
    if cfg.system != SystemName::Lq {
        bail!("oracle-check needs system = \"lq\"");
    }
    let out = prepare_output(cfg, Command::OracleCheck)?;
    let bench = cfg.lq_benchmark()?;
    let costs = cfg.build_costs()?;
    let grid = cfg.grid()?;
    let eps = (cfg.mode == Mode::Minmax).then_some(cfg.cost.epsilon);
    let sol = riccati_oracle(&bench, &grid, eps)?;
    let x0 = &cfg.train.initial_state;
    let value = sol.value(x0, 0);
    let z = sol.z_batch(&Matrix::column(x0), 0).into_vec();
    let mut checks = Vec::new();

    let scalar = LqBenchmark {
        a: Matrix::scalar(0.0),
        b: Matrix::scalar(1.0),
        sigma: Matrix::scalar(0.0),
        q: vec![1.0],
        q_f: vec![0.0],
        r: Matrix::scalar(1.0),
    };
    let unit = HorizonGrid::new(0.0, 1.0, 50)?;
    let p0 = riccati_oracle(&scalar, &unit, None)?.p[0].item();
    let err = (p0 - 1f64.tanh()).abs();
    checks.push(check("scalar_riccati_tanh", err, 1e-8, err < 1e-8));

    let fine = riccati_with_substeps(&bench, &grid, eps, 20)?;
    let err = fine.p[0].zip_map(&sol.p[0], |a, b| (a - b).abs()).max_abs();
    checks.push(check("step_halving", err, 1e-8, err < 1e-8));

    let dts = [2.0 * grid.dt, grid.dt, 0.5 * grid.dt];
    let errs = bsde_consistency(&bench, &costs, cfg.mode, grid.horizon - grid.tau, x0, &dts, 256, cfg.seed)?;
    let decreasing = errs.windows(2).all(|w| w[1] < w[0]);
    checks.push(check("bsde_consistency_decreasing", errs[2], errs[0], decreasing));

    let path = checkpoint_path(cfg);
    if path.exists() {
        let store = load_for(cfg, &path)?;
        let (y_err, z_err) = oracle_errors(&store, value, &z);
        checks.push(check("trained_value_rel_error", y_err, 0.05, y_err < 0.05));
        checks.push(check("trained_gradient_rel_error", z_err, 0.10, z_err < 0.10));
    } else {
        for name in ["trained_value_rel_error", "trained_gradient_rel_error"] {
            checks.push(OracleCheck {
                name: name.into(),
                value: f64::NAN,
                threshold: 0.0,
                status: "skipped",
            });
        }
    }

    let report = OracleReport {
        schema: ORACLE_SCHEMA,
        value_at_start: value,
        gradient_at_start: sol.gradient(x0, 0),
        z_at_start: z,
        p_at_start: (0..sol.p[0].rows()).map(|i| (0..sol.p[0].cols()).map(|j| sol.p[0][(i, j)]).collect()).collect(),
        consistency_step_sizes: dts.to_vec(),
        consistency_errors: errs,
        checks,
    };
    write_file(
        &out.join("oracle_report.json"),
        &(serde_json::to_string_pretty(&report)? + "\n"),
    )?;
    println!("V(x0, 0) = {value:.6}");
    for c in &report.checks {
        println!("{:<30} {:<8} {:.3e}", c.name, c.status, c.value);
    }
    Ok(report.checks.iter().all(|c| c.status != "failed"))
}

fn cmd_grad_check(cfg: &ExperimentConfig) -> Result<bool> {
    let out = prepare_output(cfg, Command::GradCheck)?;
    let sys = cfg.build_system()?;
    let costs = cfg.build_costs()?;
    let g = &cfg.grad_check;
    let report = gradcheck::audit(
        &sys,
        &costs,
        cfg.train.initial_state.clone(),
        g.steps,
        g.samples,
        g.fd_step,
        g.tolerance,
    )?;
    write_file(
        &out.join("grad_check.json"),
        &(serde_json::to_string_pretty(&report)? + "\n"),
    )?;
    for e in &report.entries {
        println!(
            "{:<28} {:.3e} {}",
            e.name,
            e.max_relative_error,
            if e.passed { "ok" } else { "FAILED" }
        );
    }
    println!("max relative error {:.3e} (tolerance {:.0e})", report.max_relative_error, report.tolerance);
    Ok(report.passed)
}
