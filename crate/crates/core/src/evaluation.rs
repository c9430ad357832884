//! Policy evaluation, variance metrics, the ε sweep and the LQ oracle.

use crate::autodiff::{self, Eager, Graph};
use crate::exec::Executor;
use crate::fbsde::{
    rollout_batch, rollout_graph, FbsdeError, GradientPredictor, HorizonGrid, Mode, Policy, RolloutBatch,
    RolloutSpec,
};
use crate::noise::NoiseSource;
use crate::systems::{CostSpec, SystemError, SystemModel};
use crate::tensor::Matrix;
use crate::training::{self, CheckpointExpectation, CheckpointSink, ParamStore, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const REPORT_SCHEMA: &str = "minmax-fbsde/eval-report/v1";
pub const TRAJECTORY_SCHEMA: &str = "minmax-fbsde/trajectory/v1";
pub const SWEEP_SCHEMA: &str = "minmax-fbsde/sweep/v1";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least 2 trajectories, got {0}")]
    TooFewTrajectories(usize),
    #[error("trajectory {index} has shape {found:?}, expected {expected:?}")]
    RaggedTrajectories {
        index: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("all {0} evaluation trajectories diverged")]
    AllDiverged(usize),
    #[error("Riccati solution escaped at t = {time}")]
    FiniteEscape { time: f64 },
    #[error("success criterion: {0}")]
    Criterion(String),
    #[error(transparent)]
    Fbsde(#[from] FbsdeError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Unbiased variance, shifted by the first value so that identical samples
/// give exactly zero.
fn sample_variance(values: impl Iterator<Item = f64> + Clone, m: f64) -> f64 {
    let Some(first) = values.clone().next() else {
        return 0.0;
    };
    let (s, ss) = values.fold((0.0, 0.0), |(s, ss), v| {
        let d = v - first;
        (s + d, ss + d * d)
    });
    ((ss - s * s / m) / (m - 1.0)).max(0.0)
}

/// Sum over steps and state dimensions of the across-trajectory sample
/// variance (M − 1 denominator). `trajectories[i][n][j]` is state `j` of
/// trajectory `i` at step `n`.
pub fn total_state_variance(trajectories: &[Vec<Vec<f64>>]) -> Result<f64> {
    if trajectories.len() < 2 {
        return Err(EvalError::TooFewTrajectories(trajectories.len()));
    }
    let steps = trajectories[0].len();
    let dim = trajectories[0].first().map_or(0, Vec::len);
    for (index, t) in trajectories.iter().enumerate() {
        if t.len() != steps || t.iter().any(|s| s.len() != dim) {
            return Err(EvalError::RaggedTrajectories {
                index,
                expected: (steps, dim),
                found: (t.len(), t.first().map_or(0, Vec::len)),
            });
        }
    }
    let m = trajectories.len() as f64;
    let mut total = 0.0;
    for n in 0..steps {
        for j in 0..dim {
            total += sample_variance(trajectories.iter().map(|t| t[n][j]), m);
        }
    }
    Ok(total)
}

/// Per-step mean and sample standard deviation of every state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub times: Vec<f64>,
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

impl TrajectoryStats {
    fn from_batch(batch: &RolloutBatch, keep: &[usize], grid: &HorizonGrid) -> Self {
        let m = keep.len() as f64;
        let mut mean = Vec::with_capacity(batch.xs.len());
        let mut std = Vec::with_capacity(batch.xs.len());
        for x in &batch.xs {
            let mut mu = vec![0.0; x.rows()];
            let mut sd = vec![0.0; x.rows()];
            for i in 0..x.rows() {
                let mu_i = keep.iter().map(|&j| x[(i, j)]).sum::<f64>() / m;
                let var = sample_variance(keep.iter().map(|&j| x[(i, j)]), m);
                mu[i] = mu_i;
                sd[i] = var.sqrt();
            }
            mean.push(mu);
            std.push(sd);
        }
        Self {
            times: (0..batch.xs.len()).map(|n| grid.time(n)).collect(),
            mean,
            std,
        }
    }

    /// `mean ± 1.96·std` for each step and state.
    pub fn band(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let side = |sign: f64| {
            self.mean
                .iter()
                .zip(&self.std)
                .map(|(m, s)| m.iter().zip(s).map(|(m, s)| m + sign * 1.96 * s).collect())
                .collect()
        };
        (side(-1.0), side(1.0))
    }

    pub fn total_variance(&self) -> f64 {
        self.std.iter().flatten().map(|s| s * s).sum()
    }
}

/// Terminal tolerance ball used to call a trajectory a success. States not
/// listed are unconstrained; distances use the cost's target and wrapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuccessCriterion {
    pub states: Vec<usize>,
    pub tolerance: Vec<f64>,
}

impl SuccessCriterion {
    pub fn pendulum() -> Self {
        Self {
            states: vec![0, 1],
            tolerance: vec![0.2, 1.0],
        }
    }

    pub fn quadcopter() -> Self {
        Self {
            states: vec![0, 1, 2],
            tolerance: vec![0.25; 3],
        }
    }

    pub fn validate(&self, state_dim: usize) -> Result<()> {
        if self.states.len() != self.tolerance.len() {
            return Err(EvalError::Criterion("states and tolerance differ in length".into()));
        }
        if let Some(&s) = self.states.iter().find(|&&s| s >= state_dim) {
            return Err(EvalError::Criterion(format!("state index {s} out of range")));
        }
        if self.tolerance.iter().any(|t| !(*t >= 0.0)) {
            return Err(EvalError::Criterion("tolerances must be non-negative".into()));
        }
        Ok(())
    }
}

/// Whether a terminal state lies in the tolerance ball around the target.
pub fn task_success(final_state: &[f64], costs: &CostSpec, criterion: &SuccessCriterion) -> bool {
    let dev = costs.deviation(final_state);
    criterion
        .states
        .iter()
        .zip(&criterion.tolerance)
        .all(|(&s, &tol)| dev[s].abs() <= tol)
}

/// Evaluation outcome of one policy under one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub label: String,
    pub mode: Mode,
    pub adversary: bool,
    pub epsilon: f64,
    pub m_test: usize,
    pub seed: Option<u64>,
    pub diverged: usize,
    pub total_state_variance: f64,
    pub mean_terminal_cost: f64,
    pub success_rate: f64,
    pub mean_final_state: Vec<f64>,
    #[serde(skip)]
    pub stats: Option<TrajectoryStats>,
}

/// Variance comparison of a min-max condition against a baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub risk_sensitive: String,
    pub baseline: String,
    pub risk_sensitive_variance: f64,
    pub baseline_variance: f64,
    pub reduction_percent: f64,
}

impl ComparisonRow {
    pub fn new(rs: &ConditionReport, base: &ConditionReport) -> Self {
        Self {
            risk_sensitive: rs.label.clone(),
            baseline: base.label.clone(),
            risk_sensitive_variance: rs.total_state_variance,
            baseline_variance: base.total_state_variance,
            reduction_percent: 100.0 * (1.0 - rs.total_state_variance / base.total_state_variance),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub system: String,
    pub success_criterion: SuccessCriterion,
    pub conditions: Vec<ConditionReport>,
    pub comparisons: Vec<ComparisonRow>,
}

impl EvalReport {
    pub fn new(system: &str, criterion: SuccessCriterion) -> Self {
        Self {
            schema: REPORT_SCHEMA.into(),
            system: system.into(),
            success_criterion: criterion,
            conditions: Vec::new(),
            comparisons: Vec::new(),
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text + "\n").map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Fixed inputs of an evaluation run.
#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub grid: HorizonGrid,
    pub mode: Mode,
    pub initial_state: Vec<f64>,
    pub m_test: usize,
    pub noise: NoiseSource,
    pub adversary: bool,
    pub criterion: SuccessCriterion,
    pub chunk: usize,
}

/// Rolls out `m_test` tape-free trajectories of `policy`. With the
/// adversary off the adversarial control is never formed. Diverged
/// trajectories are counted and left out of every statistic.
pub fn evaluate(
    policy: &Policy,
    sys: &SystemModel,
    costs: &CostSpec,
    settings: &EvalSettings,
    label: &str,
    exec: &Executor,
) -> Result<ConditionReport> {
    if settings.m_test < 2 {
        return Err(EvalError::TooFewTrajectories(settings.m_test));
    }
    settings.criterion.validate(sys.state_dim())?;
    let spec = RolloutSpec::new(
        sys,
        costs,
        settings.grid,
        settings.mode,
        settings.adversary,
        settings.initial_state.clone(),
    )?;
    let batch = rollout_batch(policy, &spec, settings.m_test, settings.noise, exec, settings.chunk)?;
    report_from_batch(&batch, costs, settings, label)
}

pub fn report_from_batch(
    batch: &RolloutBatch,
    costs: &CostSpec,
    settings: &EvalSettings,
    label: &str,
) -> Result<ConditionReport> {
    let keep: Vec<usize> = (0..batch.samples()).filter(|&j| !batch.diverged[j]).collect();
    if keep.len() < 2 {
        return Err(EvalError::AllDiverged(batch.samples()));
    }
    let stats = TrajectoryStats::from_batch(batch, &keep, &settings.grid);
    let m = keep.len() as f64;
    let finals: Vec<Vec<f64>> = keep.iter().map(|&j| batch.final_state(j)).collect();
    let successes = finals
        .iter()
        .filter(|x| task_success(x, costs, &settings.criterion))
        .count();
    let mean_terminal_cost = keep.iter().map(|&j| batch.y_target[(0, j)]).sum::<f64>() / m;
    Ok(ConditionReport {
        label: label.into(),
        mode: settings.mode,
        adversary: settings.adversary,
        epsilon: costs.epsilon,
        m_test: settings.m_test,
        seed: match settings.noise {
            NoiseSource::Seeded { seed, .. } => Some(seed),
            NoiseSource::Zero => None,
        },
        diverged: batch.samples() - keep.len(),
        total_state_variance: stats.total_variance(),
        mean_terminal_cost,
        success_rate: successes as f64 / m,
        mean_final_state: stats.mean.last().cloned().unwrap_or_default(),
        stats: Some(stats),
    })
}

/// Per-step statistics as CSV: `schema,condition,step,time,mean_j,std_j…`.
pub fn write_trajectory_csv(path: &Path, reports: &[&ConditionReport]) -> Result<()> {
    let io = |source: std::io::Error| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
    let dim = reports
        .iter()
        .find_map(|r| r.stats.as_ref().map(|s| s.mean[0].len()))
        .unwrap_or(0);
    let mut header = vec!["schema".to_string(), "condition".into(), "step".into(), "time".into()];
    for j in 0..dim {
        header.push(format!("mean_{j}"));
        header.push(format!("std_{j}"));
    }
    w.write_record(&header).map_err(|e| io(e.into()))?;
    for r in reports {
        let Some(stats) = &r.stats else { continue };
        for (n, t) in stats.times.iter().enumerate() {
            let mut row = vec![
                TRAJECTORY_SCHEMA.to_string(),
                r.label.clone(),
                n.to_string(),
                t.to_string(),
            ];
            for j in 0..dim {
                row.push(stats.mean[n][j].to_string());
                row.push(stats.std[n][j].to_string());
            }
            w.write_record(&row).map_err(|e| io(e.into()))?;
        }
    }
    w.flush().map_err(io)
}

/// One row of the ε sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub epsilon: f64,
    pub total_state_variance: f64,
    pub success_rate: f64,
    pub mean_terminal_cost: f64,
    pub diverged: usize,
    /// Training finished and the success rate reached the threshold.
    pub succeeded: bool,
    pub status: String,
}

/// Everything the sweep needs besides the ε values.
pub struct SweepSetup<'a> {
    pub train: TrainConfig,
    pub sys: &'a SystemModel,
    pub costs: &'a CostSpec,
    pub eval: EvalSettings,
    /// Minimum success rate for a row to count as succeeded.
    pub success_threshold: f64,
    /// Directory for per-ε checkpoints reused across invocations.
    pub cache_dir: Option<PathBuf>,
    /// Config hash of the run at a given ε (baseline: `None`).
    pub hash_for: Box<dyn Fn(Option<f64>) -> String + 'a>,
    /// Also train and evaluate the baseline as the first row.
    pub include_baseline: bool,
}

fn sweep_one(setup: &SweepSetup<'_>, epsilon: Option<f64>, exec: &Executor) -> SweepRow {
    let label = match epsilon {
        None => "baseline".to_string(),
        Some(_) => "minmax".to_string(),
    };
    let eps_value = epsilon.unwrap_or(setup.costs.epsilon);
    let failed = |status: String| SweepRow {
        label: label.clone(),
        epsilon: eps_value,
        total_state_variance: f64::NAN,
        success_rate: 0.0,
        mean_terminal_cost: f64::NAN,
        diverged: 0,
        succeeded: false,
        status,
    };
    let costs = match epsilon {
        Some(e) => match setup.costs.with_epsilon(e) {
            Ok(c) => c,
            Err(e) => return failed(format!("failed: {e}")),
        },
        None => setup.costs.clone(),
    };
    let mut train = setup.train.clone();
    train.mode = if epsilon.is_some() { Mode::Minmax } else { Mode::Baseline };
    let hash = (setup.hash_for)(epsilon);
    let sink = setup.cache_dir.as_ref().map(|dir| CheckpointSink {
        manifest: dir.join(match epsilon {
            None => "baseline.json".to_string(),
            Some(e) => format!("eps_{e:e}.json"),
        }),
        config_hash: hash.clone(),
    });

    let cached = sink.as_ref().and_then(|s| {
        training::load_checkpoint(
            &s.manifest,
            &CheckpointExpectation {
                config_hash: Some(hash.clone()),
                shapes: None,
            },
        )
        .ok()
        .filter(|(_, m)| m.iteration == train.iterations)
        .map(|(store, _)| store)
    });
    let (store, status): (ParamStore, String) = match cached {
        Some(store) => (store, "cached".into()),
        None => match training::train(&train, setup.sys, &costs, exec, None, sink.as_ref(), |_| {}) {
            Ok(out) => (out.store, "trained".into()),
            Err(e) => return failed(format!("failed: {e}")),
        },
    };
    let mut eval = setup.eval.clone();
    eval.mode = train.mode;
    eval.adversary = false;
    match evaluate(&store.policy, setup.sys, &costs, &eval, &label, exec) {
        Ok(r) => SweepRow {
            label,
            epsilon: eps_value,
            total_state_variance: r.total_state_variance,
            success_rate: r.success_rate,
            mean_terminal_cost: r.mean_terminal_cost,
            diverged: r.diverged,
            succeeded: r.success_rate >= setup.success_threshold,
            status,
        },
        Err(e) => failed(format!("failed: {e}")),
    }
}

/// Trains (or reuses cached checkpoints) and evaluates one policy per ε.
/// A failing ε becomes a failed row; the sweep always continues.
pub fn epsilon_sweep(setup: &SweepSetup<'_>, epsilons: &[f64], exec: &Executor) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    if epsilons.is_empty() {
        return rows;
    }
    if setup.include_baseline {
        rows.push(sweep_one(setup, None, exec));
    }
    for &eps in epsilons {
        rows.push(sweep_one(setup, Some(eps), exec));
    }
    rows
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let io = |source: std::io::Error| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
    w.write_record([
        "schema",
        "label",
        "epsilon",
        "total_state_variance",
        "success_rate",
        "mean_terminal_cost",
        "diverged",
        "succeeded",
        "status",
    ])
    .map_err(|e| io(e.into()))?;
    for r in rows {
        w.write_record([
            SWEEP_SCHEMA.to_string(),
            r.label.clone(),
            r.epsilon.to_string(),
            r.total_state_variance.to_string(),
            r.success_rate.to_string(),
            r.mean_terminal_cost.to_string(),
            r.diverged.to_string(),
            r.succeeded.to_string(),
            r.status.clone(),
        ])
        .map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}

/// Linear-quadratic problem with a closed-form value function:
/// `dx = (A x + B u) dt + Σ (v dt + dw)`, running cost `½xᵀQx + ½uᵀRu`,
/// terminal cost `½xᵀQ_f x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqBenchmark {
    pub a: Matrix,
    pub b: Matrix,
    pub sigma: Matrix,
    pub q: Vec<f64>,
    pub q_f: Vec<f64>,
    pub r: Matrix,
}

impl LqBenchmark {
    /// Double integrator with noise on the velocity.
    pub fn double_integrator(noise: f64) -> Self {
        Self {
            a: Matrix::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]),
            b: Matrix::column(&[0.0, 1.0]),
            sigma: Matrix::column(&[0.0, noise]),
            q: vec![1.0, 0.1],
            q_f: vec![10.0, 1.0],
            r: Matrix::scalar(1.0),
        }
    }

    pub fn system(&self) -> Result<SystemModel> {
        Ok(SystemModel::linear("lq", self.a.clone(), self.b.clone(), self.sigma.clone())?)
    }

    pub fn costs(&self, epsilon: f64, beta: f64, lambda: f64) -> Result<CostSpec> {
        let n = self.a.rows();
        Ok(CostSpec::new(
            vec![0.0; n],
            self.q.clone(),
            self.q_f.clone(),
            vec![false; n],
            self.r.clone(),
            epsilon,
            beta,
            lambda,
        )?)
    }
}

/// `V(x, t) = ½xᵀP(t)x + c(t)` on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub times: Vec<f64>,
    pub p: Vec<Matrix>,
    pub c: Vec<f64>,
    pub sigma: Matrix,
}

impl RiccatiSolution {
    pub fn value(&self, x: &[f64], step: usize) -> f64 {
        let xv = Matrix::column(x);
        0.5 * xv.t_matmul(&self.p[step].matmul(&xv)).item() + self.c[step]
    }

    pub fn gradient(&self, x: &[f64], step: usize) -> Vec<f64> {
        self.p[step].matmul(&Matrix::column(x)).into_vec()
    }

    /// `Σᵀ V_x` for a batch of states (columns).
    pub fn z_batch(&self, x: &Matrix, step: usize) -> Matrix {
        self.sigma.t_matmul(&self.p[step].matmul(x))
    }
}

/// Integrates `−Ṗ = AᵀP + PA − P(BR⁻¹Bᵀ − ΣΣᵀ/ε)P + Q`, `P(T) = Q_f` and
/// `−ċ = ½tr(PΣΣᵀ)`, `c(T) = 0` backward with classical RK4 at a tenth of
/// the grid step. `epsilon = None` drops the adversarial term.
pub fn riccati_oracle(
    bench: &LqBenchmark,
    grid: &HorizonGrid,
    epsilon: Option<f64>,
) -> Result<RiccatiSolution> {
    riccati_with_substeps(bench, grid, epsilon, 10)
}

pub fn riccati_with_substeps(
    bench: &LqBenchmark,
    grid: &HorizonGrid,
    epsilon: Option<f64>,
    substeps: usize,
) -> Result<RiccatiSolution> {
    let n = bench.a.rows();
    let r_inv = bench
        .r
        .cholesky()
        .ok_or(EvalError::Criterion("R must be positive definite".into()))?
        .cholesky_solve(&Matrix::identity(bench.r.rows()));
    let ss = bench.sigma.matmul_t(&bench.sigma);
    let mut s = bench.b.matmul(&r_inv).matmul_t(&bench.b);
    if let Some(eps) = epsilon {
        s = s.zip_map(&ss, |a, b| a - b / eps);
    }
    let q = Matrix::diag(&bench.q);
    // d/ds of (P, c) in reversed time s = T − t.
    let rhs = |p: &Matrix| -> (Matrix, f64) {
        let at_p = bench.a.t_matmul(p);
        let pa = p.matmul(&bench.a);
        let psp = p.matmul(&s).matmul(p);
        let dp = Matrix::from_vec(
            n,
            n,
            (0..n * n)
                .map(|k| at_p.as_slice()[k] + pa.as_slice()[k] - psp.as_slice()[k] + q.as_slice()[k])
                .collect(),
        );
        let tr: f64 = (0..n).map(|i| p.matmul(&ss)[(i, i)]).sum();
        (dp, 0.5 * tr)
    };
    let h = grid.dt / substeps as f64;
    let mut p = Matrix::diag(&bench.q_f);
    let mut c = 0.0;
    let mut ps = vec![p.clone()];
    let mut cs = vec![c];
    for k in (0..grid.steps).rev() {
        for _ in 0..substeps {
            let axpy = |p: &Matrix, d: &Matrix, w: f64| p.zip_map(d, |a, b| a + w * b);
            let (k1, c1) = rhs(&p);
            let (k2, c2) = rhs(&axpy(&p, &k1, h / 2.0));
            let (k3, c3) = rhs(&axpy(&p, &k2, h / 2.0));
            let (k4, c4) = rhs(&axpy(&p, &k3, h));
            for i in 0..n * n {
                p.as_mut_slice()[i] += h / 6.0
                    * (k1.as_slice()[i] + 2.0 * k2.as_slice()[i] + 2.0 * k3.as_slice()[i] + k4.as_slice()[i]);
            }
            c += h / 6.0 * (c1 + 2.0 * c2 + 2.0 * c3 + c4);
        }
        if !p.is_finite() || p.max_abs() > 1e12 {
            return Err(EvalError::FiniteEscape { time: grid.time(k) });
        }
        // Symmetrize against round-off.
        p = p.zip_map(&p.transpose(), |a, b| 0.5 * (a + b));
        ps.push(p.clone());
        cs.push(c);
    }
    ps.reverse();
    cs.reverse();
    Ok(RiccatiSolution {
        times: (0..=grid.steps).map(|k| grid.time(k)).collect(),
        p: ps,
        c: cs,
        sigma: bench.sigma.clone(),
    })
}

/// Supplies the exact `y₀` and `z = ΣᵀV_x` from a Riccati solution in place
/// of the network.
pub struct AnalyticPredictor<'a> {
    pub solution: &'a RiccatiSolution,
    pub initial_state: Vec<f64>,
}

impl<G: Graph> GradientPredictor<G> for AnalyticPredictor<'_> {
    fn start(&mut self, g: &mut G, batch: usize) -> autodiff::Result<(G::Node, G::Node)> {
        let y0 = self.solution.value(&self.initial_state, 0);
        let x0 = Matrix::column(&self.initial_state);
        let z0 = self.solution.z_batch(&x0, 0);
        let ones = Matrix::filled(1, batch, 1.0);
        Ok((
            g.constant(Matrix::filled(1, batch, y0)),
            g.constant(z0.matmul(&ones)),
        ))
    }

    fn predict(&mut self, g: &mut G, x: &G::Node, step: usize, _t: f64) -> autodiff::Result<G::Node> {
        let z = self.solution.z_batch(g.value(x), step);
        Ok(g.constant(z))
    }
}

/// Mean `|ỹ_N − g(x̃_N)|` when the exact value gradient drives the rollout,
/// one entry per step size. Shrinks with the step for a consistent scheme.
#[allow(clippy::too_many_arguments)]
pub fn bsde_consistency(
    bench: &LqBenchmark,
    costs: &CostSpec,
    mode: Mode,
    horizon: f64,
    initial_state: &[f64],
    step_sizes: &[f64],
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let sys = bench.system()?;
    let adversary = mode == Mode::Minmax;
    let eps = adversary.then_some(costs.epsilon);
    step_sizes
        .iter()
        .map(|&dt| {
            let grid = HorizonGrid::with_dt(0.0, horizon, dt)?;
            let sol = riccati_oracle(bench, &grid, eps)?;
            let spec = RolloutSpec::new(&sys, costs, grid, mode, adversary, initial_state.to_vec())?;
            let mut pred = AnalyticPredictor {
                solution: &sol,
                initial_state: initial_state.to_vec(),
            };
            let noise = NoiseSource::Seeded { seed, stream: 0 }.block(0..samples, grid.steps, sys.noise_dim());
            let out = rollout_graph(&mut Eager, &spec, &mut pred, &noise, samples, false)?;
            Ok(out.y_final.zip_map(&out.y_target, |a, b| (a - b).abs()).sum() / samples as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::PendulumParams;
    use std::f64::consts::PI;

    #[test]
    fn variance_hand_values() {
        let two = vec![vec![vec![0.0]], vec![vec![2.0]]];
        assert_eq!(total_state_variance(&two).unwrap(), 2.0);
        let same = vec![vec![vec![1.0, 2.0]; 3]; 4];
        assert_eq!(total_state_variance(&same).unwrap(), 0.0);
        assert!(matches!(
            total_state_variance(&two[..1]),
            Err(EvalError::TooFewTrajectories(1))
        ));
    }

    fn pendulum_costs() -> CostSpec {
        CostSpec::new(
            vec![PI, 0.0],
            vec![1.0, 0.1],
            vec![100.0, 10.0],
            vec![true, false],
            Matrix::scalar(1.0),
            1.0,
            0.8,
            1e-4,
        )
        .unwrap()
    }

    #[test]
    fn pendulum_success_thresholds() {
        let c = pendulum_costs();
        let crit = SuccessCriterion::pendulum();
        assert!(task_success(&[PI, 0.0], &c, &crit));
        assert!(task_success(&[PI - 0.19, 0.5], &c, &crit));
        assert!(!task_success(&[PI - 0.5, 0.0], &c, &crit));
        // Wrapped: a full turn further is still upright.
        assert!(task_success(&[3.0 * PI + 0.1, 0.0], &c, &crit));
        let loose = SuccessCriterion {
            states: vec![0],
            tolerance: vec![0.6],
        };
        assert!(task_success(&[PI - 0.5, 5.0], &c, &loose));
    }

    #[test]
    fn stationary_riccati() {
        let bench = LqBenchmark {
            a: Matrix::zeros(2, 2),
            b: Matrix::zeros(2, 1),
            sigma: Matrix::zeros(2, 1),
            q: vec![0.0, 0.0],
            q_f: vec![1.0, 1.0],
            r: Matrix::scalar(1.0),
        };
        let grid = HorizonGrid::new(0.0, 1.0, 10).unwrap();
        let sol = riccati_oracle(&bench, &grid, None).unwrap();
        for (p, c) in sol.p.iter().zip(&sol.c) {
            assert_eq!(*p, Matrix::identity(2));
            assert_eq!(*c, 0.0);
        }
        assert!((sol.value(&[1.0, 2.0], 3) - 2.5).abs() < 1e-15);
    }

    fn scalar_bench() -> LqBenchmark {
        LqBenchmark {
            a: Matrix::scalar(0.0),
            b: Matrix::scalar(1.0),
            sigma: Matrix::scalar(0.0),
            q: vec![1.0],
            q_f: vec![0.0],
            r: Matrix::scalar(1.0),
        }
    }

    #[test]
    fn scalar_riccati_is_tanh() {
        let grid = HorizonGrid::new(0.0, 1.0, 50).unwrap();
        let sol = riccati_oracle(&scalar_bench(), &grid, None).unwrap();
        assert!((sol.p[0].item() - 1f64.tanh()).abs() < 1e-10);
        assert!((sol.p[0].item() - 0.7616).abs() < 1e-4);
        let fine = riccati_with_substeps(&scalar_bench(), &grid, None, 20).unwrap();
        assert!((fine.p[0].item() - sol.p[0].item()).abs() < 1e-8);
    }

    #[test]
    fn riccati_noise_offset_matches_closed_form() {
        // A = B = Q = 0: P ≡ Q_f, c(t) = ½ tr(Q_f ΣΣᵀ)(T − t).
        let bench = LqBenchmark {
            a: Matrix::scalar(0.0),
            b: Matrix::scalar(1.0),
            sigma: Matrix::scalar(0.5),
            q: vec![0.0],
            q_f: vec![2.0],
            r: Matrix::scalar(1e12),
        };
        let grid = HorizonGrid::new(0.0, 1.0, 10).unwrap();
        let sol = riccati_oracle(&bench, &grid, None).unwrap();
        assert!((sol.c[0] - 0.5 * 2.0 * 0.25).abs() < 1e-9);
    }

    #[test]
    fn strong_adversary_escapes() {
        let mut bench = LqBenchmark::double_integrator(1.0);
        bench.r = Matrix::scalar(100.0);
        let grid = HorizonGrid::new(0.0, 5.0, 50).unwrap();
        assert!(matches!(
            riccati_oracle(&bench, &grid, Some(0.01)),
            Err(EvalError::FiniteEscape { .. })
        ));
    }

    #[test]
    fn riccati_stays_symmetric_psd() {
        let bench = LqBenchmark::double_integrator(0.5);
        let grid = HorizonGrid::new(0.0, 1.0, 50).unwrap();
        let sol = riccati_oracle(&bench, &grid, Some(5.0)).unwrap();
        assert_eq!(*sol.p.last().unwrap(), Matrix::diag(&bench.q_f));
        for p in &sol.p {
            assert_eq!(p[(0, 1)], p[(1, 0)]);
            assert!(p[(0, 0)] >= 0.0 && p[(0, 0)] * p[(1, 1)] - p[(0, 1)] * p[(1, 0)] >= -1e-12);
        }
    }

    #[test]
    fn analytic_gradient_gives_consistent_value() {
        let bench = LqBenchmark::double_integrator(0.5);
        let costs = bench.costs(1e12, 1.0, 0.0).unwrap();
        let errs = bsde_consistency(&bench, &costs, Mode::Baseline, 1.0, &[1.0, 0.0], &[0.04, 0.02, 0.01], 256, 3).unwrap();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
        let costs = bench.costs(2.0, 1.0, 0.0).unwrap();
        let errs = bsde_consistency(&bench, &costs, Mode::Minmax, 1.0, &[1.0, 0.0], &[0.04, 0.02, 0.01], 256, 3).unwrap();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    }

    #[test]
    fn zero_noise_evaluation_has_no_variance() {
        let sys = SystemModel::pendulum(PendulumParams::default(), 0.5).unwrap();
        let costs = pendulum_costs();
        let store = ParamStore::init(&sys, [4, 4], 1.0, Default::default(), 5);
        let settings = EvalSettings {
            grid: HorizonGrid::new(0.0, 1.5, 75).unwrap(),
            mode: Mode::Minmax,
            initial_state: vec![0.0, 0.0],
            m_test: 8,
            noise: NoiseSource::Zero,
            adversary: false,
            criterion: SuccessCriterion::pendulum(),
            chunk: 3,
        };
        let r = evaluate(&store.policy, &sys, &costs, &settings, "x", &Executor::sequential()).unwrap();
        assert_eq!(r.total_state_variance, 0.0);
        assert_eq!(r.diverged, 0);
    }

    #[test]
    fn weak_adversary_matches_adversary_off() {
        let sys = SystemModel::pendulum(PendulumParams::default(), 0.5).unwrap();
        let costs = pendulum_costs().with_epsilon(1e12).unwrap();
        let store = ParamStore::init(&sys, [4, 4], 1.0, Default::default(), 5);
        let mut settings = EvalSettings {
            grid: HorizonGrid::new(0.0, 1.5, 75).unwrap(),
            mode: Mode::Minmax,
            initial_state: vec![0.0, 0.0],
            m_test: 16,
            noise: NoiseSource::Seeded { seed: 9, stream: 0 },
            adversary: false,
            criterion: SuccessCriterion::pendulum(),
            chunk: 5,
        };
        let exec = Executor::sequential();
        let off = evaluate(&store.policy, &sys, &costs, &settings, "x", &exec).unwrap();
        settings.adversary = true;
        let on = evaluate(&store.policy, &sys, &costs, &settings, "x", &exec).unwrap();
        assert!((off.total_state_variance - on.total_state_variance).abs() < 1e-6);
        assert!((off.mean_terminal_cost - on.mean_terminal_cost).abs() < 1e-6);
    }

    #[test]
    fn empty_sweep_is_empty() {
        let sys = SystemModel::pendulum(PendulumParams::default(), 0.1).unwrap();
        let costs = pendulum_costs();
        let grid = HorizonGrid::new(0.0, 0.1, 5).unwrap();
        let setup = SweepSetup {
            train: TrainConfig {
                iterations: 1,
                batch: 2,
                grid,
                mode: Mode::Minmax,
                initial_state: vec![0.0, 0.0],
                seed: 1,
                adam: Default::default(),
                hidden: [2, 2],
                forget_bias: 1.0,
                psi_lr_scale: 1.0,
                clip_norm: None,
                checkpoint_every: 0,
                chunk: 2,
                max_diverged_fraction: 0.1,
            },
            sys: &sys,
            costs: &costs,
            eval: EvalSettings {
                grid,
                mode: Mode::Minmax,
                initial_state: vec![0.0, 0.0],
                m_test: 4,
                noise: NoiseSource::Zero,
                adversary: false,
                criterion: SuccessCriterion::pendulum(),
                chunk: 2,
            },
            success_threshold: 0.5,
            cache_dir: None,
            hash_for: Box::new(|_| "h".into()),
            include_baseline: true,
        };
        assert!(epsilon_sweep(&setup, &[], &Executor::sequential()).is_empty());
        let rows = epsilon_sweep(&setup, &[1.0], &Executor::sequential());
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].label, "baseline");
    }
}
