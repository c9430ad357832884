//! Importance-sampled forward-backward SDE rollouts.
//!
//! The forward process is driven by the current policy's own controls
//! (`K = Γ_u u* + v*`), and the value process carries the matching
//! compensation term so that both stay under one measure:
//!
//! ```text
//! x_{n+1} = x_n + f Δt + Σ (K Δt + Δw √Δt)
//! y_{n+1} = y_n − (h − zᵀK) Δt + zᵀ Δw √Δt
//! h       = q − ½ zᵀ (Γ_u R_u⁻¹ Γ_uᵀ − I/ε) z
//! ```
//!
//! Everything is written against [`Graph`], one sample per column, so the
//! same code builds training tapes and runs tape-free evaluation.

use crate::autodiff::{self, Eager, Graph};
use crate::exec::{chunk_ranges, Executor};
use crate::neural::{lstm_stack_forward, NetNodes, NetParams, StackState};
use crate::noise::NoiseSource;
use crate::systems::{CostSpec, SystemModel};
use crate::tensor::Matrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FbsdeError {
    #[error("invalid horizon: {0}")]
    Grid(String),
    #[error("risk sensitivity epsilon must be > 0, got {0}")]
    Epsilon(f64),
    #[error("initial state has dimension {got}, expected {expected}")]
    InitialState { expected: usize, got: usize },
    #[error("policy does not match the system: {0}")]
    PolicyShape(String),
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
}

pub type Result<T> = std::result::Result<T, FbsdeError>;

/// Uniform time grid on `[τ, T]`. `dt` is stored, never recomputed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonGrid {
    pub tau: f64,
    pub horizon: f64,
    pub steps: usize,
    pub dt: f64,
}

impl HorizonGrid {
    pub fn new(tau: f64, horizon: f64, steps: usize) -> Result<Self> {
        if !(tau.is_finite() && horizon.is_finite()) || horizon < tau {
            return Err(FbsdeError::Grid(format!("need tau <= T, got [{tau}, {horizon}]")));
        }
        if steps == 0 {
            if horizon != tau {
                return Err(FbsdeError::Grid("zero steps require T == tau".into()));
            }
            return Ok(Self {
                tau,
                horizon,
                steps,
                dt: 0.0,
            });
        }
        Ok(Self {
            tau,
            horizon,
            steps,
            dt: (horizon - tau) / steps as f64,
        })
    }

    /// Grid with the given step size; `(T − τ)/dt` must be an integer.
    pub fn with_dt(tau: f64, horizon: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(FbsdeError::Grid(format!("dt must be > 0, got {dt}")));
        }
        let n = ((horizon - tau) / dt).round();
        if n < 1.0 || ((horizon - tau) - n * dt).abs() > 1e-9 * (horizon - tau).abs().max(1.0) {
            return Err(FbsdeError::Grid(format!(
                "horizon {} is not a whole number of steps of {dt}",
                horizon - tau
            )));
        }
        Self::new(tau, horizon, n as usize)
    }

    pub fn time(&self, n: usize) -> f64 {
        self.tau + n as f64 * self.dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Risk-sensitive / min-max: adversary `v* = z/ε` during training.
    #[serde(alias = "min-max")]
    Minmax,
    /// Risk-neutral: no adversary and no `1/ε` term in `h`.
    Baseline,
}

/// `u* = −R_u⁻¹ Γ_uᵀ z` and `v* = z/ε`, solving with the Cholesky factor of
/// `R_u` (never an explicit inverse).
pub fn optimal_controls(
    z: &[f64],
    gamma_u: &Matrix,
    r_u_factor: &Matrix,
    epsilon: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(epsilon > 0.0) {
        return Err(FbsdeError::Epsilon(epsilon));
    }
    let rhs = gamma_u.t_matmul(&Matrix::column(z));
    let u = r_u_factor.cholesky_solve(&rhs).scale(-1.0).into_vec();
    let v = z.iter().map(|zi| zi / epsilon).collect();
    Ok((u, v))
}

/// Value-process drift in z-form: `q − ½ zᵀ(Γ_u R_u⁻¹ Γ_uᵀ − I/ε) z`.
pub fn h_drift(x: &[f64], z: &[f64], costs: &CostSpec, gamma_u: &Matrix, t: f64) -> f64 {
    let zc = Matrix::column(z);
    let gz = gamma_u.t_matmul(&zc);
    let quad = gz.t_matmul(&costs.r_u_factor().cholesky_solve(&gz)).item();
    let zz: f64 = z.iter().map(|v| v * v).sum();
    costs.running_cost(x, t) - 0.5 * (quad - zz / costs.epsilon)
}

/// The same drift written with the state gradient `V_x`:
/// `q − ½ V_xᵀ(Σ Γ_u R_u⁻¹ Γ_uᵀ Σᵀ − Σ Σᵀ/ε) V_x`.
pub fn h_drift_from_value_gradient(
    x: &[f64],
    vx: &[f64],
    costs: &CostSpec,
    sys: &SystemModel,
    t: f64,
) -> f64 {
    let sigma = sys.diffusion();
    let gam = sys.gamma_u();
    let sg = sigma.matmul(gam);
    let rinv_sgt = costs.r_u_factor().cholesky_solve(&sg.transpose());
    let control_term = sg.matmul(&rinv_sgt);
    let noise_term = sigma.matmul_t(sigma).scale(1.0 / costs.epsilon);
    let mid = control_term.zip_map(&noise_term, |a, b| a - b);
    let v = Matrix::column(vx);
    let quad = v.t_matmul(&mid.matmul(&v)).item();
    costs.running_cost(x, t) - 0.5 * quad
}

/// Precomputed matrices for the control laws and `h` of one system/cost
/// pair.
#[derive(Debug, Clone)]
pub struct ControlLaw {
    mode: Mode,
    adversary: bool,
    epsilon: f64,
    /// `−R_u⁻¹ Γ_uᵀ`, p × m.
    gain_u: Matrix,
    gamma_u: Matrix,
    /// `Γ_u R_u⁻¹ Γ_uᵀ − I/ε` (min-max) or `Γ_u R_u⁻¹ Γ_uᵀ` (baseline).
    h_matrix: Matrix,
}

impl ControlLaw {
    /// `adversary` switches the `v*` channel on; it is ignored in baseline
    /// mode, where `v*` is identically zero.
    pub fn new(sys: &SystemModel, costs: &CostSpec, mode: Mode, adversary: bool) -> Self {
        let gamma_u = sys.gamma_u().clone();
        let gain_u = costs
            .r_u_factor()
            .cholesky_solve(&gamma_u.transpose())
            .scale(-1.0);
        let mut h_matrix = gamma_u.matmul(&gain_u).scale(-1.0);
        if mode == Mode::Minmax {
            for i in 0..h_matrix.rows() {
                h_matrix[(i, i)] -= 1.0 / costs.epsilon;
            }
        }
        Self {
            mode,
            adversary: adversary && mode == Mode::Minmax,
            epsilon: costs.epsilon,
            gain_u,
            gamma_u,
            h_matrix,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn adversary_active(&self) -> bool {
        self.adversary
    }

    pub fn noise_dim(&self) -> usize {
        self.gamma_u.rows()
    }

    pub fn control_dim(&self) -> usize {
        self.gamma_u.cols()
    }

    pub fn minimizing_control<G: Graph>(&self, g: &mut G, z: &G::Node) -> autodiff::Result<G::Node> {
        let k = g.constant(self.gain_u.clone());
        g.matmul(&k, z)
    }

    /// `v* = z/ε`; only called when the adversary is active.
    pub fn adversarial_control<G: Graph>(&self, g: &mut G, z: &G::Node) -> autodiff::Result<G::Node> {
        debug_assert!(self.adversary);
        g.scale(z, 1.0 / self.epsilon)
    }

    /// `K = Γ_u u + v`.
    pub fn drift_shift<G: Graph>(
        &self,
        g: &mut G,
        u: &G::Node,
        v: Option<&G::Node>,
    ) -> autodiff::Result<G::Node> {
        let gam = g.constant(self.gamma_u.clone());
        let gu = g.matmul(&gam, u)?;
        match v {
            Some(v) => g.add(&gu, v),
            None => Ok(gu),
        }
    }

    /// `h` for a batch, 1 × batch.
    pub fn h<G: Graph>(
        &self,
        g: &mut G,
        costs: &CostSpec,
        x: &G::Node,
        z: &G::Node,
    ) -> autodiff::Result<G::Node> {
        let q = costs.running_cost_graph(g, x)?;
        let a = g.constant(self.h_matrix.clone());
        let az = g.matmul(&a, z)?;
        let zaz = g.mul(z, &az)?;
        let quad = column_sums(g, &zaz)?;
        let half = g.scale(&quad, 0.5)?;
        g.sub(&q, &half)
    }
}

/// Column sums as a 1 × cols node.
pub fn column_sums<G: Graph>(g: &mut G, a: &G::Node) -> autodiff::Result<G::Node> {
    let rows = g.shape(a).0;
    let ones = g.constant(Matrix::filled(1, rows, 1.0));
    g.matmul(&ones, a)
}

/// Forward state update with the drift shift `K` already formed.
pub fn fsde_update<G: Graph>(
    g: &mut G,
    sys: &SystemModel,
    x: &G::Node,
    shift: &G::Node,
    dw: &G::Node,
    t: f64,
    dt: f64,
) -> autodiff::Result<G::Node> {
    let f = sys.drift_graph(g, x, t)?;
    let f_dt = g.scale(&f, dt)?;
    let k_dt = g.scale(shift, dt)?;
    let noise = g.scale(dw, dt.sqrt())?;
    let inc = g.add(&k_dt, &noise)?;
    let sigma = g.constant(sys.diffusion().clone());
    let diffused = g.matmul(&sigma, &inc)?;
    let x1 = g.add(x, &f_dt)?;
    g.add(&x1, &diffused)
}

/// Value update with the drift shift `K` already formed.
pub fn bsde_update<G: Graph>(
    g: &mut G,
    y: &G::Node,
    z: &G::Node,
    h: &G::Node,
    shift: &G::Node,
    dw: &G::Node,
    dt: f64,
) -> autodiff::Result<G::Node> {
    let zk = g.mul(z, shift)?;
    let zk = column_sums(g, &zk)?;
    let zdw = g.mul(z, dw)?;
    let zdw = column_sums(g, &zdw)?;
    let drift = g.sub(h, &zk)?;
    let drift = g.scale(&drift, dt)?;
    let mart = g.scale(&zdw, dt.sqrt())?;
    let y1 = g.sub(y, &drift)?;
    g.add(&y1, &mart)
}

/// One explicit Euler–Maruyama step of the importance-sampled forward SDE.
/// `dw` holds standard-normal draws; they are scaled by `√Δt` here.
#[allow(clippy::too_many_arguments)]
pub fn fsde_step<G: Graph>(
    g: &mut G,
    sys: &SystemModel,
    x: &G::Node,
    u: &G::Node,
    v: Option<&G::Node>,
    dw: &G::Node,
    t: f64,
    dt: f64,
) -> autodiff::Result<G::Node> {
    let gam = g.constant(sys.gamma_u().clone());
    let gu = g.matmul(&gam, u)?;
    let shift = match v {
        Some(v) => g.add(&gu, v)?,
        None => gu,
    };
    fsde_update(g, sys, x, &shift, dw, t, dt)
}

/// One step of the compensated value process, sharing `dw` with
/// [`fsde_step`].
#[allow(clippy::too_many_arguments)]
pub fn bsde_step<G: Graph>(
    g: &mut G,
    y: &G::Node,
    z: &G::Node,
    h: &G::Node,
    u: &G::Node,
    v: Option<&G::Node>,
    gamma_u: &Matrix,
    dw: &G::Node,
    dt: f64,
) -> autodiff::Result<G::Node> {
    let gam = g.constant(gamma_u.clone());
    let gu = g.matmul(&gam, u)?;
    let shift = match v {
        Some(v) => g.add(&gu, v)?,
        None => gu,
    };
    bsde_update(g, y, z, h, &shift, dw, dt)
}

/// Source of the initial value/gradient and of the per-step gradient
/// predictions.
pub trait GradientPredictor<G: Graph> {
    /// `(y₀, z₀)` spread over `batch` columns: 1 × batch and m × batch.
    fn start(&mut self, g: &mut G, batch: usize) -> autodiff::Result<(G::Node, G::Node)>;

    /// Prediction of `z` at grid index `step` from the state there.
    fn predict(&mut self, g: &mut G, x: &G::Node, step: usize, t: f64) -> autodiff::Result<G::Node>;
}

/// Trainable quantities: network weights and the initial value/gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub net: NetParams,
    pub y0: f64,
    pub z0: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PolicyNodes<N> {
    pub net: NetNodes<N>,
    pub y0: N,
    pub z0: N,
}

impl Policy {
    pub fn register<G: Graph>(&self, g: &mut G, trainable: bool) -> PolicyNodes<G::Node> {
        let net = self.net.register(g, trainable);
        let (y0, z0) = (Matrix::scalar(self.y0), Matrix::column(&self.z0));
        let (y0, z0) = if trainable {
            (g.param(y0), g.param(z0))
        } else {
            (g.constant(y0), g.constant(z0))
        };
        PolicyNodes { net, y0, z0 }
    }

    pub fn check(&self, sys: &SystemModel) -> Result<()> {
        if !self.net.is_consistent() {
            return Err(FbsdeError::PolicyShape("inconsistent layer sizes".into()));
        }
        if self.net.input_dim() != sys.state_dim() {
            return Err(FbsdeError::PolicyShape(format!(
                "network input {} vs state dimension {}",
                self.net.input_dim(),
                sys.state_dim()
            )));
        }
        if self.net.output_dim() != sys.noise_dim() || self.z0.len() != sys.noise_dim() {
            return Err(FbsdeError::PolicyShape(format!(
                "gradient outputs {}/{} vs noise dimension {}",
                self.net.output_dim(),
                self.z0.len(),
                sys.noise_dim()
            )));
        }
        Ok(())
    }
}

/// The recurrent network as a [`GradientPredictor`].
pub struct NetPredictor<N> {
    nodes: PolicyNodes<N>,
    state: Option<StackState<N>>,
    ones: Option<N>,
}

impl<N> NetPredictor<N> {
    pub fn new(nodes: PolicyNodes<N>) -> Self {
        Self {
            nodes,
            state: None,
            ones: None,
        }
    }

    pub fn nodes(&self) -> &PolicyNodes<N> {
        &self.nodes
    }
}

impl<G: Graph> GradientPredictor<G> for NetPredictor<G::Node> {
    fn start(&mut self, g: &mut G, batch: usize) -> autodiff::Result<(G::Node, G::Node)> {
        let ones = g.constant(Matrix::filled(1, batch, 1.0));
        let y0 = g.matmul(&self.nodes.y0, &ones)?;
        let z0 = g.matmul(&self.nodes.z0, &ones)?;
        self.state = Some(StackState::zeros(g, &self.nodes.net, batch));
        self.ones = Some(ones);
        Ok((y0, z0))
    }

    fn predict(&mut self, g: &mut G, x: &G::Node, _step: usize, _t: f64) -> autodiff::Result<G::Node> {
        let state = self.state.take().expect("start() before predict()");
        let ones = self.ones.as_ref().expect("start() before predict()");
        let (z, next) = lstm_stack_forward(g, &self.nodes.net, x, &state, ones)?;
        self.state = Some(next);
        Ok(z)
    }
}

/// Everything a rollout needs besides the predictor and the noise.
#[derive(Debug, Clone)]
pub struct RolloutSpec<'a> {
    pub sys: &'a SystemModel,
    pub costs: &'a CostSpec,
    pub grid: HorizonGrid,
    pub law: ControlLaw,
    pub initial_state: Vec<f64>,
}

impl<'a> RolloutSpec<'a> {
    pub fn new(
        sys: &'a SystemModel,
        costs: &'a CostSpec,
        grid: HorizonGrid,
        mode: Mode,
        adversary: bool,
        initial_state: Vec<f64>,
    ) -> Result<Self> {
        if initial_state.len() != sys.state_dim() {
            return Err(FbsdeError::InitialState {
                expected: sys.state_dim(),
                got: initial_state.len(),
            });
        }
        Ok(Self {
            sys,
            costs,
            grid,
            law: ControlLaw::new(sys, costs, mode, adversary),
            initial_state,
        })
    }
}

/// Per-step records of a batch, one column per sample.
///
/// `xs`, `ys`, `zs` have `N + 1` entries; `us`, `vs`, `dws` have `N`.
/// `vs` is all zeros when the adversary was off.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub xs: Vec<Matrix>,
    pub ys: Vec<Matrix>,
    pub zs: Vec<Matrix>,
    pub us: Vec<Matrix>,
    pub vs: Vec<Matrix>,
    pub dws: Vec<Matrix>,
    pub y_target: Matrix,
    pub diverged: Vec<bool>,
}

impl RolloutBatch {
    pub fn samples(&self) -> usize {
        self.y_target.cols()
    }

    pub fn steps(&self) -> usize {
        self.xs.len() - 1
    }

    /// State trajectory of sample `i`, `N + 1` rows.
    pub fn trajectory(&self, i: usize) -> Vec<Vec<f64>> {
        self.xs.iter().map(|x| x.col(i)).collect()
    }

    pub fn final_state(&self, i: usize) -> Vec<f64> {
        self.xs.last().expect("non-empty").col(i)
    }

    pub fn diverged_count(&self) -> usize {
        self.diverged.iter().filter(|d| **d).count()
    }

    /// Column-wise concatenation of batches recorded on the same grid.
    pub fn concat(parts: &[RolloutBatch]) -> RolloutBatch {
        let cat = |f: &dyn Fn(&RolloutBatch) -> &Vec<Matrix>| -> Vec<Matrix> {
            let len = f(&parts[0]).len();
            (0..len)
                .map(|n| {
                    let cols: Vec<&Matrix> = parts.iter().map(|p| &f(p)[n]).collect();
                    Matrix::concat_cols(&cols)
                })
                .collect()
        };
        RolloutBatch {
            xs: cat(&|p| &p.xs),
            ys: cat(&|p| &p.ys),
            zs: cat(&|p| &p.zs),
            us: cat(&|p| &p.us),
            vs: cat(&|p| &p.vs),
            dws: cat(&|p| &p.dws),
            y_target: Matrix::concat_cols(&parts.iter().map(|p| &p.y_target).collect::<Vec<_>>()),
            diverged: parts.iter().flat_map(|p| p.diverged.iter().copied()).collect(),
        }
    }
}

/// Terminal nodes of a rollout on some graph.
#[derive(Debug, Clone)]
pub struct RolloutOutput<N> {
    pub x_final: N,
    pub y_final: N,
    pub y_target: N,
    /// Columns whose state became non-finite at any step.
    pub diverged: Vec<usize>,
    pub record: Option<RolloutBatch>,
}

/// Propagates the coupled forward/value processes for `batch` samples.
///
/// `noise[n]` holds the standard-normal draws for step `n` (m × batch).
/// Each step forms `K` once and feeds it to both updates, so the two
/// processes consume the same increment.
pub fn rollout_graph<G, P>(
    g: &mut G,
    spec: &RolloutSpec<'_>,
    predictor: &mut P,
    noise: &[Matrix],
    batch: usize,
    record: bool,
) -> Result<RolloutOutput<G::Node>>
where
    G: Graph,
    P: GradientPredictor<G>,
{
    let grid = spec.grid;
    let n_steps = grid.steps;
    let m = spec.sys.noise_dim();
    assert_eq!(noise.len(), n_steps, "one noise block per step");

    let mut x0 = Matrix::zeros(spec.sys.state_dim(), batch);
    for j in 0..batch {
        x0.set_col(j, &spec.initial_state);
    }
    let mut x = g.constant(x0);
    let (mut y, mut z) = predictor.start(g, batch)?;

    let mut rec = record.then(|| RolloutBatch {
        xs: vec![g.value(&x).clone()],
        ys: vec![g.value(&y).clone()],
        zs: vec![g.value(&z).clone()],
        us: Vec::with_capacity(n_steps),
        vs: Vec::with_capacity(n_steps),
        dws: Vec::with_capacity(n_steps),
        y_target: Matrix::zeros(1, batch),
        diverged: vec![false; batch],
    });
    let mut diverged = vec![false; batch];

    for n in 0..n_steps {
        let t = grid.time(n);
        let u = spec.law.minimizing_control(g, &z)?;
        let v = if spec.law.adversary_active() {
            Some(spec.law.adversarial_control(g, &z)?)
        } else {
            None
        };
        let shift = spec.law.drift_shift(g, &u, v.as_ref())?;
        let h = spec.law.h(g, spec.costs, &x, &z)?;
        let dw = g.constant(noise[n].clone());
        debug_assert_eq!(g.shape(&dw), (m, batch));
        y = bsde_update(g, &y, &z, &h, &shift, &dw, grid.dt)?;
        x = fsde_update(g, spec.sys, &x, &shift, &dw, t, grid.dt)?;
        for j in g.value(&x).non_finite_cols() {
            diverged[j] = true;
        }
        let last = n + 1 == n_steps;
        if !last || record {
            z = predictor.predict(g, &x, n + 1, grid.time(n + 1))?;
        }
        if let Some(r) = rec.as_mut() {
            r.us.push(g.value(&u).clone());
            r.vs.push(match &v {
                Some(v) => g.value(v).clone(),
                None => Matrix::zeros(m, batch),
            });
            r.dws.push(noise[n].clone());
            r.xs.push(g.value(&x).clone());
            r.ys.push(g.value(&y).clone());
            r.zs.push(g.value(&z).clone());
        }
    }

    let y_target = spec.costs.terminal_cost_graph(g, &x)?;
    if let Some(r) = rec.as_mut() {
        r.y_target = g.value(&y_target).clone();
        r.diverged = diverged.clone();
    }
    Ok(RolloutOutput {
        x_final: x,
        y_final: y,
        y_target,
        diverged: diverged
            .iter()
            .enumerate()
            .filter_map(|(j, &d)| d.then_some(j))
            .collect(),
        record: rec,
    })
}

/// Tape-free batch rollout of a policy: chunks of `chunk` samples are run
/// (possibly in parallel) and merged in sample order.
pub fn rollout_batch(
    policy: &Policy,
    spec: &RolloutSpec<'_>,
    samples: usize,
    noise: NoiseSource,
    exec: &Executor,
    chunk: usize,
) -> Result<RolloutBatch> {
    policy.check(spec.sys)?;
    let ranges = chunk_ranges(samples, chunk);
    if ranges.is_empty() {
        return Err(FbsdeError::Grid("rollout needs at least one sample".into()));
    }
    let parts = exec.map(ranges, |range| {
        let mut g = Eager;
        let nodes = policy.register(&mut g, false);
        let mut pred = NetPredictor::new(nodes);
        let block = noise.block(range.clone(), spec.grid.steps, spec.sys.noise_dim());
        rollout_graph(&mut g, spec, &mut pred, &block, range.len(), true)
            .map(|out| out.record.expect("recorded"))
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(RolloutBatch::concat(&parts))
}

/// `Σᵢ β (y*ᵢ − yᵢ)² + (1−β) y*ᵢ²` over the batch columns.
pub fn terminal_loss_sum<G: Graph>(
    g: &mut G,
    y_target: &G::Node,
    y_final: &G::Node,
    beta: f64,
) -> autodiff::Result<G::Node> {
    let diff = g.sub(y_target, y_final)?;
    let fit = g.sum_squares(&diff)?;
    let fit = g.scale(&fit, beta)?;
    let size = g.sum_squares(y_target)?;
    let size = g.scale(&size, 1.0 - beta)?;
    g.add(&fit, &size)
}

/// `‖θ‖²` over all network tensors.
pub fn weight_norm_squared<G: Graph>(g: &mut G, net: &NetNodes<G::Node>) -> autodiff::Result<G::Node> {
    let mut total: Option<G::Node> = None;
    for t in net.tensors() {
        let sq = g.sum_squares(t)?;
        total = Some(match total {
            None => sq,
            Some(acc) => g.add(&acc, &sq)?,
        });
    }
    Ok(total.expect("eight tensors"))
}

/// Mini-batch loss `(1/M) Σᵢ [β‖y*ᵢ − yᵢ‖² + (1−β)‖y*ᵢ‖²] + λ‖θ‖²`.
pub fn training_loss<G: Graph>(
    g: &mut G,
    y_target: &G::Node,
    y_final: &G::Node,
    theta_sq: &G::Node,
    beta: f64,
    lambda: f64,
) -> autodiff::Result<G::Node> {
    let m = g.shape(y_target).1;
    let data = terminal_loss_sum(g, y_target, y_final, beta)?;
    let data = g.scale(&data, 1.0 / m as f64)?;
    let reg = g.scale(theta_sq, lambda)?;
    g.add(&data, &reg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{tape_gradient_check, Tape};
    use crate::systems::PendulumParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn scalar_costs(r: f64, eps: f64) -> CostSpec {
        CostSpec::new(
            vec![0.0],
            vec![2.0],
            vec![1.0],
            vec![false],
            Matrix::scalar(r),
            eps,
            0.5,
            0.0,
        )
        .unwrap()
    }

    fn pendulum_costs() -> CostSpec {
        CostSpec::new(
            vec![PI, 0.0],
            vec![1.0, 0.1],
            vec![100.0, 10.0],
            vec![true, false],
            Matrix::scalar(1.0),
            0.5,
            0.8,
            1e-4,
        )
        .unwrap()
    }

    #[test]
    fn controls_zero_gradient() {
        let (u, v) = optimal_controls(&[0.0], &Matrix::scalar(1.0), &Matrix::scalar(1.0), 2.0).unwrap();
        assert_eq!((u, v), (vec![0.0], vec![0.0]));
    }

    #[test]
    fn controls_scalar_hand_values() {
        let chol = Matrix::scalar(2.0).cholesky().unwrap();
        let (u, v) = optimal_controls(&[4.0], &Matrix::scalar(1.0), &chol, 2.0).unwrap();
        assert!((u[0] + 2.0).abs() < 1e-15);
        assert!((v[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn controls_risk_neutral_limit_and_bad_epsilon() {
        let z = [3.0, -4.0];
        let (_, v) = optimal_controls(&z, &Matrix::identity(2), &Matrix::identity(2), 1e12).unwrap();
        let vn = (v[0] * v[0] + v[1] * v[1]).sqrt();
        assert!(vn <= 1e-12 * 5.0 * (1.0 + 1e-12));
        assert_eq!(
            optimal_controls(&z, &Matrix::identity(2), &Matrix::identity(2), 0.0).unwrap_err(),
            FbsdeError::Epsilon(0.0)
        );
    }

    #[test]
    fn h_with_zero_gradient_is_running_cost() {
        let c = pendulum_costs();
        let x = [0.4, -1.0];
        assert_eq!(h_drift(&x, &[0.0], &c, &Matrix::scalar(10.0), 0.0), c.running_cost(&x, 0.0));
    }

    #[test]
    fn h_scalar_hand_value() {
        // q = 1 at x = 1 with weight 2 under the ½ convention.
        let c = scalar_costs(1.0, 2.0);
        let h = h_drift(&[1.0], &[2.0], &c, &Matrix::scalar(1.0), 0.0);
        assert!(h.abs() < 1e-15, "{h}");
    }

    #[test]
    fn h_risk_neutral_limit() {
        let c = scalar_costs(1.0, 1e12);
        let z = 3.0;
        let h = h_drift(&[0.5], &[z], &c, &Matrix::scalar(1.0), 0.0);
        let neutral = c.running_cost(&[0.5], 0.0) - 0.5 * z * z;
        assert!((h - neutral).abs() <= z * z / 1e12);
    }

    #[test]
    fn h_z_form_matches_value_gradient_form() {
        let sys = SystemModel::pendulum(PendulumParams::default(), 0.3).unwrap();
        let c = pendulum_costs();
        let x = [1.2, -0.4];
        let vx = [0.7, -2.5];
        let z = sys.diffusion().t_matmul(&Matrix::column(&vx)).into_vec();
        let a = h_drift(&x, &z, &c, sys.gamma_u(), 0.0);
        let b = h_drift_from_value_gradient(&x, &vx, &c, &sys, 0.0);
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn graph_h_matches_plain() {
        let sys = SystemModel::pendulum(PendulumParams::default(), 0.3).unwrap();
        let c = pendulum_costs();
        let law = ControlLaw::new(&sys, &c, Mode::Minmax, true);
        let x = Matrix::from_rows(&[&[0.1, 2.0], &[0.5, -1.0]]);
        let z = Matrix::row(&[0.3, -1.7]);
        let mut e = Eager;
        let h = law.h(&mut e, &c, &x, &z).unwrap();
        for j in 0..2 {
            let expect = h_drift(&x.col(j), &z.col(j), &c, sys.gamma_u(), 0.0);
            assert!((h[(0, j)] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn fsde_step_with_nothing_moving() {
        let sys = SystemModel::pendulum(PendulumParams::default(), 1.0).unwrap();
        let mut e = Eager;
        let x = Matrix::column(&[0.0, 0.0]);
        let x1 = fsde_step(
            &mut e,
            &sys,
            &x,
            &Matrix::scalar(0.0),
            Some(&Matrix::scalar(0.0)),
            &Matrix::scalar(0.0),
            0.0,
            0.02,
        )
        .unwrap();
        assert_eq!(x1, x);
    }

    #[test]
    fn fsde_step_pendulum_hand_value() {
        let sys = SystemModel::pendulum(PendulumParams::default(), 1.0).unwrap();
        assert!((sys.gamma_u().item() - 1.0).abs() < 1e-15);
        let mut e = Eager;
        let x = Matrix::column(&[PI, 0.0]);
        let x1 = fsde_step(
            &mut e,
            &sys,
            &x,
            &Matrix::scalar(0.5),
            Some(&Matrix::scalar(0.0)),
            &Matrix::scalar(0.0),
            0.0,
            0.02,
        )
        .unwrap();
        assert_eq!(x1[(0, 0)], PI);
        let expected = (0.5 - 9.81 * PI.sin()) * 0.02;
        assert!((x1[(1, 0)] - expected).abs() < 1e-15);
        assert!((x1[(1, 0)] - 0.01).abs() < 1e-14);
    }

    #[test]
    fn fsde_euler_converges_first_order() {
        // ẋ = −x, exact solution e^{−T}.
        let sys = SystemModel::linear(
            "decay",
            Matrix::scalar(-1.0),
            Matrix::scalar(1.0),
            Matrix::scalar(1.0),
        )
        .unwrap();
        let err = |dt: f64| {
            let steps = (1.0 / dt).round() as usize;
            let mut e = Eager;
            let mut x = Matrix::scalar(1.0);
            for n in 0..steps {
                x = fsde_step(
                    &mut e,
                    &sys,
                    &x,
                    &Matrix::scalar(0.0),
                    None,
                    &Matrix::scalar(0.0),
                    n as f64 * dt,
                    dt,
                )
                .unwrap();
            }
            (x.item() - (-1f64).exp()).abs()
        };
        let (e1, e2, e3) = (err(0.1), err(0.05), err(0.025));
        assert!((e1 / e2 - 2.0).abs() < 0.15, "{}", e1 / e2);
        assert!((e2 / e3 - 2.0).abs() < 0.1, "{}", e2 / e3);
    }

    #[test]
    fn pendulum_energy_error_shrinks_with_step() {
        let params = PendulumParams {
            damping: 0.0,
            ..PendulumParams::default()
        };
        let sys = SystemModel::pendulum(params, 1.0).unwrap();
        let energy = |x: &[f64]| 0.5 * x[1] * x[1] - 9.81 * x[0].cos();
        let drift = |dt: f64| {
            let steps = (1.5 / dt).round() as usize;
            let mut x = vec![1.0, 0.0];
            let e0 = energy(&x);
            let mut worst: f64 = 0.0;
            for n in 0..steps {
                let f = sys.drift(&x, n as f64 * dt).unwrap();
                x = vec![x[0] + f[0] * dt, x[1] + f[1] * dt];
                worst = worst.max((energy(&x) - e0).abs());
            }
            worst
        };
        let (a, b) = (drift(0.02), drift(0.01));
        // Explicit Euler gains energy at first order in the step.
        assert!(a < 1.5, "{a}");
        assert!(b < 0.6 * a, "{b} vs {a}");
    }

    #[test]
    fn bsde_step_unchanged_without_drift() {
        let mut e = Eager;
        let y = Matrix::scalar(1.5);
        let zero = Matrix::scalar(0.0);
        let y1 = bsde_step(
            &mut e,
            &y,
            &zero,
            &zero,
            &Matrix::scalar(2.0),
            None,
            &Matrix::scalar(1.0),
            &Matrix::scalar(0.7),
            0.1,
        )
        .unwrap();
        assert_eq!(y1, y);
    }

    #[test]
    fn bsde_step_hand_value() {
        // Γ_u u* + v* = 3 via u = 3, v = 0, Γ_u = 1.
        let mut e = Eager;
        let y1 = bsde_step(
            &mut e,
            &Matrix::scalar(1.0),
            &Matrix::scalar(1.0),
            &Matrix::scalar(2.0),
            &Matrix::scalar(3.0),
            Some(&Matrix::scalar(0.0)),
            &Matrix::scalar(1.0),
            &Matrix::scalar(0.0),
            0.1,
        )
        .unwrap();
        // y − (h − zK)Δt = 1 − (2 − 3)·0.1
        assert!((y1.item() - 1.1).abs() < 1e-15);
    }

    #[test]
    fn bsde_step_gradient_wrt_z() {
        let h = Matrix::scalar(0.3);
        let err = tape_gradient_check(
            |t: &mut Tape, z| {
                let y = t.constant(Matrix::scalar(0.5));
                let u = t.constant(Matrix::scalar(-0.8));
                let v = t.scale(&z, 0.5)?;
                let hn = t.constant(h.clone());
                let dw = t.constant(Matrix::scalar(0.9));
                let y1 = bsde_step(t, &y, &z, &hn, &u, Some(&v), &Matrix::scalar(2.0), &dw, 0.02)?;
                t.sum(&y1)
            },
            &Matrix::scalar(1.3),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn grid_rules() {
        let g = HorizonGrid::new(0.0, 1.5, 75).unwrap();
        assert!((g.dt - 0.02).abs() < 1e-15);
        assert!((g.steps as f64 * g.dt - 1.5).abs() < 1e-12);
        let g = HorizonGrid::with_dt(0.0, 1.5, 0.02).unwrap();
        assert_eq!(g.steps, 75);
        assert!(HorizonGrid::with_dt(0.0, 1.0, 0.3).is_err());
        assert!(HorizonGrid::new(0.0, 1.0, 0).is_err());
        assert_eq!(HorizonGrid::new(0.5, 0.5, 0).unwrap().dt, 0.0);
    }

    fn small_policy(sys: &SystemModel, seed: u64) -> Policy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Policy {
            net: NetParams::init(sys.state_dim(), 4, 4, sys.noise_dim(), 1.0, &mut rng),
            y0: 0.3,
            z0: vec![0.1; sys.noise_dim()],
        }
    }

    #[test]
    fn degenerate_grid_keeps_initial_values() {
        let sys = SystemModel::pendulum(PendulumParams::default(), 0.1).unwrap();
        let c = pendulum_costs();
        let grid = HorizonGrid::new(0.0, 0.0, 0).unwrap();
        let spec = RolloutSpec::new(&sys, &c, grid, Mode::Minmax, true, vec![0.0, 0.0]).unwrap();
        let p = small_policy(&sys, 1);
        let b = rollout_batch(&p, &spec, 3, NoiseSource::Seeded { seed: 1, stream: 0 }, &Executor::sequential(), 8)
            .unwrap();
        assert_eq!(b.xs.len(), 1);
        assert!(b.us.is_empty());
        let g0 = c.terminal_cost(&[0.0, 0.0]);
        assert!(b.y_target.as_slice().iter().all(|&v| (v - g0).abs() < 1e-12));
        assert_eq!(b.ys[0].as_slice(), &[0.3, 0.3, 0.3]);
    }

    #[test]
    fn rollout_is_deterministic_and_chunk_invariant() {
        let sys = SystemModel::pendulum(PendulumParams::default(), 0.5).unwrap();
        let c = pendulum_costs();
        let grid = HorizonGrid::new(0.0, 0.2, 10).unwrap();
        let spec = RolloutSpec::new(&sys, &c, grid, Mode::Minmax, true, vec![0.0, 0.0]).unwrap();
        let p = small_policy(&sys, 2);
        let src = NoiseSource::Seeded { seed: 5, stream: 0 };
        let a = rollout_batch(&p, &spec, 5, src, &Executor::sequential(), 2).unwrap();
        let b = rollout_batch(&p, &spec, 5, src, &Executor::sequential(), 2).unwrap();
        assert_eq!(a, b);
        let c5 = rollout_batch(&p, &spec, 5, src, &Executor::new(3), 5).unwrap();
        for n in 0..=10 {
            let d = a.xs[n].zip_map(&c5.xs[n], |p, q| (p - q).abs()).max_abs();
            assert!(d < 1e-12);
        }
    }

    #[test]
    fn zero_network_without_noise_follows_open_loop_flow() {
        let sys = SystemModel::pendulum(PendulumParams::default(), 0.5).unwrap();
        let c = pendulum_costs();
        let grid = HorizonGrid::new(0.0, 0.5, 25).unwrap();
        let x0 = vec![0.8, 0.0];
        let spec = RolloutSpec::new(&sys, &c, grid, Mode::Minmax, true, x0.clone()).unwrap();
        let p = Policy {
            net: NetParams::zeros(2, 3, 3, 1),
            y0: 0.0,
            z0: vec![0.0],
        };
        let b = rollout_batch(&p, &spec, 2, NoiseSource::Zero, &Executor::sequential(), 4).unwrap();
        let mut x = x0;
        for n in 0..25 {
            let f = sys.drift(&x, grid.time(n)).unwrap();
            x = vec![x[0] + f[0] * grid.dt, x[1] + f[1] * grid.dt];
            for i in 0..2 {
                assert_eq!(b.xs[n + 1].col(i), x);
            }
        }
    }

    #[test]
    fn loss_hand_values() {
        let mut e = Eager;
        let y = Matrix::row(&[1.0, 2.0]);
        let theta = Matrix::scalar(0.0);
        let l = training_loss(&mut e, &y, &y, &theta, 1.0, 0.0).unwrap();
        assert_eq!(l.item(), 0.0);

        let l = training_loss(&mut e, &Matrix::scalar(2.0), &Matrix::scalar(0.0), &theta, 0.5, 0.0).unwrap();
        assert!((l.item() - 4.0).abs() < 1e-15);

        let base = training_loss(&mut e, &Matrix::scalar(2.0), &Matrix::scalar(0.0), &Matrix::scalar(10.0), 0.5, 0.0)
            .unwrap();
        let reg = training_loss(&mut e, &Matrix::scalar(2.0), &Matrix::scalar(0.0), &Matrix::scalar(10.0), 0.5, 0.1)
            .unwrap();
        assert!((reg.item() - base.item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn risk_neutral_limit_matches_baseline() {
        let sys = SystemModel::pendulum(PendulumParams::default(), 0.3).unwrap();
        let c = pendulum_costs().with_epsilon(1e12).unwrap();
        let grid = HorizonGrid::new(0.0, 0.4, 20).unwrap();
        let p = small_policy(&sys, 8);
        let src = NoiseSource::Seeded { seed: 2, stream: 1 };
        let rs = RolloutSpec::new(&sys, &c, grid, Mode::Minmax, true, vec![0.0, 0.0]).unwrap();
        let base = RolloutSpec::new(&sys, &c, grid, Mode::Baseline, true, vec![0.0, 0.0]).unwrap();
        let a = rollout_batch(&p, &rs, 4, src, &Executor::sequential(), 4).unwrap();
        let b = rollout_batch(&p, &base, 4, src, &Executor::sequential(), 4).unwrap();
        let diff = |x: &[Matrix], y: &[Matrix]| {
            x.iter()
                .zip(y)
                .map(|(p, q)| p.zip_map(q, |a, b| (a - b).abs()).max_abs())
                .fold(0.0, f64::max)
        };
        assert!(diff(&a.xs, &b.xs) < 1e-6);
        assert!(diff(&a.ys, &b.ys) < 1e-6);
        assert!(diff(&a.zs, &b.zs) < 1e-6);
        assert!(diff(&a.us, &b.us) < 1e-6);
        assert!(diff(&a.vs, &b.vs) < 1e-6);
    }
}
