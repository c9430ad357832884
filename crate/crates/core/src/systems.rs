//! Control-affine stochastic plants and quadratic task costs.
//!
//! Every plant has the form `dx = f(x,t) dt + G u dt + Σ (v dt + dw)` with
//! `G = Σ Γ_u`. The actuation and diffusion matrices are state-independent
//! for all provided plants; the drift carries the nonlinearity and is written
//! once against [`Graph`] so that it is differentiable on a tape and cheap
//! when evaluated eagerly.

use crate::autodiff::{self, Eager, Graph};
use crate::tensor::Matrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SystemError {
    #[error("non-finite state {0:?}")]
    NonFiniteState(Vec<f64>),
    #[error("state has dimension {got}, system `{system}` expects {expected}")]
    StateDim {
        system: String,
        expected: usize,
        got: usize,
    },
    #[error("diffusion matrix must have full column rank")]
    RankDeficientDiffusion,
    #[error("actuation is not in the range of the diffusion: residual {0:e}")]
    Factorization(f64),
    #[error("control weight R_u must be symmetric positive definite")]
    ControlWeightNotPd,
    #[error("risk sensitivity epsilon must be > 0, got {0}")]
    Epsilon(f64),
    #[error("beta must lie in [0, 1], got {0}")]
    Beta(f64),
    #[error("lambda must be >= 0, got {0}")]
    Lambda(f64),
    #[error("cost vector `{field}` has length {got}, expected {expected}")]
    CostDim {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("noise scale must be > 0, got {0}")]
    NoiseScale(f64),
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
}

/// Named diffusion magnitudes on the actuated channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoisePreset {
    Low,
    High,
}

impl NoisePreset {
    pub fn scale(self) -> f64 {
        match self {
            NoisePreset::Low => 0.1,
            NoisePreset::High => 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendulumParams {
    pub mass: f64,
    pub length: f64,
    pub damping: f64,
    pub gravity: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            length: 1.0,
            damping: 0.1,
            gravity: 9.81,
        }
    }
}

/// Rigid-body quadcopter constants.
///
/// State ordering: position (x, y, z), Euler angles (roll, pitch, yaw),
/// linear velocity, body rates. The frame is forward-left-up. Inputs are the
/// four rotor thrust deviations from hover (front, left, back, right).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadcopterParams {
    pub mass: f64,
    pub arm: f64,
    pub ixx: f64,
    pub iyy: f64,
    pub izz: f64,
    /// Rotor drag torque per unit thrust.
    pub yaw_coefficient: f64,
    pub gravity: f64,
}

impl QuadcopterParams {
    /// Map from rotor thrusts to (vertical, roll, pitch, yaw) accelerations.
    pub fn mixer(&self) -> Matrix {
        let (a, k) = (self.arm, self.yaw_coefficient);
        let rows: [[f64; 4]; 4] = [
            [1.0 / self.mass; 4],
            [0.0, a / self.ixx, 0.0, -a / self.ixx],
            [-a / self.iyy, 0.0, a / self.iyy, 0.0],
            [k / self.izz, -k / self.izz, k / self.izz, -k / self.izz],
        ];
        Matrix::from_vec(4, 4, rows.concat())
    }

    /// `MᵀM` for the mixer `M`: penalises commanded accelerations
    /// rather than raw thrusts, so every channel costs the same.
    pub fn acceleration_weight(&self) -> Matrix {
        let m = self.mixer();
        m.transpose().matmul(&m)
    }
}

impl Default for QuadcopterParams {
    fn default() -> Self {
        Self {
            mass: 0.5,
            arm: 0.17,
            ixx: 0.0032,
            iyy: 0.0032,
            izz: 0.0055,
            yaw_coefficient: 0.016,
            gravity: 9.81,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Plant {
    /// θ = 0 hanging down, θ = π inverted.
    Pendulum(PendulumParams),
    Quadcopter(QuadcopterParams),
    /// `f(x) = A x`.
    Linear { a: Matrix },
}

/// Drift, actuation, diffusion and control-to-noise map evaluated at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct Dynamics {
    pub drift: Vec<f64>,
    pub actuation: Matrix,
    pub diffusion: Matrix,
    pub gamma_u: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    name: String,
    plant: Plant,
    actuation: Matrix,
    diffusion: Matrix,
    gamma_u: Matrix,
}

impl SystemModel {
    /// Builds a model and derives `Γ_u` from `G = Σ Γ_u` by least squares.
    /// Fails unless `Σ` has full column rank and the factorization is exact
    /// to 1e-10.
    pub fn new(
        name: impl Into<String>,
        plant: Plant,
        actuation: Matrix,
        diffusion: Matrix,
    ) -> Result<Self, SystemError> {
        assert_eq!(actuation.rows(), diffusion.rows(), "G and Σ row mismatch");
        let gram = diffusion.t_matmul(&diffusion);
        let chol = gram.cholesky().ok_or(SystemError::RankDeficientDiffusion)?;
        let gamma_u = chol.cholesky_solve(&diffusion.t_matmul(&actuation));
        let residual = diffusion
            .matmul(&gamma_u)
            .zip_map(&actuation, |a, b| a - b)
            .max_abs();
        if residual > 1e-10 {
            return Err(SystemError::Factorization(residual));
        }
        Ok(Self {
            name: name.into(),
            plant,
            actuation,
            diffusion,
            gamma_u,
        })
    }

    /// Pendulum with noise on the angular-acceleration channel.
    pub fn pendulum(params: PendulumParams, noise_scale: f64) -> Result<Self, SystemError> {
        check_noise(noise_scale)?;
        let inertia = params.mass * params.length * params.length;
        let g = Matrix::column(&[0.0, 1.0 / inertia]);
        let sigma = Matrix::column(&[0.0, noise_scale]);
        Self::new("pendulum", Plant::Pendulum(params), g, sigma)
    }

    /// Quadcopter with noise on the four actuated acceleration channels
    /// (vertical, roll, pitch, yaw).
    pub fn quadcopter(params: QuadcopterParams, noise_scale: f64) -> Result<Self, SystemError> {
        check_noise(noise_scale)?;
        let mixer = params.mixer();
        let mut g = Matrix::zeros(12, 4);
        for r in 0..4 {
            for c in 0..4 {
                g[(8 + r, c)] = mixer[(r, c)];
            }
        }
        let mut sigma = Matrix::zeros(12, 4);
        for r in 0..4 {
            sigma[(8 + r, r)] = noise_scale;
        }
        Self::new("quadcopter", Plant::Quadcopter(params), g, sigma)
    }

    pub fn linear(
        name: impl Into<String>,
        a: Matrix,
        b: Matrix,
        diffusion: Matrix,
    ) -> Result<Self, SystemError> {
        assert_eq!(a.rows(), a.cols(), "A must be square");
        Self::new(name, Plant::Linear { a }, b, diffusion)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn plant(&self) -> &Plant {
        &self.plant
    }

    pub fn state_dim(&self) -> usize {
        self.actuation.rows()
    }

    pub fn control_dim(&self) -> usize {
        self.actuation.cols()
    }

    pub fn noise_dim(&self) -> usize {
        self.diffusion.cols()
    }

    pub fn actuation(&self) -> &Matrix {
        &self.actuation
    }

    pub fn diffusion(&self) -> &Matrix {
        &self.diffusion
    }

    pub fn gamma_u(&self) -> &Matrix {
        &self.gamma_u
    }

    /// Drift for a batch of states (n × batch).
    pub fn drift_graph<G: Graph>(
        &self,
        g: &mut G,
        x: &G::Node,
        _t: f64,
    ) -> autodiff::Result<G::Node> {
        match &self.plant {
            Plant::Pendulum(p) => {
                let theta = g.row(x, 0)?;
                let omega = g.row(x, 1)?;
                let s = g.sin(&theta)?;
                let inertia = p.mass * p.length * p.length;
                let grav = g.scale(&s, -p.mass * p.gravity * p.length / inertia)?;
                let damp = g.scale(&omega, -p.damping / inertia)?;
                let acc = g.add(&grav, &damp)?;
                g.concat_rows(&[&omega, &acc])
            }
            Plant::Quadcopter(p) => quad_drift(g, p, x),
            Plant::Linear { a } => {
                let a = g.constant(a.clone());
                g.matmul(&a, x)
            }
        }
    }

    pub fn drift(&self, x: &[f64], t: f64) -> Result<Vec<f64>, SystemError> {
        self.check_state(x)?;
        let mut e = Eager;
        let f = self.drift_graph(&mut e, &Matrix::column(x), t)?;
        Ok(f.into_vec())
    }

    pub fn eval_dynamics(&self, x: &[f64], t: f64) -> Result<Dynamics, SystemError> {
        Ok(Dynamics {
            drift: self.drift(x, t)?,
            actuation: self.actuation.clone(),
            diffusion: self.diffusion.clone(),
            gamma_u: self.gamma_u.clone(),
        })
    }

    fn check_state(&self, x: &[f64]) -> Result<(), SystemError> {
        if x.len() != self.state_dim() {
            return Err(SystemError::StateDim {
                system: self.name.clone(),
                expected: self.state_dim(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SystemError::NonFiniteState(x.to_vec()));
        }
        Ok(())
    }
}

fn check_noise(scale: f64) -> Result<(), SystemError> {
    if scale > 0.0 && scale.is_finite() {
        Ok(())
    } else {
        Err(SystemError::NoiseScale(scale))
    }
}

/// Thrust-decoupled rigid-body model: hover thrust acts along the body axis
/// while thrust deviations enter the vertical channel directly, and Euler
/// rates equal body rates.
fn quad_drift<G: Graph>(g: &mut G, p: &QuadcopterParams, x: &G::Node) -> autodiff::Result<G::Node> {
    let vel = g.slice_rows(x, 6, 3)?;
    let rates = g.slice_rows(x, 9, 3)?;
    let phi = g.row(x, 3)?;
    let theta = g.row(x, 4)?;
    let psi = g.row(x, 5)?;
    let (sphi, cphi) = (g.sin(&phi)?, g.cos(&phi)?);
    let (sth, cth) = (g.sin(&theta)?, g.cos(&theta)?);
    let (spsi, cpsi) = (g.sin(&psi)?, g.cos(&psi)?);

    // Body z-axis in the world frame.
    let cphi_sth = g.mul(&cphi, &sth)?;
    let a = g.mul(&cphi_sth, &cpsi)?;
    let b = g.mul(&sphi, &spsi)?;
    let ax = g.add(&a, &b)?;
    let c = g.mul(&cphi_sth, &spsi)?;
    let d = g.mul(&sphi, &cpsi)?;
    let ay = g.sub(&c, &d)?;
    let az = g.mul(&cphi, &cth)?;

    let acc_x = g.scale(&ax, p.gravity)?;
    let acc_y = g.scale(&ay, p.gravity)?;
    let ones = g.constant(Matrix::filled(1, g.shape(x).1, 1.0));
    let az_minus_one = g.sub(&az, &ones)?;
    let acc_z = g.scale(&az_minus_one, p.gravity)?;

    let pr = g.row(x, 9)?;
    let qr = g.row(x, 10)?;
    let rr = g.row(x, 11)?;
    let qr_r = g.mul(&qr, &rr)?;
    let pr_r = g.mul(&pr, &rr)?;
    let pr_q = g.mul(&pr, &qr)?;
    let dp = g.scale(&qr_r, (p.iyy - p.izz) / p.ixx)?;
    let dq = g.scale(&pr_r, (p.izz - p.ixx) / p.iyy)?;
    let dr = g.scale(&pr_q, (p.ixx - p.iyy) / p.izz)?;

    g.concat_rows(&[&vel, &rates, &acc_x, &acc_y, &acc_z, &dp, &dq, &dr])
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Quadratic tracking costs, risk sensitivity and loss weights.
///
/// `q(x) = ½ Σ_j w_j d_j²` and `g(x) = ½ Σ_j wf_j d_j²` with
/// `d = x − target`, wrapped to `(-π, π]` on the flagged angle states.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub target: Vec<f64>,
    pub running_weights: Vec<f64>,
    pub terminal_weights: Vec<f64>,
    pub wrap: Vec<bool>,
    pub r_u: Matrix,
    pub epsilon: f64,
    pub beta: f64,
    pub lambda: f64,
    r_u_chol: Matrix,
}

impl CostSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        target: Vec<f64>,
        running_weights: Vec<f64>,
        terminal_weights: Vec<f64>,
        wrap: Vec<bool>,
        r_u: Matrix,
        epsilon: f64,
        beta: f64,
        lambda: f64,
    ) -> Result<Self, SystemError> {
        let n = target.len();
        for (field, len) in [
            ("running_weights", running_weights.len()),
            ("terminal_weights", terminal_weights.len()),
            ("wrap", wrap.len()),
        ] {
            if len != n {
                return Err(SystemError::CostDim {
                    field,
                    expected: n,
                    got: len,
                });
            }
        }
        if !(epsilon > 0.0) {
            return Err(SystemError::Epsilon(epsilon));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(SystemError::Beta(beta));
        }
        if !(lambda >= 0.0) {
            return Err(SystemError::Lambda(lambda));
        }
        let r_u_chol = r_u.cholesky().ok_or(SystemError::ControlWeightNotPd)?;
        Ok(Self {
            target,
            running_weights,
            terminal_weights,
            wrap,
            r_u,
            epsilon,
            beta,
            lambda,
            r_u_chol,
        })
    }

    /// Same costs with a different risk sensitivity.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self, SystemError> {
        if !(epsilon > 0.0) {
            return Err(SystemError::Epsilon(epsilon));
        }
        Ok(Self {
            epsilon,
            ..self.clone()
        })
    }

    pub fn state_dim(&self) -> usize {
        self.target.len()
    }

    /// Lower Cholesky factor of `R_u`.
    pub fn r_u_factor(&self) -> &Matrix {
        &self.r_u_chol
    }

    /// Deviation from the target with angle wrapping applied.
    pub fn deviation(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.target)
            .zip(&self.wrap)
            .map(|((&xi, &ti), &w)| if w { wrap_angle(xi - ti) } else { xi - ti })
            .collect()
    }

    pub fn running_cost(&self, x: &[f64], _t: f64) -> f64 {
        quad_form(&self.running_weights, &self.deviation(x))
    }

    pub fn terminal_cost(&self, x: &[f64]) -> f64 {
        quad_form(&self.terminal_weights, &self.deviation(x))
    }

    pub fn running_cost_graph<G: Graph>(&self, g: &mut G, x: &G::Node) -> autodiff::Result<G::Node> {
        self.quadratic_graph(g, x, &self.running_weights)
    }

    pub fn terminal_cost_graph<G: Graph>(&self, g: &mut G, x: &G::Node) -> autodiff::Result<G::Node> {
        self.quadratic_graph(g, x, &self.terminal_weights)
    }

    /// `½ Σ_j w_j d_j²` per column. The wrap offset is a constant taken
    /// from the forward value, so gradients pass through unchanged.
    fn quadratic_graph<G: Graph>(
        &self,
        g: &mut G,
        x: &G::Node,
        weights: &[f64],
    ) -> autodiff::Result<G::Node> {
        let xv = g.value(x);
        let (n, cols) = xv.shape();
        if n != self.target.len() {
            return Err(autodiff::AutodiffError::Shape {
                primitive: "cost",
                shapes: vec![(n, cols), (self.target.len(), 1)],
            });
        }
        let mut shift = Matrix::zeros(n, cols);
        for i in 0..n {
            for j in 0..cols {
                let raw = xv[(i, j)] - self.target[i];
                let d = if self.wrap[i] && raw.is_finite() {
                    wrap_angle(raw)
                } else {
                    raw
                };
                shift[(i, j)] = xv[(i, j)] - d;
            }
        }
        let shift = g.constant(shift);
        let d = g.sub(x, &shift)?;
        let dd = g.mul(&d, &d)?;
        let w = g.constant(Matrix::row(weights).scale(0.5));
        g.matmul(&w, &dd)
    }
}

fn quad_form(w: &[f64], d: &[f64]) -> f64 {
    0.5 * w.iter().zip(d).map(|(w, d)| w * d * d).sum::<f64>()
}
