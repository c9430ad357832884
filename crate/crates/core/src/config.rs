//! Experiment configuration: TOML files, dotted overrides and per-system
//! defaults.

use crate::evaluation::{EvalSettings, LqBenchmark, SuccessCriterion};
use crate::fbsde::{FbsdeError, HorizonGrid, Mode};
use crate::neural::AdamConfig;
use crate::noise::{NoiseSource, EVAL_STREAM};
use crate::systems::{
    CostSpec, NoisePreset, PendulumParams, QuadcopterParams, SystemError, SystemModel,
};
use crate::tensor::Matrix;
use crate::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const CONFIG_SCHEMA: &str = "minmax-fbsde/config/v1";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Syntax { path: String, message: String },
    #[error("bad override `{0}`: expected key=value")]
    Override(String),
    #[error("at `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Fbsde(#[from] FbsdeError),
}

type Result<T, E = ConfigError> = std::result::Result<T, E>;

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemName {
    Pendulum,
    Quadcopter,
    Lq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub preset: NoisePreset,
    /// Explicit diffusion scale; overrides the preset when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

impl NoiseConfig {
    pub fn resolved_scale(&self) -> f64 {
        self.scale.unwrap_or_else(|| self.preset.scale())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqConfig {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub target: Vec<f64>,
    pub running_weights: Vec<f64>,
    pub terminal_weights: Vec<f64>,
    pub wrap: Vec<bool>,
    /// Control weight matrix, row by row.
    pub r_u: Vec<Vec<f64>>,
    pub epsilon: f64,
    pub beta: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: usize,
    pub batch: usize,
    pub tau: f64,
    pub horizon: f64,
    pub dt: f64,
    pub initial_state: Vec<f64>,
    pub hidden: [usize; 2],
    pub forget_bias: f64,
    pub adam: AdamConfig,
    /// Learning-rate multiplier for the trainable initial value/gradient.
    pub psi_lr_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    pub checkpoint_every: usize,
    pub chunk: usize,
    pub max_diverged_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub m_test: usize,
    /// Seed of the test noise; the run seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub adversary: bool,
    pub success: SuccessCriterion,
    /// Checkpoint to evaluate; `<out>/checkpoint.json` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Optional baseline checkpoint for a variance comparison row.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub epsilons: Vec<f64>,
    pub success_threshold: f64,
    pub include_baseline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckSection {
    pub steps: usize,
    pub samples: usize,
    pub fd_step: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    pub system: SystemName,
    pub mode: Mode,
    pub seed: u64,
    /// Worker threads; 0 picks the machine's parallelism.
    pub workers: usize,
    pub output_dir: PathBuf,
    pub noise: NoiseConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pendulum: Option<PendulumParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadcopter: Option<QuadcopterParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lq: Option<LqConfig>,
    pub cost: CostConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub grad_check: GradCheckSection,
}

fn adam(learning_rate: f64) -> AdamConfig {
    AdamConfig {
        learning_rate,
        ..AdamConfig::default()
    }
}

/// Fully populated defaults for one system.
pub fn defaults(system: SystemName) -> ExperimentConfig {
    let sweep = SweepSection {
        epsilons: vec![0.005, 0.01, 0.05, 0.1, 0.5, 50.0],
        success_threshold: 0.5,
        include_baseline: true,
    };
    let grad_check = GradCheckSection {
        steps: 5,
        samples: 2,
        fd_step: 1e-4,
        tolerance: 1e-4,
    };
    let common = |cost, train, success, noise| ExperimentConfig {
        schema: CONFIG_SCHEMA.into(),
        system,
        mode: Mode::Minmax,
        seed: 7,
        workers: 0,
        output_dir: PathBuf::from("runs").join(match system {
            SystemName::Pendulum => "pendulum",
            SystemName::Quadcopter => "quadcopter",
            SystemName::Lq => "lq",
        }),
        noise: NoiseConfig {
            preset: NoisePreset::Low,
            scale: noise,
        },
        pendulum: None,
        quadcopter: None,
        lq: None,
        cost,
        train,
        eval: EvalSection {
            m_test: 128,
            seed: None,
            adversary: false,
            success,
            checkpoint: None,
            baseline_checkpoint: None,
        },
        sweep: sweep.clone(),
        grad_check: grad_check.clone(),
    };
    match system {
        SystemName::Pendulum => {
            let mut c = common(
                CostConfig {
                    target: vec![PI, 0.0],
                    running_weights: vec![1.0, 0.1],
                    terminal_weights: vec![100.0, 10.0],
                    wrap: vec![true, false],
                    r_u: vec![vec![1.0]],
                    epsilon: 0.1,
                    beta: 0.8,
                    lambda: 1e-4,
                },
                TrainSection {
                    iterations: 3000,
                    batch: 128,
                    tau: 0.0,
                    horizon: 1.5,
                    dt: 0.02,
                    initial_state: vec![0.0, 0.0],
                    hidden: [16, 16],
                    forget_bias: 1.0,
                    adam: adam(3e-3),
                    psi_lr_scale: 10.0,
                    clip_norm: None,
                    checkpoint_every: 500,
                    chunk: 16,
                    max_diverged_fraction: 0.1,
                },
                SuccessCriterion::pendulum(),
                None,
            );
            c.pendulum = Some(PendulumParams::default());
            c
        }
        SystemName::Quadcopter => {
            let mut target = vec![0.0; 12];
            target[..3].copy_from_slice(&[1.0, -1.0, 1.0]);
            let mut wrap = vec![false; 12];
            wrap[3..6].fill(true);
            let mut running = vec![0.1; 12];
            running[..3].fill(1.0);
            let mut terminal = vec![1.0; 12];
            terminal[..3].fill(100.0);
            terminal[6..9].fill(10.0);
            let mut c = common(
                CostConfig {
                    target,
                    running_weights: running,
                    terminal_weights: terminal,
                    wrap,
                    r_u: {
                        let w = QuadcopterParams::default().acceleration_weight();
                        (0..4).map(|i| (0..4).map(|j| w[(i, j)]).collect()).collect()
                    },
                    epsilon: 0.1,
                    beta: 0.8,
                    lambda: 1e-4,
                },
                TrainSection {
                    iterations: 10000,
                    batch: 128,
                    tau: 0.0,
                    horizon: 2.0,
                    dt: 0.02,
                    initial_state: vec![0.0; 12],
                    hidden: [32, 32],
                    forget_bias: 1.0,
                    adam: adam(1e-2),
                    psi_lr_scale: 10.0,
                    clip_norm: None,
                    checkpoint_every: 1000,
                    chunk: 16,
                    max_diverged_fraction: 0.1,
                },
                SuccessCriterion::quadcopter(),
                None,
            );
            c.quadcopter = Some(QuadcopterParams::default());
            c
        }
        SystemName::Lq => {
            let bench = LqBenchmark::double_integrator(0.5);
            let mut c = common(
                CostConfig {
                    target: vec![0.0, 0.0],
                    running_weights: bench.q.clone(),
                    terminal_weights: bench.q_f.clone(),
                    wrap: vec![false, false],
                    r_u: vec![vec![1.0]],
                    epsilon: 1e12,
                    beta: 1.0,
                    lambda: 1e-4,
                },
                TrainSection {
                    iterations: 2000,
                    batch: 64,
                    tau: 0.0,
                    horizon: 1.0,
                    dt: 0.02,
                    initial_state: vec![1.0, 0.0],
                    hidden: [16, 16],
                    forget_bias: 1.0,
                    adam: adam(1e-2),
                    psi_lr_scale: 10.0,
                    clip_norm: None,
                    checkpoint_every: 500,
                    chunk: 16,
                    max_diverged_fraction: 0.1,
                },
                SuccessCriterion {
                    states: vec![0, 1],
                    tolerance: vec![0.5, 0.5],
                },
                Some(0.5),
            );
            c.mode = Mode::Baseline;
            c.lq = Some(LqConfig {
                a: vec![vec![0.0, 1.0], vec![0.0, 0.0]],
                b: vec![vec![0.0], vec![1.0]],
            });
            c
        }
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {value}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

/// Sets a dotted `key=value` override inside `table`.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(assignment.into()))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(assignment.into()));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(invalid(key.trim(), format!("`{part}` is not a table"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

/// Recursively overlays `top` onto `base`; non-table values replace.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn to_table(config: &ExperimentConfig) -> toml::Table {
    toml::Table::try_from(config).expect("config serializes to a table")
}

/// Builds a validated config from file text plus overrides.
pub fn parse_config_str(text: &str, origin: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut user: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Syntax {
        path: origin.into(),
        message: e.to_string(),
    })?;
    for o in overrides {
        apply_override(&mut user, o)?;
    }
    let system = match user.get("system") {
        None => SystemName::Pendulum,
        Some(v) => SystemName::deserialize(v.clone())
            .map_err(|e| invalid("system", e.to_string()))?,
    };
    let mut table = to_table(&defaults(system));
    merge(&mut table, user);
    let text = toml::to_string(&table).expect("table serializes");
    let de = toml::Deserializer::parse(&text).map_err(|e| ConfigError::Syntax {
        path: origin.into(),
        message: e.to_string(),
    })?;
    let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Invalid {
        key: e.path().to_string(),
        message: e.inner().message().to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

/// Reads `path` (if any) and applies overrides.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    match path {
        None => parse_config_str("", "<defaults>", overrides),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                path: p.to_path_buf(),
                source,
            })?;
            parse_config_str(&text, &p.display().to_string(), overrides)
        }
    }
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(invalid("schema", format!("unsupported schema `{}`", self.schema)));
        }
        let c = &self.cost;
        if !(c.epsilon > 0.0) || !c.epsilon.is_finite() {
            return Err(invalid("cost.epsilon", format!("epsilon must be > 0, got {}", c.epsilon)));
        }
        if !(0.0..=1.0).contains(&c.beta) {
            return Err(invalid("cost.beta", format!("beta must lie in [0, 1], got {}", c.beta)));
        }
        if !(c.lambda >= 0.0) {
            return Err(invalid("cost.lambda", "lambda must be >= 0"));
        }
        if let Some(s) = self.noise.scale {
            if !(s > 0.0) || !s.is_finite() {
                return Err(invalid("noise.scale", "noise scale must be > 0"));
            }
        }
        let t = &self.train;
        for (key, v) in [
            ("train.iterations", t.iterations),
            ("train.batch", t.batch),
            ("train.chunk", t.chunk),
            ("train.hidden", t.hidden[0].min(t.hidden[1])),
        ] {
            if v == 0 {
                return Err(invalid(key, "must be >= 1"));
            }
        }
        if !(t.dt > 0.0) {
            return Err(invalid("train.dt", "dt must be > 0"));
        }
        if self.eval.m_test < 2 {
            return Err(invalid("eval.m_test", "need at least 2 test trajectories"));
        }
        if let Some(e) = self.sweep.epsilons.iter().find(|e| !(**e > 0.0)) {
            return Err(invalid("sweep.epsilons", format!("epsilon must be > 0, got {e}")));
        }
        let n = self.build_system()?.state_dim();
        for (key, len) in [
            ("cost.target", c.target.len()),
            ("cost.running_weights", c.running_weights.len()),
            ("cost.terminal_weights", c.terminal_weights.len()),
            ("cost.wrap", c.wrap.len()),
            ("train.initial_state", t.initial_state.len()),
        ] {
            if len != n {
                return Err(invalid(key, format!("expected {n} entries, got {len}")));
            }
        }
        self.grid().map_err(|e| invalid("train.dt", e.to_string()))?;
        self.build_costs()?;
        self.eval
            .success
            .validate(n)
            .map_err(|e| invalid("eval.success", e.to_string()))?;
        Ok(())
    }

    pub fn grid(&self) -> Result<HorizonGrid> {
        Ok(HorizonGrid::with_dt(self.train.tau, self.train.horizon, self.train.dt)?)
    }

    pub fn noise_scale(&self) -> f64 {
        self.noise.resolved_scale()
    }

    pub fn build_system(&self) -> Result<SystemModel> {
        let sigma = self.noise_scale();
        Ok(match self.system {
            SystemName::Pendulum => {
                SystemModel::pendulum(self.pendulum.unwrap_or_default(), sigma)?
            }
            SystemName::Quadcopter => {
                SystemModel::quadcopter(self.quadcopter.unwrap_or_default(), sigma)?
            }
            SystemName::Lq => self.lq_benchmark()?.system().map_err(|e| invalid("lq", e.to_string()))?,
        })
    }

    /// The linear-quadratic problem described by the `lq` and `cost` tables,
    /// with noise entering along the input directions.
    pub fn lq_benchmark(&self) -> Result<LqBenchmark> {
        let lq = self.lq.as_ref().ok_or_else(|| invalid("lq", "missing lq table"))?;
        let a = matrix("lq.a", &lq.a)?;
        let b = matrix("lq.b", &lq.b)?;
        if a.rows() != a.cols() || b.rows() != a.rows() {
            return Err(invalid("lq.b", "A must be square and B must have as many rows"));
        }
        Ok(LqBenchmark {
            sigma: b.scale(self.noise_scale()),
            a,
            b,
            q: self.cost.running_weights.clone(),
            q_f: self.cost.terminal_weights.clone(),
            r: matrix("cost.r_u", &self.cost.r_u)?,
        })
    }

    pub fn build_costs(&self) -> Result<CostSpec> {
        let c = &self.cost;
        CostSpec::new(
            c.target.clone(),
            c.running_weights.clone(),
            c.terminal_weights.clone(),
            c.wrap.clone(),
            matrix("cost.r_u", &c.r_u)?,
            c.epsilon,
            c.beta,
            c.lambda,
        )
        .map_err(|e| invalid("cost", e.to_string()))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            iterations: t.iterations,
            batch: t.batch,
            grid: self.grid()?,
            mode: self.mode,
            initial_state: t.initial_state.clone(),
            seed: self.seed,
            adam: t.adam,
            hidden: t.hidden,
            forget_bias: t.forget_bias,
            psi_lr_scale: t.psi_lr_scale,
            clip_norm: t.clip_norm,
            checkpoint_every: t.checkpoint_every,
            chunk: t.chunk,
            max_diverged_fraction: t.max_diverged_fraction,
        })
    }

    pub fn eval_settings(&self) -> Result<EvalSettings> {
        Ok(EvalSettings {
            grid: self.grid()?,
            mode: self.mode,
            initial_state: self.train.initial_state.clone(),
            m_test: self.eval.m_test,
            noise: NoiseSource::Seeded {
                seed: self.eval.seed.unwrap_or(self.seed),
                stream: EVAL_STREAM,
            },
            adversary: self.eval.adversary,
            criterion: self.eval.success.clone(),
            chunk: self.train.chunk,
        })
    }

    /// SHA-256 over everything that shapes a trained model: system, plant
    /// constants, noise, costs, mode, seed and training settings.
    pub fn model_hash(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            system: SystemName,
            mode: Mode,
            seed: u64,
            noise_scale: f64,
            pendulum: &'a Option<PendulumParams>,
            quadcopter: &'a Option<QuadcopterParams>,
            lq: &'a Option<LqConfig>,
            cost: &'a CostConfig,
            train: &'a TrainSection,
        }
        let mut train = self.train.clone();
        // Cadence does not change the parameters.
        train.checkpoint_every = 0;
        let key = Key {
            system: self.system,
            mode: self.mode,
            seed: self.seed,
            noise_scale: self.noise_scale(),
            pendulum: &self.pendulum,
            quadcopter: &self.quadcopter,
            lq: &self.lq,
            cost: &self.cost,
            train: &train,
        };
        let text = serde_json::to_string(&key).expect("hash key serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn matrix(key: &str, rows: &[Vec<f64>]) -> Result<Matrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(invalid(key, "expected a non-empty rectangular matrix"));
    }
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    Ok(Matrix::from_rows(&refs))
}
