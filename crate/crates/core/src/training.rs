//! The outer training loop, parameter store and checkpoints.

use crate::autodiff::{Graph, Tape};
use crate::exec::{chunk_ranges, Executor};
use crate::fbsde::{
    self, rollout_graph, terminal_loss_sum, weight_norm_squared, FbsdeError, HorizonGrid, Mode,
    NetPredictor, Policy, RolloutSpec,
};
use crate::neural::{AdamConfig, AdamState, NetParams, NeuralError, NET_TENSOR_NAMES};
use crate::noise::NoiseSource;
use crate::systems::{CostSpec, SystemModel};
use crate::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const CHECKPOINT_SCHEMA: &str = "minmax-fbsde/checkpoint/v1";
pub const LOSS_SCHEMA: &str = "minmax-fbsde/loss/v1";

/// Tensor names in store order: the network, then the initial value and
/// initial gradient.
pub fn tensor_names() -> Vec<&'static str> {
    let mut names = NET_TENSOR_NAMES.to_vec();
    names.extend(["psi.y0", "psi.z0"]);
    names
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("iteration {iteration}: {count} of {batch} samples diverged")]
    Diverged {
        iteration: usize,
        count: usize,
        batch: usize,
    },
    #[error("iteration {iteration}: non-finite loss {loss}")]
    NonFiniteLoss { iteration: usize, loss: f64 },
    #[error("iteration {iteration}: update produced non-finite values in `{name}`; rolled back")]
    NonFiniteUpdate { iteration: usize, name: String },
    #[error("iteration {iteration}: {source}")]
    Optimizer {
        iteration: usize,
        #[source]
        source: NeuralError,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Fbsde(#[from] FbsdeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint not found: {0}")]
    NotFound(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("data file {path} is truncated or oversized: expected {expected} bytes, found {found}")]
    Length {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("config hash mismatch: checkpoint {found}, current config {expected}")]
    ConfigHash { expected: String, found: String },
    #[error("shape mismatch for `{name}`: checkpoint {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
}

/// Resolved settings of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub grid: HorizonGrid,
    pub mode: Mode,
    pub initial_state: Vec<f64>,
    pub seed: u64,
    pub adam: AdamConfig,
    pub hidden: [usize; 2],
    pub forget_bias: f64,
    /// Learning-rate multiplier for the initial value and gradient.
    pub psi_lr_scale: f64,
    /// Global-norm gradient clip; off when `None`.
    pub clip_norm: Option<f64>,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
    /// Samples per tape. Fixed independently of the worker count.
    pub chunk: usize,
    pub max_diverged_fraction: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.iterations == 0 || self.batch == 0 || self.grid.steps == 0 {
            return Err(TrainError::Config("iterations, batch and steps must be >= 1".into()));
        }
        if self.hidden.contains(&0) || self.chunk == 0 {
            return Err(TrainError::Config("hidden sizes and chunk must be >= 1".into()));
        }
        Ok(())
    }
}

/// All trainable values and the optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub policy: Policy,
    pub adam: AdamState,
}

impl ParamStore {
    /// Xavier-initialised network; `y₀ = 0` and small uniform `z₀`.
    pub fn init(sys: &SystemModel, hidden: [usize; 2], forget_bias: f64, adam: AdamConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = NetParams::init(
            sys.state_dim(),
            hidden[0],
            hidden[1],
            sys.noise_dim(),
            forget_bias,
            &mut rng,
        );
        let z0 = (0..sys.noise_dim())
            .map(|_| rng.random_range(-0.1..=0.1))
            .collect();
        Self::from_policy(
            Policy {
                net,
                y0: 0.0,
                z0,
            },
            adam,
        )
    }

    pub fn from_policy(policy: Policy, adam: AdamConfig) -> Self {
        let shapes: Vec<_> = Self::tensor_refs(&policy).iter().map(|t| t.shape()).collect();
        Self {
            adam: AdamState::new(adam, &shapes),
            policy,
        }
    }

    fn tensor_refs(policy: &Policy) -> Vec<Matrix> {
        let mut out: Vec<Matrix> = policy.net.tensors().into_iter().cloned().collect();
        out.push(Matrix::scalar(policy.y0));
        out.push(Matrix::column(&policy.z0));
        out
    }

    /// Copies of all trainable tensors in [`tensor_names`] order.
    pub fn tensors(&self) -> Vec<Matrix> {
        Self::tensor_refs(&self.policy)
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors().iter().map(|t| t.shape()).collect()
    }

    fn set_tensors(&mut self, tensors: Vec<Matrix>) {
        let mut it = tensors.into_iter();
        for slot in self.policy.net.tensors_mut() {
            *slot = it.next().expect("ten tensors");
        }
        self.policy.y0 = it.next().expect("y0").item();
        self.policy.z0 = it.next().expect("z0").into_vec();
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// One row of the loss history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    pub mean_terminal_cost: f64,
    pub diverged: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub store: ParamStore,
    pub history: Vec<IterationRecord>,
}

/// Where and how to write checkpoints during training.
#[derive(Debug, Clone)]
pub struct CheckpointSink {
    pub manifest: PathBuf,
    pub config_hash: String,
}

struct ChunkResult {
    loss_sum: f64,
    terminal_sum: f64,
    valid: usize,
    diverged: usize,
    grads: Vec<Matrix>,
}

fn chunk_gradient(
    policy: &Policy,
    spec: &RolloutSpec<'_>,
    noise: &NoiseSource,
    range: std::ops::Range<usize>,
    beta: f64,
) -> Result<ChunkResult, FbsdeError> {
    let steps = spec.grid.steps;
    let m = spec.sys.noise_dim();
    let mut block = noise.block(range.clone(), steps, m);
    let mut batch = range.len();
    let mut diverged = 0;
    loop {
        let mut tape = Tape::new();
        let nodes = policy.register(&mut tape, true);
        let leaves: Vec<_> = nodes
            .net
            .tensors()
            .into_iter()
            .copied()
            .chain([nodes.y0, nodes.z0])
            .collect();
        let mut pred = NetPredictor::new(nodes);
        let out = rollout_graph(&mut tape, spec, &mut pred, &block, batch, false)?;
        if !out.diverged.is_empty() {
            // Rerun without the diverged samples; their draws are dropped.
            diverged += out.diverged.len();
            let keep: Vec<usize> = (0..batch).filter(|j| !out.diverged.contains(j)).collect();
            if keep.is_empty() {
                return Ok(ChunkResult {
                    loss_sum: 0.0,
                    terminal_sum: 0.0,
                    valid: 0,
                    diverged,
                    grads: leaves.iter().map(|v| Matrix::zeros(v.shape().0, v.shape().1)).collect(),
                });
            }
            block = block.iter().map(|b| b.select_cols(&keep)).collect();
            batch = keep.len();
            continue;
        }
        let loss = terminal_loss_sum(&mut tape, &out.y_target, &out.y_final, beta)?;
        let grads = tape.backward(&loss).map_err(FbsdeError::from)?;
        return Ok(ChunkResult {
            loss_sum: tape.value(&loss).item(),
            terminal_sum: tape.value(&out.y_target).sum(),
            valid: batch,
            diverged,
            grads: leaves.iter().map(|v| grads.get_or_zero(v)).collect(),
        });
    }
}

/// `λ‖θ‖²` and its gradient over the ten store tensors (zero for ψ).
fn regularizer(policy: &Policy, lambda: f64) -> Result<(f64, Vec<Matrix>), FbsdeError> {
    let mut tape = Tape::new();
    let nodes = policy.net.register(&mut tape, true);
    let sq = weight_norm_squared(&mut tape, &nodes)?;
    let reg = tape.scale(&sq, lambda)?;
    let grads = tape.backward(&reg)?;
    let mut out: Vec<Matrix> = nodes.tensors().iter().map(|v| grads.get_or_zero(v)).collect();
    out.push(Matrix::zeros(1, 1));
    out.push(Matrix::zeros(policy.z0.len(), 1));
    Ok((tape.value(&reg).item(), out))
}

/// Loss and gradient of one iteration at the current parameters.
pub fn loss_and_gradient(
    store: &ParamStore,
    spec: &RolloutSpec<'_>,
    costs: &CostSpec,
    batch: usize,
    chunk: usize,
    noise: NoiseSource,
    exec: &Executor,
) -> Result<(IterationRecord, Vec<Matrix>, usize), FbsdeError> {
    let ranges = chunk_ranges(batch, chunk);
    let results = exec.map(ranges, |r| chunk_gradient(&store.policy, spec, &noise, r, costs.beta));
    let mut grads: Vec<Matrix> = store.shapes().iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
    let (mut loss_sum, mut terminal_sum, mut valid, mut diverged) = (0.0, 0.0, 0usize, 0usize);
    for res in results {
        let res = res?;
        loss_sum += res.loss_sum;
        terminal_sum += res.terminal_sum;
        valid += res.valid;
        diverged += res.diverged;
        for (acc, g) in grads.iter_mut().zip(&res.grads) {
            acc.add_assign(g);
        }
    }
    let (reg, reg_grads) = regularizer(&store.policy, costs.lambda)?;
    let scale = if valid > 0 { 1.0 / valid as f64 } else { 0.0 };
    for (acc, rg) in grads.iter_mut().zip(&reg_grads) {
        *acc = acc.scale(scale);
        acc.add_assign(rg);
    }
    let loss = if valid > 0 { loss_sum * scale + reg } else { f64::NAN };
    let record = IterationRecord {
        iteration: 0,
        loss,
        mean_terminal_cost: if valid > 0 { terminal_sum * scale } else { f64::NAN },
        diverged,
    };
    Ok((record, grads, valid))
}

/// Runs the training loop. `on_iteration` sees every history row as it is
/// produced.
pub fn train(
    config: &TrainConfig,
    sys: &SystemModel,
    costs: &CostSpec,
    exec: &Executor,
    init: Option<ParamStore>,
    sink: Option<&CheckpointSink>,
    mut on_iteration: impl FnMut(&IterationRecord),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let spec = RolloutSpec::new(sys, costs, config.grid, config.mode, true, config.initial_state.clone())?;
    let mut store = init.unwrap_or_else(|| {
        ParamStore::init(sys, config.hidden, config.forget_bias, config.adam, config.seed)
    });
    store.policy.check(sys)?;
    let names = tensor_names();
    let mut history = Vec::with_capacity(config.iterations);

    for k in 0..config.iterations {
        let noise = NoiseSource::Seeded {
            seed: config.seed,
            stream: k as u64,
        };
        let (mut record, mut grads, _) =
            loss_and_gradient(&store, &spec, costs, config.batch, config.chunk, noise, exec)?;
        record.iteration = k;
        if record.diverged as f64 > config.max_diverged_fraction * config.batch as f64 {
            if let Some(s) = sink {
                save_checkpoint(&store, &s.manifest, &s.config_hash, config.seed, k)?;
            }
            return Err(TrainError::Diverged {
                iteration: k,
                count: record.diverged,
                batch: config.batch,
            });
        }
        if !record.loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                iteration: k,
                loss: record.loss,
            });
        }
        if let Some(max) = config.clip_norm {
            let norm = grads.iter().map(|g| g.sum_of_squares()).sum::<f64>().sqrt();
            if norm > max {
                grads = grads.iter().map(|g| g.scale(max / norm)).collect();
            }
        }

        let backup = store.clone();
        let mut tensors = store.tensors();
        {
            let mut refs: Vec<&mut Matrix> = tensors.iter_mut().collect();
            let mut scales = vec![1.0; refs.len()];
            scales[refs.len() - 2..].fill(config.psi_lr_scale);
            store
                .adam
                .step_scaled(&mut refs, &grads, &names, &scales)
                .map_err(|source| TrainError::Optimizer { iteration: k, source })?;
        }
        if let Some(bad) = tensors.iter().position(|t| !t.is_finite()) {
            // Keep the last good parameters on disk.
            if let Some(s) = sink {
                save_checkpoint(&backup, &s.manifest, &s.config_hash, config.seed, k)?;
            }
            return Err(TrainError::NonFiniteUpdate {
                iteration: k,
                name: names[bad].to_string(),
            });
        }
        store.set_tensors(tensors);

        on_iteration(&record);
        history.push(record);
        if let Some(s) = sink {
            if config.checkpoint_every > 0 && (k + 1) % config.checkpoint_every == 0 {
                save_checkpoint(&store, &s.manifest, &s.config_hash, config.seed, k + 1)?;
            }
        }
    }
    if let Some(s) = sink {
        save_checkpoint(&store, &s.manifest, &s.config_hash, config.seed, config.iterations)?;
    }
    Ok(TrainOutcome { store, history })
}

/// Loss history as CSV: `schema,iteration,loss,mean_terminal_cost,diverged`.
pub fn write_loss_csv(path: &Path, history: &[IterationRecord]) -> Result<(), TrainError> {
    let io = |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
    w.write_record(["schema", "iteration", "loss", "mean_terminal_cost", "diverged"])
        .map_err(|e| io(e.into()))?;
    for r in history {
        w.write_record([
            LOSS_SCHEMA.to_string(),
            r.iteration.to_string(),
            r.loss.to_string(),
            r.mean_terminal_cost.to_string(),
            r.diverged.to_string(),
        ])
        .map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

/// Checkpoint manifest. The data file holds, as little-endian `f64`, every
/// tensor in `tensors` order, then the Adam first moments, then the second
/// moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub schema: String,
    pub config_hash: String,
    pub seed: u64,
    pub iteration: usize,
    pub adam: AdamConfig,
    pub adam_step: u64,
    pub tensors: Vec<TensorEntry>,
    pub sections: Vec<String>,
    pub data_file: String,
    pub byte_len: usize,
}

impl CheckpointManifest {
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors.iter().map(|t| (t.shape[0], t.shape[1])).collect()
    }
}

fn data_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save_checkpoint(
    store: &ParamStore,
    manifest_path: &Path,
    config_hash: &str,
    seed: u64,
    iteration: usize,
) -> Result<(), CheckpointError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CheckpointError::Io { path, source }
    };
    let tensors = store.tensors();
    let mut bytes = Vec::new();
    for section in [&tensors, &store.adam.m, &store.adam.v] {
        for t in section {
            for v in t.as_slice() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let data = data_path(manifest_path);
    let manifest = CheckpointManifest {
        schema: CHECKPOINT_SCHEMA.into(),
        config_hash: config_hash.into(),
        seed,
        iteration,
        adam: store.adam.config,
        adam_step: store.adam.t,
        tensors: tensor_names()
            .iter()
            .zip(&tensors)
            .map(|(n, t)| TensorEntry {
                name: n.to_string(),
                shape: [t.rows(), t.cols()],
            })
            .collect(),
        sections: vec!["param".into(), "adam_m".into(), "adam_v".into()],
        data_file: data
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        byte_len: bytes.len(),
    };
    if let Some(dir) = manifest_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let mut f = fs::File::create(&data).map_err(io(&data))?;
    f.write_all(&bytes).map_err(io(&data))?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(manifest_path, text).map_err(io(manifest_path))?;
    Ok(())
}

/// What a loaded checkpoint must agree with.
#[derive(Debug, Clone, Default)]
pub struct CheckpointExpectation {
    pub config_hash: Option<String>,
    pub shapes: Option<Vec<(usize, usize)>>,
}

pub fn load_checkpoint(
    manifest_path: &Path,
    expect: &CheckpointExpectation,
) -> Result<(ParamStore, CheckpointManifest), CheckpointError> {
    if !manifest_path.exists() {
        return Err(CheckpointError::NotFound(manifest_path.to_path_buf()));
    }
    let text = fs::read_to_string(manifest_path).map_err(|source| CheckpointError::Io {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let bad = |message: String| CheckpointError::Manifest {
        path: manifest_path.to_path_buf(),
        message,
    };
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if manifest.schema != CHECKPOINT_SCHEMA {
        return Err(bad(format!("unknown schema `{}`", manifest.schema)));
    }
    let names = tensor_names();
    if manifest.tensors.len() != names.len()
        || manifest.tensors.iter().zip(&names).any(|(t, n)| t.name != *n)
    {
        return Err(bad("unexpected tensor list".into()));
    }
    if let Some(hash) = &expect.config_hash {
        if *hash != manifest.config_hash {
            return Err(CheckpointError::ConfigHash {
                expected: hash.clone(),
                found: manifest.config_hash.clone(),
            });
        }
    }
    let shapes = manifest.shapes();
    if let Some(want) = &expect.shapes {
        for ((name, &found), &expected) in names.iter().zip(&shapes).zip(want) {
            if found != expected {
                return Err(CheckpointError::Shape {
                    name: name.to_string(),
                    expected,
                    found,
                });
            }
        }
    }
    let floats: usize = shapes.iter().map(|(r, c)| r * c).sum::<usize>() * 3;
    let expected = floats * 8;
    let data = manifest_path.with_file_name(&manifest.data_file);
    let bytes = fs::read(&data).map_err(|source| CheckpointError::Io {
        path: data.clone(),
        source,
    })?;
    if bytes.len() != expected || manifest.byte_len != expected {
        return Err(CheckpointError::Length {
            path: data,
            expected,
            found: bytes.len(),
        });
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut read_section = || -> Vec<Matrix> {
        shapes
            .iter()
            .map(|&(r, c)| Matrix::from_vec(r, c, values.by_ref().take(r * c).collect()))
            .collect()
    };
    let params = read_section();
    let m = read_section();
    let v = read_section();

    let (h1, h2) = (shapes[1].1, shapes[4].1);
    let (n, out) = (shapes[0].1, shapes[6].0);
    let mut store = ParamStore::from_policy(
        Policy {
            net: NetParams::zeros(n, h1, h2, out),
            y0: 0.0,
            z0: vec![0.0; out],
        },
        manifest.adam,
    );
    if store.shapes() != shapes {
        return Err(bad("tensor shapes are not a consistent network".into()));
    }
    store.set_tensors(params);
    store.adam.m = m;
    store.adam.v = v;
    store.adam.t = manifest.adam_step;
    Ok((store, manifest))
}

/// Convenience for callers that only need the policy rollout spec.
pub fn rollout_spec_for<'a>(
    config: &TrainConfig,
    sys: &'a SystemModel,
    costs: &'a CostSpec,
    adversary: bool,
) -> Result<RolloutSpec<'a>, fbsde::FbsdeError> {
    RolloutSpec::new(sys, costs, config.grid, config.mode, adversary, config.initial_state.clone())
}
