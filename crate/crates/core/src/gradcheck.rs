//! Central-difference audit of the reverse-mode gradients.

use crate::autodiff::{tape_gradient_check, AutodiffError, Graph, Tape, Var};
use crate::fbsde::{
    rollout_graph, training_loss, weight_norm_squared, FbsdeError, HorizonGrid, Mode,
    NetPredictor, Policy, PolicyNodes, RolloutSpec,
};
use crate::neural::{lstm_cell_forward, NetParams};
use crate::noise::NoiseSource;
use crate::systems::{CostSpec, SystemModel};
use crate::tensor::Matrix;
use crate::training::tensor_names;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const GRADCHECK_SCHEMA: &str = "minmax-fbsde/grad-check/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub schema: String,
    pub fd_step: f64,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
    pub max_relative_error: f64,
    pub passed: bool,
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// `Σ w ⊙ out` with fixed random weights, so every output entry matters.
fn scalarize(t: &mut Tape, out: &Var, seed: u64) -> Result<Var, AutodiffError> {
    let (r, c) = out.shape();
    let w = t.constant(random(r, c, &mut ChaCha8Rng::seed_from_u64(seed)));
    let prod = t.mul(out, &w)?;
    t.sum(&prod)
}

type Build = Box<dyn Fn(&mut Tape, Var) -> Result<Var, AutodiffError>>;

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Matrix, Build)> {
    let other = random(3, 2, rng);
    let right = random(2, 4, rng);
    let left = random(4, 3, rng);
    let point = random(3, 2, rng);
    let o1 = other.clone();
    let o2 = other.clone();
    let o3 = other.clone();
    let cases: Vec<(&'static str, Build)> = vec![
        (
            "matmul(x, B)",
            Box::new(move |t, x| {
                let b = t.constant(right.clone());
                let y = t.matmul(&x, &b)?;
                scalarize(t, &y, 1)
            }),
        ),
        (
            "matmul(A, x)",
            Box::new(move |t, x| {
                let a = t.constant(left.clone());
                let y = t.matmul(&a, &x)?;
                scalarize(t, &y, 2)
            }),
        ),
        (
            "add",
            Box::new(move |t, x| {
                let o = t.constant(o1.clone());
                let y = t.add(&x, &o)?;
                let y = t.mul(&y, &y)?;
                scalarize(t, &y, 3)
            }),
        ),
        (
            "sub",
            Box::new(move |t, x| {
                let o = t.constant(o2.clone());
                let y = t.sub(&o, &x)?;
                let y = t.mul(&y, &y)?;
                scalarize(t, &y, 4)
            }),
        ),
        (
            "mul",
            Box::new(move |t, x| {
                let o = t.constant(o3.clone());
                let y = t.mul(&x, &o)?;
                let y = t.mul(&y, &x)?;
                scalarize(t, &y, 5)
            }),
        ),
        (
            "scale",
            Box::new(|t, x| {
                let y = t.scale(&x, -2.5)?;
                scalarize(t, &y, 6)
            }),
        ),
        (
            "tanh",
            Box::new(|t, x| {
                let y = t.tanh(&x)?;
                scalarize(t, &y, 7)
            }),
        ),
        (
            "sigmoid",
            Box::new(|t, x| {
                let y = t.sigmoid(&x)?;
                scalarize(t, &y, 8)
            }),
        ),
        (
            "sin",
            Box::new(|t, x| {
                let y = t.sin(&x)?;
                scalarize(t, &y, 9)
            }),
        ),
        (
            "cos",
            Box::new(|t, x| {
                let y = t.cos(&x)?;
                scalarize(t, &y, 10)
            }),
        ),
        (
            "sum",
            Box::new(|t, x| {
                let y = t.mul(&x, &x)?;
                t.sum(&y)
            }),
        ),
        ("sum_squares", Box::new(|t, x| t.sum_squares(&x))),
        (
            "concat_rows",
            Box::new(|t, x| {
                let y = t.tanh(&x)?;
                let y = t.concat_rows(&[&x, &y])?;
                scalarize(t, &y, 11)
            }),
        ),
        (
            "slice_rows",
            Box::new(|t, x| {
                let y = t.slice_rows(&x, 1, 2)?;
                scalarize(t, &y, 12)
            }),
        ),
    ];
    cases.into_iter().map(|(n, b)| (n, point.clone(), b)).collect()
}

fn set_tensor(nodes: &mut PolicyNodes<Var>, which: usize, p: Var) {
    let net = &mut nodes.net;
    match which {
        0 => net.layer1.w = p,
        1 => net.layer1.u = p,
        2 => net.layer1.b = p,
        3 => net.layer2.w = p,
        4 => net.layer2.u = p,
        5 => net.layer2.b = p,
        6 => net.out_w = p,
        7 => net.out_b = p,
        8 => nodes.y0 = p,
        _ => nodes.z0 = p,
    }
}

fn policy_tensor(policy: &Policy, which: usize) -> Matrix {
    match which {
        0..=7 => policy.net.tensors()[which].clone(),
        8 => Matrix::scalar(policy.y0),
        _ => Matrix::column(&policy.z0),
    }
}

/// Training loss of a short rollout checked against every trainable tensor.
pub fn rollout_loss_check(
    sys: &SystemModel,
    costs: &CostSpec,
    initial_state: Vec<f64>,
    policy: &Policy,
    steps: usize,
    samples: usize,
    fd_step: f64,
) -> Result<Vec<(String, f64)>, FbsdeError> {
    let grid = HorizonGrid::with_dt(0.0, steps as f64 * 0.02, 0.02)?;
    let spec = RolloutSpec::new(sys, costs, grid, Mode::Minmax, true, initial_state)?;
    let noise = NoiseSource::Seeded { seed: 11, stream: 0 }.block(0..samples, steps, sys.noise_dim());
    let mut out = Vec::new();
    for (which, name) in tensor_names().iter().enumerate() {
        let err = tape_gradient_check(
            |t: &mut Tape, p| {
                let mut nodes = policy.register(t, false);
                set_tensor(&mut nodes, which, p);
                let theta = weight_norm_squared(t, &nodes.net)?;
                let mut pred = NetPredictor::new(nodes);
                let r = rollout_graph(t, &spec, &mut pred, &noise, samples, false)
                    .map_err(|e| match e {
                        FbsdeError::Autodiff(a) => a,
                        other => panic!("rollout failed: {other}"),
                    })?;
                training_loss(t, &r.y_target, &r.y_final, &theta, costs.beta, costs.lambda)
            },
            &policy_tensor(policy, which),
            fd_step,
        )?;
        out.push((name.to_string(), err));
    }
    Ok(out)
}

/// Runs the full audit: every primitive, one LSTM step and a short
/// rollout loss.
pub fn audit(
    sys: &SystemModel,
    costs: &CostSpec,
    initial_state: Vec<f64>,
    steps: usize,
    samples: usize,
    fd_step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, FbsdeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut raw: Vec<(String, f64)> = Vec::new();
    for (name, point, build) in primitive_cases(&mut rng) {
        let err = tape_gradient_check(|t, x| build(t, x), &point, fd_step)?;
        raw.push((format!("primitive/{name}"), err));
    }

    let net = NetParams::init(3, 4, 4, 2, 1.0, &mut rng);
    let x = random(3, 2, &mut rng);
    let h = random(4, 2, &mut rng);
    let c = random(4, 2, &mut rng);
    for (k, name) in ["w", "u", "b"].iter().enumerate() {
        let layer = &net.layer1;
        let point = [&layer.w, &layer.u, &layer.b][k].clone();
        let err = tape_gradient_check(
            |t: &mut Tape, p| {
                let mut nodes = net.register(t, false).layer1;
                match k {
                    0 => nodes.w = p,
                    1 => nodes.u = p,
                    _ => nodes.b = p,
                }
                let (xv, hv, cv) = (t.constant(x.clone()), t.constant(h.clone()), t.constant(c.clone()));
                let ones = t.constant(Matrix::filled(1, 2, 1.0));
                let (h1, c1) = lstm_cell_forward(t, &nodes, &xv, &hv, &cv, &ones)?;
                let both = t.concat_rows(&[&h1, &c1])?;
                scalarize(t, &both, 13)
            },
            &point,
            fd_step,
        )?;
        raw.push((format!("lstm_step/{name}"), err));
    }

    let policy = Policy {
        net: NetParams::init(sys.state_dim(), 4, 4, sys.noise_dim(), 1.0, &mut rng),
        y0: 0.3,
        z0: (0..sys.noise_dim()).map(|_| rng.random_range(-0.5..0.5)).collect(),
    };
    for (name, err) in rollout_loss_check(sys, costs, initial_state, &policy, steps, samples, fd_step)? {
        raw.push((format!("rollout_loss/{name}"), err));
    }

    let entries: Vec<GradCheckEntry> = raw
        .into_iter()
        .map(|(name, err)| GradCheckEntry {
            name,
            max_relative_error: err,
            passed: err < tolerance,
        })
        .collect();
    let max = entries.iter().map(|e| e.max_relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        schema: GRADCHECK_SCHEMA.into(),
        fd_step,
        tolerance,
        passed: entries.iter().all(|e| e.passed),
        max_relative_error: max,
        entries,
    })
}
