//! Two-layer LSTM value-gradient predictor and the Adam optimizer.

use crate::autodiff::{self, Graph};
use crate::tensor::Matrix;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NeuralError {
    #[error("non-finite gradient in parameter `{name}`")]
    NonFiniteGradient { name: String },
    #[error("parameter/gradient count mismatch: {params} parameters, {grads} gradients")]
    CountMismatch { params: usize, grads: usize },
    #[error("shape mismatch for `{name}`: parameter {param:?}, gradient {grad:?}")]
    ShapeMismatch {
        name: String,
        param: (usize, usize),
        grad: (usize, usize),
    },
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
}

/// Uniform Glorot initialisation on `[-√(6/(rows+cols)), √(6/(rows+cols))]`.
pub fn xavier_init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    assert!(rows >= 1 && cols >= 1, "xavier_init needs a non-empty shape");
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Weights of one LSTM layer. Rows of `w`, `u` and `b` are split into four
/// blocks of `hidden` rows: input gate, forget gate, cell candidate, output
/// gate.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerParams {
    pub w: Matrix,
    pub u: Matrix,
    pub b: Matrix,
}

impl LstmLayerParams {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, forget_bias: f64, rng: &mut R) -> Self {
        let w = xavier_init(4 * hidden, input, rng);
        let u = xavier_init(4 * hidden, hidden, rng);
        let mut b = Matrix::zeros(4 * hidden, 1);
        for r in hidden..2 * hidden {
            b[(r, 0)] = forget_bias;
        }
        Self { w, u, b }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w: Matrix::zeros(4 * hidden, input),
            u: Matrix::zeros(4 * hidden, hidden),
            b: Matrix::zeros(4 * hidden, 1),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.cols()
    }

    pub fn input(&self) -> usize {
        self.w.cols()
    }

    fn check(&self) -> bool {
        let h = self.hidden();
        self.w.rows() == 4 * h && self.u.rows() == 4 * h && self.b.shape() == (4 * h, 1)
    }
}

/// The full predictor: two stacked LSTM layers and an affine read-out to
/// the value-gradient estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub layer1: LstmLayerParams,
    pub layer2: LstmLayerParams,
    pub out_w: Matrix,
    pub out_b: Matrix,
}

/// Names of the tensors returned by [`NetParams::tensors`], in order.
pub const NET_TENSOR_NAMES: [&str; 8] = [
    "layer1.w", "layer1.u", "layer1.b", "layer2.w", "layer2.u", "layer2.b", "out.w", "out.b",
];

impl NetParams {
    pub fn init<R: Rng + ?Sized>(
        input: usize,
        hidden1: usize,
        hidden2: usize,
        output: usize,
        forget_bias: f64,
        rng: &mut R,
    ) -> Self {
        let layer1 = LstmLayerParams::init(input, hidden1, forget_bias, rng);
        let layer2 = LstmLayerParams::init(hidden1, hidden2, forget_bias, rng);
        let out_w = xavier_init(output, hidden2, rng);
        Self {
            layer1,
            layer2,
            out_w,
            out_b: Matrix::zeros(output, 1),
        }
    }

    pub fn zeros(input: usize, hidden1: usize, hidden2: usize, output: usize) -> Self {
        Self {
            layer1: LstmLayerParams::zeros(input, hidden1),
            layer2: LstmLayerParams::zeros(hidden1, hidden2),
            out_w: Matrix::zeros(output, hidden2),
            out_b: Matrix::zeros(output, 1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer1.input()
    }

    pub fn output_dim(&self) -> usize {
        self.out_w.rows()
    }

    /// Layer sizes chain together and the read-out matches layer 2.
    pub fn is_consistent(&self) -> bool {
        self.layer1.check()
            && self.layer2.check()
            && self.layer2.input() == self.layer1.hidden()
            && self.out_w.cols() == self.layer2.hidden()
            && self.out_b.shape() == (self.out_w.rows(), 1)
    }

    pub fn tensors(&self) -> [&Matrix; 8] {
        [
            &self.layer1.w,
            &self.layer1.u,
            &self.layer1.b,
            &self.layer2.w,
            &self.layer2.u,
            &self.layer2.b,
            &self.out_w,
            &self.out_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 8] {
        [
            &mut self.layer1.w,
            &mut self.layer1.u,
            &mut self.layer1.b,
            &mut self.layer2.w,
            &mut self.layer2.u,
            &mut self.layer2.b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.sum_of_squares()).sum()
    }

    /// Places every tensor on `g`, as differentiable leaves when
    /// `trainable` is set.
    pub fn register<G: Graph>(&self, g: &mut G, trainable: bool) -> NetNodes<G::Node> {
        let mut put = |m: &Matrix| {
            if trainable {
                g.param(m.clone())
            } else {
                g.constant(m.clone())
            }
        };
        let layer = |l: &LstmLayerParams, put: &mut dyn FnMut(&Matrix) -> G::Node| LayerNodes {
            w: put(&l.w),
            u: put(&l.u),
            b: put(&l.b),
            hidden: l.hidden(),
        };
        let layer1 = layer(&self.layer1, &mut put);
        let layer2 = layer(&self.layer2, &mut put);
        NetNodes {
            layer1,
            layer2,
            out_w: put(&self.out_w),
            out_b: put(&self.out_b),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNodes<N> {
    pub w: N,
    pub u: N,
    pub b: N,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct NetNodes<N> {
    pub layer1: LayerNodes<N>,
    pub layer2: LayerNodes<N>,
    pub out_w: N,
    pub out_b: N,
}

impl<N: Clone> NetNodes<N> {
    pub fn tensors(&self) -> [&N; 8] {
        [
            &self.layer1.w,
            &self.layer1.u,
            &self.layer1.b,
            &self.layer2.w,
            &self.layer2.u,
            &self.layer2.b,
            &self.out_w,
            &self.out_b,
        ]
    }
}

/// Hidden and cell states of both layers for a batch (one column per
/// sample).
#[derive(Debug, Clone)]
pub struct StackState<N> {
    pub h1: N,
    pub c1: N,
    pub h2: N,
    pub c2: N,
}

impl<N: Clone> StackState<N> {
    pub fn zeros<G: Graph<Node = N>>(g: &mut G, net: &NetNodes<N>, batch: usize) -> Self {
        Self {
            h1: g.constant(Matrix::zeros(net.layer1.hidden, batch)),
            c1: g.constant(Matrix::zeros(net.layer1.hidden, batch)),
            h2: g.constant(Matrix::zeros(net.layer2.hidden, batch)),
            c2: g.constant(Matrix::zeros(net.layer2.hidden, batch)),
        }
    }
}

/// One LSTM cell step for a batch.
///
/// `ones` is a 1×batch row of ones used to spread the bias over columns.
pub fn lstm_cell_forward<G: Graph>(
    g: &mut G,
    layer: &LayerNodes<G::Node>,
    x: &G::Node,
    h_prev: &G::Node,
    c_prev: &G::Node,
    ones: &G::Node,
) -> autodiff::Result<(G::Node, G::Node)> {
    let h = layer.hidden;
    let wx = g.matmul(&layer.w, x)?;
    let uh = g.matmul(&layer.u, h_prev)?;
    let bias = g.matmul(&layer.b, ones)?;
    let pre = g.add(&wx, &uh)?;
    let pre = g.add(&pre, &bias)?;
    let i_pre = g.slice_rows(&pre, 0, h)?;
    let f_pre = g.slice_rows(&pre, h, h)?;
    let g_pre = g.slice_rows(&pre, 2 * h, h)?;
    let o_pre = g.slice_rows(&pre, 3 * h, h)?;
    let i = g.sigmoid(&i_pre)?;
    let f = g.sigmoid(&f_pre)?;
    let cand = g.tanh(&g_pre)?;
    let o = g.sigmoid(&o_pre)?;
    let keep = g.mul(&f, c_prev)?;
    let write = g.mul(&i, &cand)?;
    let c = g.add(&keep, &write)?;
    let tc = g.tanh(&c)?;
    let h_new = g.mul(&o, &tc)?;
    Ok((h_new, c))
}

/// Runs both layers and the read-out on a batch of states `x` (input_dim ×
/// batch), returning the prediction (output_dim × batch) and the new state.
pub fn lstm_stack_forward<G: Graph>(
    g: &mut G,
    net: &NetNodes<G::Node>,
    x: &G::Node,
    state: &StackState<G::Node>,
    ones: &G::Node,
) -> autodiff::Result<(G::Node, StackState<G::Node>)> {
    let (h1, c1) = lstm_cell_forward(g, &net.layer1, x, &state.h1, &state.c1, ones)?;
    let (h2, c2) = lstm_cell_forward(g, &net.layer2, &h1, &state.h2, &state.c2, ones)?;
    let lin = g.matmul(&net.out_w, &h2)?;
    let bias = g.matmul(&net.out_b, ones)?;
    let z = g.add(&lin, &bias)?;
    Ok((z, StackState { h1, c1, h2, c2 }))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-tensor first and second moments plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        Self {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected Adam update. Nothing is modified when any gradient
    /// is non-finite.
    pub fn step(
        &mut self,
        params: &mut [&mut Matrix],
        grads: &[Matrix],
        names: &[&str],
    ) -> Result<(), NeuralError> {
        self.step_scaled(params, grads, names, &[])
    }

    /// Like [`step`](Self::step) with the learning rate of tensor `k`
    /// multiplied by `lr_scale[k]` (1 where missing).
    pub fn step_scaled(
        &mut self,
        params: &mut [&mut Matrix],
        grads: &[Matrix],
        names: &[&str],
        lr_scale: &[f64],
    ) -> Result<(), NeuralError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(NeuralError::CountMismatch {
                params: params.len(),
                grads: grads.len(),
            });
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(k).copied().unwrap_or("?");
            if p.shape() != g.shape() || self.m[k].shape() != g.shape() {
                return Err(NeuralError::ShapeMismatch {
                    name: name.to_string(),
                    param: p.shape(),
                    grad: g.shape(),
                });
            }
            if !g.is_finite() {
                return Err(NeuralError::NonFiniteGradient {
                    name: name.to_string(),
                });
            }
        }
        self.t += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let lr = learning_rate * lr_scale.get(k).copied().unwrap_or(1.0);
            let g = grads[k].as_slice();
            let m = self.m[k].as_mut_slice();
            let v = self.v[k].as_mut_slice();
            for (((pi, &gi), mi), vi) in p.as_mut_slice().iter_mut().zip(g).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{tape_gradient_check, Eager, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn xavier_single_entry_bound() {
        let m = xavier_init(1, 1, &mut rng(1));
        assert!(m.item().abs() <= 3f64.sqrt());
    }

    #[test]
    fn xavier_variance() {
        let m = xavier_init(100, 100, &mut rng(7));
        let n = m.len() as f64;
        let mean = m.sum() / n;
        let var = m.as_slice().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 0.01).abs() < 0.2 * 0.01, "variance {var}");
    }

    #[test]
    fn xavier_deterministic() {
        assert_eq!(xavier_init(5, 3, &mut rng(3)), xavier_init(5, 3, &mut rng(3)));
    }

    fn run_cell(params: &LstmLayerParams, x: &[f64], h: &[f64], c: &[f64]) -> (Matrix, Matrix) {
        let mut g = Eager;
        let l = LayerNodes {
            w: params.w.clone(),
            u: params.u.clone(),
            b: params.b.clone(),
            hidden: params.hidden(),
        };
        let ones = Matrix::scalar(1.0);
        lstm_cell_forward(
            &mut g,
            &l,
            &Matrix::column(x),
            &Matrix::column(h),
            &Matrix::column(c),
            &ones,
        )
        .unwrap()
    }

    #[test]
    fn zero_cell_stays_zero() {
        let p = LstmLayerParams::zeros(3, 4);
        let (h, c) = run_cell(&p, &[1.0, -2.0, 0.5], &[0.0; 4], &[0.0; 4]);
        assert_eq!(h.max_abs(), 0.0);
        assert_eq!(c.max_abs(), 0.0);
    }

    #[test]
    fn zero_weight_cell_halves_memory() {
        let p = LstmLayerParams::zeros(1, 1);
        let (h, c) = run_cell(&p, &[0.7], &[0.3], &[2.0]);
        assert!((c.item() - 1.0).abs() < 1e-15);
        assert!((h.item() - 0.5 * 1f64.tanh()).abs() < 1e-15);
        assert!((h.item() - 0.380797).abs() < 1e-6);
    }

    #[test]
    fn cell_dimension_mismatch_is_rejected() {
        let p = LstmLayerParams::zeros(2, 3);
        let mut g = Eager;
        let l = LayerNodes {
            w: p.w.clone(),
            u: p.u.clone(),
            b: p.b.clone(),
            hidden: 3,
        };
        let ones = Matrix::scalar(1.0);
        let r = lstm_cell_forward(
            &mut g,
            &l,
            &Matrix::column(&[1.0, 2.0, 3.0]),
            &Matrix::zeros(3, 1),
            &Matrix::zeros(3, 1),
            &ones,
        );
        assert!(r.is_err());
    }

    #[test]
    fn stack_output_bias_passthrough() {
        let mut net = NetParams::zeros(2, 3, 3, 2);
        let mut g = Eager;
        let nodes = net.register(&mut g, false);
        let ones = Matrix::row(&[1.0, 1.0]);
        let state = StackState::zeros(&mut g, &nodes, 2);
        let x = Matrix::from_rows(&[&[0.5, -1.0], &[2.0, 3.0]]);
        let (z, _) = lstm_stack_forward(&mut g, &nodes, &x, &state, &ones).unwrap();
        assert_eq!(z.max_abs(), 0.0);

        net.out_b = Matrix::column(&[1.0, 2.0]);
        let nodes = net.register(&mut g, false);
        let (z, _) = lstm_stack_forward(&mut g, &nodes, &x, &state, &ones).unwrap();
        assert_eq!(z.col(0), vec![1.0, 2.0]);
        assert_eq!(z.col(1), vec![1.0, 2.0]);
    }

    /// Straight-line re-evaluation of the cell with scalar loops.
    fn reference_cell(p: &LstmLayerParams, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hs = p.hidden();
        let pre: Vec<f64> = (0..4 * hs)
            .map(|r| {
                let mut s = p.b[(r, 0)];
                for (k, xk) in x.iter().enumerate() {
                    s += p.w[(r, k)] * xk;
                }
                for (k, hk) in h.iter().enumerate() {
                    s += p.u[(r, k)] * hk;
                }
                s
            })
            .collect();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h_new = vec![0.0; hs];
        let mut c_new = vec![0.0; hs];
        for j in 0..hs {
            let i = sig(pre[j]);
            let f = sig(pre[hs + j]);
            let gg = pre[2 * hs + j].tanh();
            let o = sig(pre[3 * hs + j]);
            c_new[j] = f * c[j] + i * gg;
            h_new[j] = o * c_new[j].tanh();
        }
        (h_new, c_new)
    }

    #[test]
    fn stack_matches_hand_trace() {
        let net = NetParams::init(2, 4, 3, 2, 1.0, &mut rng(11));
        let xs = [[0.3, -0.7], [1.1, 0.2], [-0.4, 0.9]];
        let mut g = Eager;
        let nodes = net.register(&mut g, false);
        let ones = Matrix::scalar(1.0);
        let mut state = StackState::zeros(&mut g, &nodes, 1);
        let (mut h1, mut c1) = (vec![0.0; 4], vec![0.0; 4]);
        let (mut h2, mut c2) = (vec![0.0; 3], vec![0.0; 3]);
        for x in xs {
            let (z, next) =
                lstm_stack_forward(&mut g, &nodes, &Matrix::column(&x), &state, &ones).unwrap();
            state = next;
            (h1, c1) = reference_cell(&net.layer1, &x, &h1, &c1);
            (h2, c2) = reference_cell(&net.layer2, &h1, &h2, &c2);
            for r in 0..2 {
                let mut expect = net.out_b[(r, 0)];
                for k in 0..3 {
                    expect += net.out_w[(r, k)] * h2[k];
                }
                assert!((z[(r, 0)] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn hidden_state_depends_only_on_prefix() {
        let net = NetParams::init(2, 5, 5, 1, 1.0, &mut rng(2));
        let mut g = Eager;
        let nodes = net.register(&mut g, false);
        let ones = Matrix::scalar(1.0);
        let run = |xs: &[[f64; 2]]| {
            let mut g = Eager;
            let mut state = StackState::zeros(&mut g, &nodes, 1);
            let mut zs = Vec::new();
            for x in xs {
                let (z, s) =
                    lstm_stack_forward(&mut g, &nodes, &Matrix::column(x), &state, &ones).unwrap();
                state = s;
                zs.push(z.item());
            }
            zs
        };
        let full = run(&[[0.1, 0.2], [0.3, -0.1], [1.0, 2.0], [-3.0, 0.5]]);
        let prefix = run(&[[0.1, 0.2], [0.3, -0.1]]);
        assert_eq!(&full[..2], &prefix[..]);
        let _ = g;
    }

    #[test]
    fn stack_gradients_match_finite_differences() {
        let net = NetParams::init(2, 3, 3, 2, 1.0, &mut rng(5));
        let xs = [[0.4, -0.2], [0.9, 0.1], [-0.3, 0.6]];
        for which in 0..8 {
            let point = net.tensors()[which].clone();
            let err = tape_gradient_check(
                |t: &mut Tape, p| {
                    let mut nodes = net.register(t, false);
                    match which {
                        0 => nodes.layer1.w = p,
                        1 => nodes.layer1.u = p,
                        2 => nodes.layer1.b = p,
                        3 => nodes.layer2.w = p,
                        4 => nodes.layer2.u = p,
                        5 => nodes.layer2.b = p,
                        6 => nodes.out_w = p,
                        _ => nodes.out_b = p,
                    }
                    let ones = t.constant(Matrix::scalar(1.0));
                    let mut state = StackState::zeros(t, &nodes, 1);
                    let mut total = None;
                    for x in &xs {
                        let xv = t.constant(Matrix::column(x));
                        let (z, s) = lstm_stack_forward(t, &nodes, &xv, &state, &ones)?;
                        state = s;
                        let sq = t.sum_squares(&z)?;
                        total = Some(match total {
                            None => sq,
                            Some(acc) => t.add(&acc, &sq)?,
                        });
                    }
                    Ok(total.unwrap())
                },
                &point,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "{}: {err}", NET_TENSOR_NAMES[which]);
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = Matrix::row(&[1.0, -2.0]);
        let mut s = AdamState::new(AdamConfig::default(), &[(1, 2)]);
        s.step(&mut [&mut p], &[Matrix::zeros(1, 2)], &["p"]).unwrap();
        assert_eq!(p.as_slice(), &[1.0, -2.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn adam_first_step_hand_value() {
        let mut p = Matrix::scalar(0.0);
        let mut s = AdamState::new(AdamConfig::default(), &[(1, 1)]);
        s.step(&mut [&mut p], &[Matrix::scalar(1.0)], &["p"]).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction.
        let expect = -0.001 / (1.0 + 1e-8);
        assert!((p.item() - expect).abs() < 1e-15, "{}", p.item());
    }

    #[test]
    fn adam_zero_rate_is_identity() {
        let cfg = AdamConfig {
            learning_rate: 0.0,
            ..AdamConfig::default()
        };
        let mut p = Matrix::row(&[0.5, 0.25]);
        let mut s = AdamState::new(cfg, &[(1, 2)]);
        for _ in 0..5 {
            s.step(&mut [&mut p], &[Matrix::row(&[3.0, -1.0])], &["p"]).unwrap();
        }
        assert_eq!(p.as_slice(), &[0.5, 0.25]);
    }

    #[test]
    fn adam_rejects_non_finite_without_mutation() {
        let mut p = Matrix::row(&[1.0, 2.0]);
        let mut s = AdamState::new(AdamConfig::default(), &[(1, 2)]);
        let err = s
            .step(&mut [&mut p], &[Matrix::row(&[f64::NAN, 0.0])], &["layer1.w"])
            .unwrap_err();
        assert_eq!(
            err,
            NeuralError::NonFiniteGradient {
                name: "layer1.w".into()
            }
        );
        assert_eq!(s.t, 0);
        assert_eq!(p.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = Matrix::row(&[0.1, 0.2, 0.3]);
            let mut s = AdamState::new(AdamConfig::default(), &[(1, 3)]);
            for k in 0..10 {
                let g = Matrix::row(&[k as f64, -1.0, 0.5]);
                s.step(&mut [&mut p], &[g], &["p"]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
