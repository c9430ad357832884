//! Reverse-mode automatic differentiation over dense matrices.
//!
//! The primitive set is closed: every differentiable computation in the
//! solver (the recurrent network, the dynamics, the FBSDE updates and the
//! loss) is expressed through [`Primitive`]. Computations are written once
//! against the [`Graph`] trait and run either on a recording [`Tape`]
//! (training, gradient audits) or on [`Eager`] (evaluation, no history kept).
//!
//! ```
//! use minmax_fbsde::autodiff::{Graph, Tape};
//! use minmax_fbsde::tensor::Matrix;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Matrix::scalar(3.0));
//! let y = tape.sum_squares(&x).unwrap();
//! let grads = tape.backward(&y).unwrap();
//! assert_eq!(grads.get(&x).unwrap().item(), 6.0);
//! ```

use crate::tensor::Matrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{primitive}: incompatible shapes {shapes:?}")]
    Shape {
        primitive: &'static str,
        shapes: Vec<(usize, usize)>,
    },
    #[error("{primitive}: expected {expected} inputs, got {got}")]
    Arity {
        primitive: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("backward requires a 1x1 output, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("non-finite function value {value} when perturbing coordinate {coordinate}")]
    NonFinite { coordinate: usize, value: f64 },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// The closed set of differentiable operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    /// Element-wise product.
    Mul,
    /// Multiplication by a fixed real.
    Scale(f64),
    Tanh,
    Sigmoid,
    Sin,
    Cos,
    /// Sum of all entries, giving 1×1.
    Sum,
    /// Sum of squared entries, giving 1×1.
    SumSquares,
    /// Vertical stacking of any number of inputs with equal column counts.
    ConcatRows,
    SliceRows { start: usize, len: usize },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Sin => "sin",
            Primitive::Cos => "cos",
            Primitive::Sum => "sum",
            Primitive::SumSquares => "sum_squares",
            Primitive::ConcatRows => "concat_rows",
            Primitive::SliceRows { .. } => "slice_rows",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::MatMul | Primitive::Add | Primitive::Sub | Primitive::Mul => Some(2),
            Primitive::ConcatRows => None,
            _ => Some(1),
        }
    }

    /// Output shape for the given input shapes, or a diagnostic naming the
    /// primitive and the offending shapes.
    pub fn output_shape(&self, shapes: &[(usize, usize)]) -> Result<(usize, usize)> {
        if let Some(n) = self.arity() {
            if shapes.len() != n {
                return Err(AutodiffError::Arity {
                    primitive: self.name(),
                    expected: n,
                    got: shapes.len(),
                });
            }
        } else if shapes.is_empty() {
            return Err(AutodiffError::Arity {
                primitive: self.name(),
                expected: 1,
                got: 0,
            });
        }
        let bad = || AutodiffError::Shape {
            primitive: self.name(),
            shapes: shapes.to_vec(),
        };
        match *self {
            Primitive::MatMul => {
                let ((r, k), (k2, c)) = (shapes[0], shapes[1]);
                if k != k2 {
                    return Err(bad());
                }
                Ok((r, c))
            }
            Primitive::Add | Primitive::Sub | Primitive::Mul => {
                if shapes[0] != shapes[1] {
                    return Err(bad());
                }
                Ok(shapes[0])
            }
            Primitive::Scale(_)
            | Primitive::Tanh
            | Primitive::Sigmoid
            | Primitive::Sin
            | Primitive::Cos => Ok(shapes[0]),
            Primitive::Sum | Primitive::SumSquares => Ok((1, 1)),
            Primitive::ConcatRows => {
                let cols = shapes[0].1;
                if shapes.iter().any(|s| s.1 != cols) {
                    return Err(bad());
                }
                Ok((shapes.iter().map(|s| s.0).sum(), cols))
            }
            Primitive::SliceRows { start, len } => {
                if start + len > shapes[0].0 || len == 0 {
                    return Err(bad());
                }
                Ok((len, shapes[0].1))
            }
        }
    }

    /// Forward evaluation. Shapes must already be validated.
    fn forward(&self, inputs: &[&Matrix]) -> Matrix {
        match *self {
            Primitive::MatMul => inputs[0].matmul(inputs[1]),
            Primitive::Add => inputs[0].zip_map(inputs[1], |a, b| a + b),
            Primitive::Sub => inputs[0].zip_map(inputs[1], |a, b| a - b),
            Primitive::Mul => inputs[0].zip_map(inputs[1], |a, b| a * b),
            Primitive::Scale(s) => inputs[0].scale(s),
            Primitive::Tanh => inputs[0].map(f64::tanh),
            Primitive::Sigmoid => inputs[0].map(sigmoid),
            Primitive::Sin => inputs[0].map(f64::sin),
            Primitive::Cos => inputs[0].map(f64::cos),
            Primitive::Sum => Matrix::scalar(inputs[0].sum()),
            Primitive::SumSquares => Matrix::scalar(inputs[0].sum_of_squares()),
            Primitive::ConcatRows => Matrix::concat_rows(inputs),
            Primitive::SliceRows { start, len } => inputs[0].slice_rows(start, len),
        }
    }

    /// Checks shapes then evaluates.
    pub fn evaluate(&self, inputs: &[&Matrix]) -> Result<Matrix> {
        let shapes: Vec<_> = inputs.iter().map(|m| m.shape()).collect();
        self.output_shape(&shapes)?;
        Ok(self.forward(inputs))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Anything that can evaluate primitives: a recording tape or an eager
/// evaluator. Model code is generic over this trait.
pub trait Graph {
    type Node: Clone;

    /// A non-differentiable input (noise draws, fixed matrices).
    fn constant(&mut self, value: Matrix) -> Self::Node;

    /// A differentiable leaf. Eager graphs treat this like a constant.
    fn param(&mut self, value: Matrix) -> Self::Node;

    fn apply(&mut self, op: Primitive, inputs: &[&Self::Node]) -> Result<Self::Node>;

    fn value<'a>(&'a self, node: &'a Self::Node) -> &'a Matrix;

    fn matmul(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    fn add(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::Add, &[a, b])
    }

    fn sub(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::Sub, &[a, b])
    }

    fn mul(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::Mul, &[a, b])
    }

    fn scale(&mut self, a: &Self::Node, s: f64) -> Result<Self::Node> {
        self.apply(Primitive::Scale(s), &[a])
    }

    fn tanh(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::Tanh, &[a])
    }

    fn sigmoid(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::Sigmoid, &[a])
    }

    fn sin(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::Sin, &[a])
    }

    fn cos(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::Cos, &[a])
    }

    fn sum(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::Sum, &[a])
    }

    fn sum_squares(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::SumSquares, &[a])
    }

    fn concat_rows(&mut self, parts: &[&Self::Node]) -> Result<Self::Node> {
        self.apply(Primitive::ConcatRows, parts)
    }

    fn slice_rows(&mut self, a: &Self::Node, start: usize, len: usize) -> Result<Self::Node> {
        self.apply(Primitive::SliceRows { start, len }, &[a])
    }

    /// Row `i` of `a` as a 1×cols node.
    fn row(&mut self, a: &Self::Node, i: usize) -> Result<Self::Node> {
        self.slice_rows(a, i, 1)
    }

    fn shape(&self, node: &Self::Node) -> (usize, usize) {
        self.value(node).shape()
    }
}

/// Handle to a node on a [`Tape`]. Shape is fixed at creation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[derive(Debug, Clone)]
enum NodeOp {
    Leaf,
    Apply { op: Primitive, inputs: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    op: NodeOp,
    value: Matrix,
    requires_grad: bool,
}

/// Append-only record of primitive applications.
///
/// Node ids are assigned in creation order, so every input of node `k` has
/// an id below `k` and the reverse pass is a single backwards sweep.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: NodeOp, value: Matrix, requires_grad: bool) -> Var {
        let (rows, cols) = value.shape();
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var { id, rows, cols }
    }

    /// Records `op` applied to `inputs`.
    pub fn apply_primitive(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        let shapes: Vec<_> = inputs.iter().map(|v| v.shape()).collect();
        op.output_shape(&shapes)?;
        let value = {
            let vals: Vec<&Matrix> = inputs.iter().map(|v| &self.nodes[v.id].value).collect();
            op.forward(&vals)
        };
        let requires_grad = inputs.iter().any(|v| self.nodes[v.id].requires_grad);
        Ok(self.push(
            NodeOp::Apply {
                op,
                inputs: inputs.iter().map(|v| v.id).collect(),
            },
            value,
            requires_grad,
        ))
    }

    /// Reverse pass from a 1×1 output. Every node is visited once, in
    /// descending id order; contributions from fan-out are summed.
    pub fn backward(&self, output: &Var) -> Result<Gradients> {
        if output.shape() != (1, 1) {
            return Err(AutodiffError::NonScalarOutput {
                rows: output.rows,
                cols: output.cols,
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; output.id + 1];
        grads[output.id] = Some(Matrix::scalar(1.0));
        for k in (0..=output.id).rev() {
            let node = &self.nodes[k];
            let NodeOp::Apply { op, inputs } = &node.op else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[k].take() else {
                continue;
            };
            for (slot, &input) in inputs.iter().enumerate() {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                let local = self.input_gradient(*op, inputs, slot, &node.value, &upstream);
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&local),
                    empty => *empty = Some(local),
                }
            }
            // Interior gradients are dropped once propagated; only leaves
            // keep theirs.
        }
        Ok(Gradients { grads })
    }

    fn input_gradient(
        &self,
        op: Primitive,
        inputs: &[usize],
        slot: usize,
        out: &Matrix,
        upstream: &Matrix,
    ) -> Matrix {
        let val = |i: usize| &self.nodes[inputs[i]].value;
        match op {
            Primitive::MatMul => {
                if slot == 0 {
                    upstream.matmul_t(val(1))
                } else {
                    val(0).t_matmul(upstream)
                }
            }
            Primitive::Add => upstream.clone(),
            Primitive::Sub => {
                if slot == 0 {
                    upstream.clone()
                } else {
                    upstream.scale(-1.0)
                }
            }
            Primitive::Mul => upstream.zip_map(val(1 - slot), |g, b| g * b),
            Primitive::Scale(s) => upstream.scale(s),
            Primitive::Tanh => upstream.zip_map(out, |g, y| g * (1.0 - y * y)),
            Primitive::Sigmoid => upstream.zip_map(out, |g, y| g * y * (1.0 - y)),
            Primitive::Sin => upstream.zip_map(val(0), |g, x| g * x.cos()),
            Primitive::Cos => upstream.zip_map(val(0), |g, x| -g * x.sin()),
            Primitive::Sum => {
                let (r, c) = val(0).shape();
                Matrix::filled(r, c, upstream.item())
            }
            Primitive::SumSquares => {
                let g = upstream.item();
                val(0).map(|x| 2.0 * g * x)
            }
            Primitive::ConcatRows => {
                let start: usize = inputs[..slot].iter().map(|&i| self.nodes[i].value.rows()).sum();
                upstream.slice_rows(start, val(slot).rows())
            }
            Primitive::SliceRows { start, len } => {
                let (r, c) = val(0).shape();
                let mut g = Matrix::zeros(r, c);
                g.as_mut_slice()[start * c..(start + len) * c].copy_from_slice(upstream.as_slice());
                g
            }
        }
    }
}

impl Graph for Tape {
    type Node = Var;

    fn constant(&mut self, value: Matrix) -> Var {
        self.push(NodeOp::Leaf, value, false)
    }

    fn param(&mut self, value: Matrix) -> Var {
        self.push(NodeOp::Leaf, value, true)
    }

    fn apply(&mut self, op: Primitive, inputs: &[&Var]) -> Result<Var> {
        let ids: Vec<Var> = inputs.iter().map(|v| **v).collect();
        self.apply_primitive(op, &ids)
    }

    fn value<'a>(&'a self, node: &'a Var) -> &'a Matrix {
        &self.nodes[node.id].value
    }
}

/// Result of a reverse pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient with respect to a leaf; `None` if the output does not depend
    /// on it.
    pub fn get(&self, var: &Var) -> Option<&Matrix> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to a leaf, zero-filled when unreached.
    pub fn get_or_zero(&self, var: &Var) -> Matrix {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(var.rows, var.cols))
    }
}

/// Eager evaluation: primitives are computed and nothing is recorded.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Graph for Eager {
    type Node = Matrix;

    fn constant(&mut self, value: Matrix) -> Matrix {
        value
    }

    fn param(&mut self, value: Matrix) -> Matrix {
        value
    }

    fn apply(&mut self, op: Primitive, inputs: &[&Matrix]) -> Result<Matrix> {
        op.evaluate(inputs)
    }

    fn value<'a>(&'a self, node: &'a Matrix) -> &'a Matrix {
        node
    }
}

/// Compares an analytic gradient with central differences of `f`.
///
/// Returns `max_k |analytic_k − fd_k| / max(1, |fd_k|)`.
pub fn finite_difference_check<F>(
    mut f: F,
    point: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(AutodiffError::BadStep(step));
    }
    assert_eq!(point.len(), analytic.len(), "gradient length mismatch");
    let mut x = point.to_vec();
    let mut worst = 0.0_f64;
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + step;
        let up = f(&x);
        if !up.is_finite() {
            return Err(AutodiffError::NonFinite {
                coordinate: k,
                value: up,
            });
        }
        x[k] = orig - step;
        let down = f(&x);
        if !down.is_finite() {
            return Err(AutodiffError::NonFinite {
                coordinate: k,
                value: down,
            });
        }
        x[k] = orig;
        let fd = (up - down) / (2.0 * step);
        worst = worst.max((analytic[k] - fd).abs() / fd.abs().max(1.0));
    }
    Ok(worst)
}

/// Gradient audit for a scalar function built on a tape from one matrix
/// input: the tape gradient is compared against central differences of the
/// same builder evaluated eagerly.
pub fn tape_gradient_check<F>(build: F, point: &Matrix, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let out = build(&mut tape, x)?;
    let grads = tape.backward(&out)?;
    let analytic = grads.get_or_zero(&x);
    let (rows, cols) = point.shape();
    let mut failure = None;
    let err = finite_difference_check(
        |p| {
            let mut t = Tape::new();
            let x = t.param(Matrix::from_vec(rows, cols, p.to_vec()));
            match build(&mut t, x) {
                Ok(out) => t.value(&out).item(),
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        point.as_slice(),
        analytic.as_slice(),
        step,
    );
    match failure {
        Some(e) => Err(e),
        None => err,
    }
}
