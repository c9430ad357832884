//! Deep min-max FBSDE controller.
//!
//! Risk-sensitive stochastic optimal control of control-affine systems by
//! propagating an importance-sampled forward-backward SDE pair whose value
//! gradient is predicted by a two-layer LSTM, trained end to end through
//! the rollout.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod evaluation;
pub mod exec;
pub mod fbsde;
pub mod gradcheck;
pub mod neural;
pub mod noise;
pub mod systems;
pub mod tensor;
pub mod training;
