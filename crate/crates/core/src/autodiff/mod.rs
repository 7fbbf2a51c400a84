//! A small reverse-mode differentiation engine over dense matrices.
//!
//! Only the operations needed by the hashing networks and their losses are
//! provided. Every operation records enough state on the [`Tape`] to compute
//! its vector-Jacobian product during [`Tape::backward`].

mod gradcheck;
mod tape;

pub use gradcheck::{
    analytic_gradients, finite_difference_check, max_relative_error, numeric_gradients,
};
pub use tape::{Activation, Gradients, Tape, Var};

use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;

/// Whether layers run with batch statistics (and record gradients) or with frozen statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor with its gradient accumulator and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
    pub adam_m: Matrix,
    pub adam_v: Matrix,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let (r, c) = value.shape();
        Self {
            value,
            grad: Matrix::zeros(r, c),
            adam_m: Matrix::zeros(r, c),
            adam_v: Matrix::zeros(r, c),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Adds the gradient recorded for `var` (if any) into `self.grad`.
    pub fn accumulate(&mut self, grads: &Gradients, var: Var) {
        if let Some(g) = grads.get(var) {
            self.grad.add_scaled(g, 1.0);
        }
    }
}

/// Batch normalization parameters and running statistics for one hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    pub mode: Mode,
}

impl BatchNormState {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPSILON: f64 = 1e-5;

    pub fn new(width: usize) -> Self {
        Self {
            gamma: Param::new(Matrix::filled(1, width, 1.0)),
            beta: Param::new(Matrix::zeros(1, width)),
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: Self::DEFAULT_MOMENTUM,
            epsilon: Self::DEFAULT_EPSILON,
            mode: Mode::Train,
        }
    }

    pub fn width(&self) -> usize {
        self.running_mean.len()
    }
}
