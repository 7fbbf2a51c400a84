use crate::autodiff::{BatchNormState, Mode};
use crate::error::{Error, Result};
use crate::matrix::{gemm, Matrix};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

enum Op {
    Leaf,
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    MatMulT {
        a: Var,
        b: Var,
    },
    Act {
        input: Var,
        kind: Activation,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    RowNormalize {
        input: Var,
        norms: Vec<f64>,
    },
    VStack(Vec<Var>),
    Contrastive {
        self_sim: Var,
        cross_sim: Var,
        tau: f64,
        // softmax weights of every denominator term, row-normalized
        w_self: Matrix,
        w_cross: Matrix,
    },
    MeanLog {
        input: Var,
        complement: bool,
        floor: f64,
    },
    SqDistSum {
        input: Var,
        target: Matrix,
    },
    ColSumSq {
        input: Var,
        col_sums: Vec<f64>,
    },
    Add(Var, Var),
    Scale(Var, f64),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients of a scalar with respect to every tape entry that influences it.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros of the given shape when nothing reached it.
    pub fn get_or_zeros(&self, var: Var, shape: (usize, usize)) -> Matrix {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

/// Records a forward computation so that it can be differentiated in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Leaves are both parameters and constants; the caller
    /// decides which gradients to use.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    /// The single entry of a 1x1 value.
    pub fn scalar(&self, var: Var) -> f64 {
        let v = self.value(var);
        debug_assert_eq!(v.shape(), (1, 1));
        v.as_slice()[0]
    }

    /// `input · weight + bias`, with the bias broadcast over rows.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        if x.cols() != w.rows() {
            return Err(Error::dim(
                "linear",
                format!(
                    "input {}x{} vs weight {}x{}",
                    x.rows(),
                    x.cols(),
                    w.rows(),
                    w.cols()
                ),
            ));
        }
        if b.shape() != (1, w.cols()) {
            return Err(Error::dim(
                "linear",
                format!(
                    "bias {}x{} vs weight {}x{}",
                    b.rows(),
                    b.cols(),
                    w.rows(),
                    w.cols()
                ),
            ));
        }
        let mut out = Matrix::zeros(x.rows(), w.cols());
        for r in 0..out.rows() {
            out.row_mut(r).copy_from_slice(b.as_slice());
        }
        gemm(1.0, x, false, w, false, 1.0, &mut out);
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::dim(
                "matmul_t",
                format!("{} columns vs {} columns", av.cols(), bv.cols()),
            ));
        }
        let mut out = Matrix::zeros(av.rows(), bv.rows());
        gemm(1.0, av, false, bv, true, 0.0, &mut out);
        Ok(self.push(out, Op::MatMulT { a, b }))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let x = self.value(input);
        if !x.is_finite() {
            return Err(Error::NonFinite {
                what: format!("{kind:?} input"),
            });
        }
        let out = match kind {
            Activation::Relu => x.map(|v| v.max(0.0)),
            Activation::Tanh => x.map(|v| v.tanh().clamp(-BELOW_ONE, BELOW_ONE)),
            Activation::Sigmoid => x.map(|v| sigmoid(v).clamp(f64::MIN_POSITIVE, BELOW_ONE)),
        };
        Ok(self.push(out, Op::Act { input, kind }))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Sigmoid)
    }

    /// Batch normalization over rows. `gamma` and `beta` are 1xh tape values;
    /// the running statistics in `state` are read in eval mode and updated in train mode.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
    ) -> Result<Var> {
        let x = self.value(input);
        let (m, h) = x.shape();
        if h != state.width()
            || self.value(gamma).shape() != (1, h)
            || self.value(beta).shape() != (1, h)
        {
            return Err(Error::dim(
                "batchnorm",
                format!("input width {h} vs layer width {}", state.width()),
            ));
        }
        let eps = state.epsilon;
        let (mean, inv_std) = match state.mode {
            Mode::Train => {
                if m < 2 {
                    return Err(Error::DegenerateBatch {
                        op: "batchnorm",
                        rows: m,
                    });
                }
                let mut mean = vec![0.0; h];
                for r in 0..m {
                    for (acc, v) in mean.iter_mut().zip(x.row(r)) {
                        *acc += v;
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                let mut var = vec![0.0; h];
                for r in 0..m {
                    for ((acc, v), mu) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                        *acc += (v - mu) * (v - mu);
                    }
                }
                var.iter_mut().for_each(|v| *v /= m as f64);
                let mom = state.momentum;
                let unbias = m as f64 / (m as f64 - 1.0);
                for c in 0..h {
                    state.running_mean[c] = (1.0 - mom) * state.running_mean[c] + mom * mean[c];
                    state.running_var[c] =
                        (1.0 - mom) * state.running_var[c] + mom * var[c] * unbias;
                }
                let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                (mean, inv_std)
            }
            Mode::Eval => (
                state.running_mean.clone(),
                state
                    .running_var
                    .iter()
                    .map(|v| 1.0 / (v + eps).sqrt())
                    .collect::<Vec<_>>(),
            ),
        };
        let xhat = Matrix::from_fn(m, h, |r, c| (x.get(r, c) - mean[c]) * inv_std[c]);
        let (g, b) = (self.value(gamma), self.value(beta));
        let out = Matrix::from_fn(m, h, |r, c| xhat.get(r, c) * g.get(0, c) + b.get(0, c));
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: state.mode == Mode::Train,
            },
        ))
    }

    /// Scales each row to unit Euclidean norm. Zero rows are rejected.
    pub fn row_l2_normalize(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let mut norms = Vec::with_capacity(x.rows());
        let mut out = x.clone();
        for r in 0..x.rows() {
            let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::DegenerateVector {
                    op: "row_l2_normalize",
                    row: r,
                });
            }
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(self.push(out, Op::RowNormalize { input, norms }))
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Matrix::vstack(&mats)?;
        Ok(self.push(out, Op::VStack(parts.to_vec())))
    }

    /// Mean over anchors `j` of
    /// `-log( e^{cross_jj/τ} / (Σ_{k≠j} e^{self_jk/τ} + Σ_k e^{cross_jk/τ}) )`,
    /// where `self_sim` and `cross_sim` are MxM similarity matrices.
    pub fn contrastive_nll(&mut self, self_sim: Var, cross_sim: Var, tau: f64) -> Result<Var> {
        let (s, c) = (self.value(self_sim), self.value(cross_sim));
        let m = s.rows();
        if s.shape() != (m, m) || c.shape() != (m, m) {
            return Err(Error::dim(
                "contrastive_nll",
                format!(
                    "similarities {}x{} and {}x{} must be square and equal",
                    s.rows(),
                    s.cols(),
                    c.rows(),
                    c.cols()
                ),
            ));
        }
        if !(tau > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        let mut w_self = Matrix::zeros(m, m);
        let mut w_cross = Matrix::zeros(m, m);
        let mut total = 0.0;
        for j in 0..m {
            let mut hi = f64::NEG_INFINITY;
            for k in 0..m {
                if k != j {
                    hi = hi.max(s.get(j, k) / tau);
                }
                hi = hi.max(c.get(j, k) / tau);
            }
            let mut z = 0.0;
            for k in 0..m {
                if k != j {
                    let e = (s.get(j, k) / tau - hi).exp();
                    w_self.set(j, k, e);
                    z += e;
                }
                let e = (c.get(j, k) / tau - hi).exp();
                w_cross.set(j, k, e);
                z += e;
            }
            let log_z = hi + z.ln();
            total += log_z - c.get(j, j) / tau;
            w_self.row_mut(j).iter_mut().for_each(|v| *v /= z);
            w_cross.row_mut(j).iter_mut().for_each(|v| *v /= z);
        }
        let out = Matrix::filled(1, 1, if m == 0 { 0.0 } else { total / m as f64 });
        Ok(self.push(
            out,
            Op::Contrastive {
                self_sim,
                cross_sim,
                tau,
                w_self,
                w_cross,
            },
        ))
    }

    /// Mean of `ln(clamp(p))`, with `p` clamped to `[floor, 1 - floor]`.
    pub fn mean_log(&mut self, input: Var, floor: f64) -> Var {
        self.mean_log_impl(input, false, floor)
    }

    /// Mean of `ln(1 - clamp(p))`, with `p` clamped to `[floor, 1 - floor]`.
    pub fn mean_log_complement(&mut self, input: Var, floor: f64) -> Var {
        self.mean_log_impl(input, true, floor)
    }

    fn mean_log_impl(&mut self, input: Var, complement: bool, floor: f64) -> Var {
        let p = self.value(input);
        let n = p.len().max(1) as f64;
        let sum: f64 = p
            .as_slice()
            .iter()
            .map(|&v| {
                let v = v.clamp(floor, 1.0 - floor);
                if complement {
                    (1.0 - v).ln()
                } else {
                    v.ln()
                }
            })
            .sum();
        self.push(
            Matrix::filled(1, 1, sum / n),
            Op::MeanLog {
                input,
                complement,
                floor,
            },
        )
    }

    /// `Σ (input - target)²` against a constant target.
    pub fn sq_dist_sum(&mut self, input: Var, target: &Matrix) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != target.shape() {
            return Err(Error::dim(
                "sq_dist_sum",
                format!("{:?} vs target {:?}", x.shape(), target.shape()),
            ));
        }
        let s: f64 = x
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(self.push(
            Matrix::filled(1, 1, s),
            Op::SqDistSum {
                input,
                target: target.clone(),
            },
        ))
    }

    /// `Σ_c (Σ_r input_rc)²`: squared norm of the column-sum vector.
    pub fn col_sum_sq(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let mut col_sums = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for (acc, v) in col_sums.iter_mut().zip(x.row(r)) {
                *acc += v;
            }
        }
        let s = col_sums.iter().map(|v| v * v).sum();
        self.push(Matrix::filled(1, 1, s), Op::ColSumSq { input, col_sums })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(
                "add",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = av.clone();
        out.add_scaled(bv, 1.0);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor))
    }

    /// Reverse pass from a 1x1 `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::dim(
                "backward",
                format!("loss must be 1x1, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        for (g, node) in grads.iter().zip(&self.nodes) {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite {
                        what: format!(
                            "gradient of a {}x{} value",
                            node.value.rows(),
                            node.value.cols()
                        ),
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, gy: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let mut gx = Matrix::zeros(x.rows(), x.cols());
                gemm(1.0, gy, false, w, true, 0.0, &mut gx);
                let mut gw = Matrix::zeros(w.rows(), w.cols());
                gemm(1.0, x, true, gy, false, 0.0, &mut gw);
                let mut gb = Matrix::zeros(1, w.cols());
                for r in 0..gy.rows() {
                    for (acc, v) in gb.as_mut_slice().iter_mut().zip(gy.row(r)) {
                        *acc += v;
                    }
                }
                accumulate(grads, *input, gx);
                accumulate(grads, *weight, gw);
                accumulate(grads, *bias, gb);
            }
            Op::MatMulT { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                gemm(1.0, gy, false, bv, false, 0.0, &mut ga);
                let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                gemm(1.0, gy, true, av, false, 0.0, &mut gb);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Act { input, kind } => {
                let y = &node.value;
                let mut gx = gy.clone();
                let (gs, ys) = (gx.as_mut_slice(), y.as_slice());
                match kind {
                    Activation::Relu => gs.iter_mut().zip(ys).for_each(|(g, &y)| {
                        if y <= 0.0 {
                            *g = 0.0;
                        }
                    }),
                    Activation::Tanh => gs.iter_mut().zip(ys).for_each(|(g, &y)| *g *= 1.0 - y * y),
                    Activation::Sigmoid => gs
                        .iter_mut()
                        .zip(ys)
                        .for_each(|(g, &y)| *g *= y * (1.0 - y)),
                }
                accumulate(grads, *input, gx);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (m, h) = xhat.shape();
                let g = self.value(*gamma);
                let mut ggamma = Matrix::zeros(1, h);
                let mut gbeta = Matrix::zeros(1, h);
                for r in 0..m {
                    for c in 0..h {
                        let d = gy.get(r, c);
                        ggamma.as_mut_slice()[c] += d * xhat.get(r, c);
                        gbeta.as_mut_slice()[c] += d;
                    }
                }
                let gx = if *batch_stats {
                    // dx = inv_std/M * (M·dxhat - Σ dxhat - xhat·Σ(dxhat·xhat))
                    let mf = m as f64;
                    Matrix::from_fn(m, h, |r, c| {
                        let gam = g.get(0, c);
                        let sum_d = gbeta.get(0, c) * gam;
                        let sum_dx = ggamma.get(0, c) * gam;
                        inv_std[c] / mf
                            * (mf * gy.get(r, c) * gam - sum_d - xhat.get(r, c) * sum_dx)
                    })
                } else {
                    Matrix::from_fn(m, h, |r, c| gy.get(r, c) * g.get(0, c) * inv_std[c])
                };
                accumulate(grads, *input, gx);
                accumulate(grads, *gamma, ggamma);
                accumulate(grads, *beta, gbeta);
            }
            Op::RowNormalize { input, norms } => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), gy.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, out) in gx.row_mut(r).iter_mut().enumerate() {
                        *out = (gr[c] - yr[c] * dot) / norms[r];
                    }
                }
                accumulate(grads, *input, gx);
            }
            Op::VStack(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let idx: Vec<usize> = (offset..offset + rows).collect();
                    accumulate(grads, p, gy.select_rows(&idx));
                    offset += rows;
                }
            }
            Op::Contrastive {
                self_sim,
                cross_sim,
                tau,
                w_self,
                w_cross,
            } => {
                let m = w_self.rows();
                let scale = gy.as_slice()[0] / (m as f64 * tau);
                let gs = w_self.map(|v| v * scale);
                let mut gc = w_cross.map(|v| v * scale);
                for j in 0..m {
                    let v = gc.get(j, j) - scale;
                    gc.set(j, j, v);
                }
                accumulate(grads, *self_sim, gs);
                accumulate(grads, *cross_sim, gc);
            }
            Op::MeanLog {
                input,
                complement,
                floor,
            } => {
                let p = self.value(*input);
                let n = p.len().max(1) as f64;
                let g0 = gy.as_slice()[0] / n;
                let gx = p.map(|v| {
                    if v < *floor || v > 1.0 - floor {
                        0.0
                    } else if *complement {
                        -g0 / (1.0 - v)
                    } else {
                        g0 / v
                    }
                });
                accumulate(grads, *input, gx);
            }
            Op::SqDistSum { input, target } => {
                let g0 = gy.as_slice()[0];
                let x = self.value(*input);
                let mut gx = x.clone();
                gx.as_mut_slice()
                    .iter_mut()
                    .zip(target.as_slice())
                    .for_each(|(v, t)| *v = 2.0 * g0 * (*v - t));
                accumulate(grads, *input, gx);
            }
            Op::ColSumSq { input, col_sums } => {
                let g0 = gy.as_slice()[0];
                let x = self.value(*input);
                let gx = Matrix::from_fn(x.rows(), x.cols(), |_, c| 2.0 * g0 * col_sums[c]);
                accumulate(grads, *input, gx);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, gy.clone());
                accumulate(grads, *b, gy.clone());
            }
            Op::Scale(a, f) => accumulate(grads, *a, gy.map(|v| v * f)),
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], var: Var, g: Matrix) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_scaled(&g, 1.0),
        slot @ None => *slot = Some(g),
    }
}

/// Largest `f64` strictly below 1; keeps tanh and sigmoid outputs inside their open ranges.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
