//! Image/text hash networks and the modality discriminator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchNormState, Mode, Param, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub mod checkpoint;

/// A fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
}

impl Dense {
    fn kaiming_uniform(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::uniform(fan_in, fan_out, (6.0 / fan_in as f64).sqrt(), rng)
    }

    fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::uniform(
            fan_in,
            fan_out,
            (6.0 / (fan_in + fan_out) as f64).sqrt(),
            rng,
        )
    }

    fn uniform(fan_in: usize, fan_out: usize, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let w = Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound));
        Self {
            weight: Param::new(w),
            bias: Param::new(Matrix::zeros(1, fan_out)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.cols()
    }
}

/// Hash function `f` (images) or `g` (texts):
/// linear → relu → linear → batchnorm → relu → linear → tanh.
#[derive(Debug, Clone, PartialEq)]
pub struct HashNetwork {
    pub layer1: Dense,
    pub layer2: Dense,
    pub bn: BatchNormState,
    pub layer3: Dense,
}

/// Tape handles for every parameter of a [`HashNetwork`], in [`HashNetwork::params`] order.
#[derive(Debug, Clone, Copy)]
pub struct HashVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub gamma: Var,
    pub beta: Var,
    pub w3: Var,
    pub b3: Var,
}

impl HashVars {
    pub fn to_array(self) -> [Var; 8] {
        [
            self.w1, self.b1, self.w2, self.b2, self.gamma, self.beta, self.w3, self.b3,
        ]
    }

    pub fn from_slice(v: &[Var]) -> Self {
        Self {
            w1: v[0],
            b1: v[1],
            w2: v[2],
            b2: v[3],
            gamma: v[4],
            beta: v[5],
            w3: v[6],
            b3: v[7],
        }
    }
}

impl HashNetwork {
    pub fn new(in_dim: usize, hidden_dim: usize, code_bits: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            layer1: Dense::kaiming_uniform(in_dim, hidden_dim, rng),
            layer2: Dense::kaiming_uniform(hidden_dim, hidden_dim, rng),
            bn: BatchNormState::new(hidden_dim),
            layer3: Dense::xavier_uniform(hidden_dim, code_bits, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layer1.in_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layer1.out_dim()
    }

    pub fn code_bits(&self) -> usize {
        self.layer3.out_dim()
    }

    pub fn params(&self) -> [&Param; 8] {
        [
            &self.layer1.weight,
            &self.layer1.bias,
            &self.layer2.weight,
            &self.layer2.bias,
            &self.bn.gamma,
            &self.bn.beta,
            &self.layer3.weight,
            &self.layer3.bias,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 8] {
        [
            &mut self.layer1.weight,
            &mut self.layer1.bias,
            &mut self.layer2.weight,
            &mut self.layer2.bias,
            &mut self.bn.gamma,
            &mut self.bn.beta,
            &mut self.layer3.weight,
            &mut self.layer3.bias,
        ]
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Records the current parameter values on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> HashVars {
        let v: Vec<Var> = self
            .params()
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        HashVars::from_slice(&v)
    }

    /// Forward pass over bound parameters. In train mode the batch-norm running
    /// statistics are updated.
    pub fn forward_with(
        &mut self,
        tape: &mut Tape,
        vars: &HashVars,
        input: Var,
        mode: Mode,
    ) -> Result<Var> {
        let width = tape.value(input).cols();
        if width != self.in_dim() {
            return Err(Error::dim(
                "hash_forward",
                format!("batch width {width} vs network input {}", self.in_dim()),
            ));
        }
        self.bn.mode = mode;
        let h = tape.linear(input, vars.w1, vars.b1)?;
        let h = tape.relu(h)?;
        let h = tape.linear(h, vars.w2, vars.b2)?;
        let h = tape.batchnorm(h, vars.gamma, vars.beta, &mut self.bn)?;
        let h = tape.relu(h)?;
        let h = tape.linear(h, vars.w3, vars.b3)?;
        tape.tanh(h)
    }

    /// Continuous codes in (-1, 1) for a batch, without keeping the tape.
    pub fn forward(&mut self, batch: &Matrix, mode: Mode) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = tape.leaf(batch.clone());
        let out = self.forward_with(&mut tape, &vars, x, mode)?;
        Ok(tape.value(out).clone())
    }

    /// Eval-mode forward; does not touch any state.
    pub fn encode(&self, batch: &Matrix) -> Result<Matrix> {
        self.clone().forward(batch, Mode::Eval)
    }

    pub fn accumulate(&mut self, grads: &crate::autodiff::Gradients, vars: &HashVars) {
        for (p, v) in self.params_mut().into_iter().zip(vars.to_array()) {
            p.accumulate(grads, v);
        }
    }
}

/// Discriminator `D`: linear → relu → linear → sigmoid, one probability per row.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorNet {
    pub layer1: Dense,
    pub layer2: Dense,
}

#[derive(Debug, Clone, Copy)]
pub struct DiscVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl DiscVars {
    pub fn to_array(self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn from_slice(v: &[Var]) -> Self {
        Self {
            w1: v[0],
            b1: v[1],
            w2: v[2],
            b2: v[3],
        }
    }
}

impl DiscriminatorNet {
    pub fn new(in_dim: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            layer1: Dense::kaiming_uniform(in_dim, hidden_dim, rng),
            layer2: Dense::xavier_uniform(hidden_dim, 1, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layer1.in_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layer1.out_dim()
    }

    pub fn params(&self) -> [&Param; 4] {
        [
            &self.layer1.weight,
            &self.layer1.bias,
            &self.layer2.weight,
            &self.layer2.bias,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 4] {
        [
            &mut self.layer1.weight,
            &mut self.layer1.bias,
            &mut self.layer2.weight,
            &mut self.layer2.bias,
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> DiscVars {
        let v: Vec<Var> = self
            .params()
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        DiscVars::from_slice(&v)
    }

    pub fn forward_with(&self, tape: &mut Tape, vars: &DiscVars, codes: Var) -> Result<Var> {
        let width = tape.value(codes).cols();
        if width != self.in_dim() {
            return Err(Error::dim(
                "disc_forward",
                format!(
                    "code width {width} vs discriminator input {}",
                    self.in_dim()
                ),
            ));
        }
        let h = tape.linear(codes, vars.w1, vars.b1)?;
        let h = tape.relu(h)?;
        let h = tape.linear(h, vars.w2, vars.b2)?;
        tape.sigmoid(h)
    }

    /// Probabilities that each row of `codes` came from the text modality.
    pub fn forward(&self, codes: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = tape.leaf(codes.clone());
        let out = self.forward_with(&mut tape, &vars, x)?;
        Ok(tape.value(out).clone())
    }

    pub fn accumulate(&mut self, grads: &crate::autodiff::Gradients, vars: &DiscVars) {
        for (p, v) in self.params_mut().into_iter().zip(vars.to_array()) {
            p.accumulate(grads, v);
        }
    }
}

/// The three networks trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub f: HashNetwork,
    pub g: HashNetwork,
    pub d: DiscriminatorNet,
    pub init_seed: u64,
}

impl ModelBundle {
    pub fn code_bits(&self) -> usize {
        self.f.code_bits()
    }
}

/// Seeded initialization: Kaiming-uniform weights before relu, Xavier-uniform
/// for the output layers, zero biases.
pub fn init_bundle(
    d_img: usize,
    d_txt: usize,
    code_bits: usize,
    hidden: usize,
    disc_hidden: usize,
    seed: u64,
) -> Result<ModelBundle> {
    if d_img == 0 || d_txt == 0 || hidden == 0 || disc_hidden == 0 {
        return Err(Error::Config("network dimensions must be positive".into()));
    }
    if code_bits < 8 {
        return Err(Error::Config(format!(
            "code length must be at least 8 bits, got {code_bits}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = HashNetwork::new(d_img, hidden, code_bits, &mut rng);
    let g = HashNetwork::new(d_txt, hidden, code_bits, &mut rng);
    let d = DiscriminatorNet::new(code_bits, disc_hidden, &mut rng);
    Ok(ModelBundle {
        f,
        g,
        d,
        init_seed: seed,
    })
}
