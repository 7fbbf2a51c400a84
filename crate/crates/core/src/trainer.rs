//! Alternating generator/discriminator optimization of the hashing objective.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Param, Tape};
use crate::dataset::{batch_indices, TrainingData};
use crate::error::{Error, Result};
use crate::losses::{total_loss, BatchCodes, LossBreakdown, LossWeights, ObjectiveOptions, Phase};
use crate::matrix::Matrix;
use crate::models::{init_bundle, ModelBundle};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Switches that remove one objective term from training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSwitch {
    NoAdv,
    NoQuant,
    NoBb,
    NoIntraImg,
    NoIntraTxt,
}

impl AblationSwitch {
    pub const ALL: [AblationSwitch; 5] = [
        AblationSwitch::NoAdv,
        AblationSwitch::NoQuant,
        AblationSwitch::NoBb,
        AblationSwitch::NoIntraImg,
        AblationSwitch::NoIntraTxt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationSwitch::NoAdv => "no_adv",
            AblationSwitch::NoQuant => "no_quant",
            AblationSwitch::NoBb => "no_bb",
            AblationSwitch::NoIntraImg => "no_intra_img",
            AblationSwitch::NoIntraTxt => "no_intra_txt",
        }
    }
}

impl fmt::Display for AblationSwitch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationSwitch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation switch {s:?}")))
    }
}

/// Every hyperparameter of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub code_bits: usize,
    pub hidden_dim: usize,
    pub disc_hidden_dim: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub seed: u64,
    pub ablation: BTreeSet<AblationSwitch>,
    /// Average the image- and text-anchored cross-modal losses.
    pub symmetric_inter: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            code_bits: 64,
            hidden_dim: 1024,
            disc_hidden_dim: 512,
            batch_size: 256,
            epochs: 100,
            lr0: 1e-4,
            lr_decay_every: 50,
            lr_decay_factor: 0.2,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            seed: 0,
            ablation: BTreeSet::new(),
            symmetric_inter: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return fail(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if self.epochs < 1 {
            return fail("epochs must be at least 1".into());
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return fail(format!(
                "lr_decay_factor must be in (0, 1), got {}",
                self.lr_decay_factor
            ));
        }
        if self.lr_decay_every == 0 {
            return fail("lr_decay_every must be positive".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 must be positive, got {}", self.lr0));
        }
        if self.code_bits < 8 {
            return fail(format!(
                "code_bits must be at least 8, got {}",
                self.code_bits
            ));
        }
        if self.hidden_dim == 0 || self.disc_hidden_dim == 0 {
            return fail("hidden dimensions must be positive".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return fail("adam betas must be in [0, 1) and epsilon positive".into());
        }
        self.weights.validate()
    }

    /// Loss weights with ablation switches applied.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        for s in &self.ablation {
            match s {
                AblationSwitch::NoAdv => w.alpha = 0.0,
                AblationSwitch::NoQuant => w.beta = 0.0,
                AblationSwitch::NoBb => w.gamma = 0.0,
                AblationSwitch::NoIntraImg => w.lambda1 = 0.0,
                AblationSwitch::NoIntraTxt => w.lambda2 = 0.0,
            }
        }
        w
    }
}

/// Step schedule `lr0 · factor^⌊epoch / every⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0
        * cfg
            .lr_decay_factor
            .powi((epoch / cfg.lr_decay_every.max(1)) as i32)
}

/// Bias-corrected Adam update at step `t` (1-based); clears the gradient.
pub fn adam_step(param: &mut Param, lr: f64, t: u64, adam: &AdamConfig) {
    debug_assert!(t >= 1);
    let bc1 = 1.0 - adam.beta1.powi(t as i32);
    let bc2 = 1.0 - adam.beta2.powi(t as i32);
    let Param {
        value,
        grad,
        adam_m,
        adam_v,
    } = param;
    for (((w, g), m), v) in value
        .as_mut_slice()
        .iter_mut()
        .zip(grad.as_mut_slice().iter_mut())
        .zip(adam_m.as_mut_slice())
        .zip(adam_v.as_mut_slice())
    {
        *m = adam.beta1 * *m + (1.0 - adam.beta1) * *g;
        *v = adam.beta2 * *v + (1.0 - adam.beta2) * *g * *g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *w -= lr * m_hat / (v_hat.sqrt() + adam.epsilon);
        *g = 0.0;
    }
}

/// `sign(((H_i + H_i′)/2 + (H_t + H_t′)/2) / 2)` with `sign(0) = +1`.
pub fn update_binary_codes(
    hi: &Matrix,
    hi_aug: &Matrix,
    ht: &Matrix,
    ht_aug: &Matrix,
) -> Result<Matrix> {
    let shape = hi.shape();
    if [hi_aug, ht, ht_aug].iter().any(|m| m.shape() != shape) {
        return Err(Error::dim(
            "update_binary_codes",
            "code streams differ in shape",
        ));
    }
    let mut out = Matrix::zeros(shape.0, shape.1);
    for (i, o) in out.as_mut_slice().iter_mut().enumerate() {
        let avg = 0.5
            * ((hi.as_slice()[i] + hi_aug.as_slice()[i]) / 2.0
                + (ht.as_slice()[i] + ht_aug.as_slice()[i]) / 2.0);
        *o = if avg >= 0.0 { 1.0 } else { -1.0 };
    }
    Ok(out)
}

/// Mean loss components over the batches of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    #[serde(rename = "L_C_inter")]
    pub l_c_inter: f64,
    #[serde(rename = "L_C_img")]
    pub l_c_img: f64,
    #[serde(rename = "L_C_txt")]
    pub l_c_txt: f64,
    #[serde(rename = "L_adv_disc")]
    pub l_adv_disc: f64,
    #[serde(rename = "L_adv_gen")]
    pub l_adv_gen: f64,
    #[serde(rename = "L_Q")]
    pub l_q: f64,
    #[serde(rename = "L_BB")]
    pub l_bb: f64,
    pub total: f64,
}

impl EpochRecord {
    fn from_mean(epoch: usize, lr: f64, parts: &[LossBreakdown]) -> Self {
        let n = parts.len().max(1) as f64;
        let mean = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
        Self {
            epoch,
            lr,
            l_c_inter: mean(|p| p.c_inter),
            l_c_img: mean(|p| p.c_img),
            l_c_txt: mean(|p| p.c_txt),
            l_adv_disc: mean(|p| p.adv_disc),
            l_adv_gen: mean(|p| p.adv_gen),
            l_q: mean(|p| p.quant),
            l_bb: mean(|p| p.bit_balance),
            total: mean(|p| p.total),
        }
    }
}

/// Per-epoch loss records. Wall-clock times are kept apart from the records so
/// that the serialized report is reproducible byte for byte.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub wall_seconds: Vec<f64>,
}

impl TrainReport {
    /// One JSON object per line, one line per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| Error::format("train report", e.to_string()))
            })
            .collect::<Result<Vec<EpochRecord>>>()?;
        Ok(Self {
            records,
            wall_seconds: Vec::new(),
        })
    }

    pub fn timings_jsonl(&self) -> String {
        self.wall_seconds
            .iter()
            .enumerate()
            .map(|(e, s)| format!("{{\"epoch\":{e},\"wall_seconds\":{s}}}\n"))
            .collect()
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch as u64 + 1)
}

/// Owns a bundle during training and counts optimizer steps.
pub struct Trainer {
    pub bundle: ModelBundle,
    pub cfg: TrainConfig,
    generator_steps: u64,
    discriminator_steps: u64,
}

impl Trainer {
    pub fn new(bundle: ModelBundle, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if bundle.code_bits() != cfg.code_bits
            || bundle.g.code_bits() != cfg.code_bits
            || bundle.d.in_dim() != cfg.code_bits
        {
            return Err(Error::Config(format!(
                "bundle code length {} does not match config {}",
                bundle.code_bits(),
                cfg.code_bits
            )));
        }
        Ok(Self {
            bundle,
            cfg,
            generator_steps: 0,
            discriminator_steps: 0,
        })
    }

    pub fn generator_steps(&self) -> u64 {
        self.generator_steps
    }

    pub fn discriminator_steps(&self) -> u64 {
        self.discriminator_steps
    }

    /// Seeded batches for `epoch`. A trailing single row is folded into the
    /// previous batch because train-mode batch norm needs at least two rows.
    pub fn epoch_batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut batches = batch_indices(n, self.cfg.batch_size, epoch_seed(self.cfg.seed, epoch));
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            let tail = batches.pop().unwrap();
            batches.last_mut().unwrap().extend(tail);
        }
        batches
    }

    pub fn train_epoch(&mut self, data: &TrainingData, epoch: usize) -> Result<EpochRecord> {
        if data.len() < 2 {
            return Err(Error::Config(format!(
                "training needs at least 2 rows, got {}",
                data.len()
            )));
        }
        let lr = lr_at(epoch, &self.cfg);
        let mut parts = Vec::new();
        for (b, idx) in self.epoch_batches(data.len(), epoch).iter().enumerate() {
            let batch = [
                data.x.select_rows(idx),
                data.x_aug.select_rows(idx),
                data.y.select_rows(idx),
                data.y_aug.select_rows(idx),
            ];
            parts.push(self.train_step(&batch, lr, epoch, b)?);
        }
        Ok(EpochRecord::from_mean(epoch, lr, &parts))
    }

    /// One discriminator update followed by one generator update on a batch
    /// `[x, x_aug, y, y_aug]`.
    pub fn train_step(
        &mut self,
        batch: &[Matrix; 4],
        lr: f64,
        epoch: usize,
        batch_index: usize,
    ) -> Result<LossBreakdown> {
        let w = self.cfg.effective_weights();
        let opts = ObjectiveOptions {
            symmetric_inter: self.cfg.symmetric_inter,
        };
        let bundle = &mut self.bundle;

        let mut tape = Tape::new();
        let fv = bundle.f.bind(&mut tape);
        let gv = bundle.g.bind(&mut tape);
        let inputs: Vec<_> = batch.iter().map(|m| tape.leaf(m.clone())).collect();
        let hi = bundle
            .f
            .forward_with(&mut tape, &fv, inputs[0], Mode::Train)?;
        let hi_aug = bundle
            .f
            .forward_with(&mut tape, &fv, inputs[1], Mode::Train)?;
        let ht = bundle
            .g
            .forward_with(&mut tape, &gv, inputs[2], Mode::Train)?;
        let ht_aug = bundle
            .g
            .forward_with(&mut tape, &gv, inputs[3], Mode::Train)?;
        let b_target = update_binary_codes(
            tape.value(hi),
            tape.value(hi_aug),
            tape.value(ht),
            tape.value(ht_aug),
        )?;

        let check = |component: &'static str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::NonFiniteLoss {
                    component,
                    epoch,
                    batch: batch_index,
                })
            }
        };

        let mut disc_loss = 0.0;
        if w.alpha > 0.0 {
            let mut dtape = Tape::new();
            let dv = bundle.d.bind(&mut dtape);
            let streams: Vec<_> = [hi, hi_aug, ht, ht_aug]
                .iter()
                .map(|&v| dtape.leaf(tape.value(v).clone()))
                .collect();
            let codes = BatchCodes {
                hi: streams[0],
                hi_aug: streams[1],
                ht: streams[2],
                ht_aug: streams[3],
                b_target: b_target.clone(),
            };
            let (loss, parts) = total_loss(
                &mut dtape,
                &codes,
                &bundle.d,
                &dv,
                &w,
                Phase::Discriminator,
                opts,
            )?;
            check("L_adv_disc", parts.adv_disc)?;
            let grads = dtape.backward(loss)?;
            self.discriminator_steps += 1;
            let t = self.discriminator_steps;
            let adam = self.cfg.adam;
            for (p, v) in bundle.d.params_mut().into_iter().zip(dv.to_array()) {
                p.zero_grad();
                p.accumulate(&grads, v);
                adam_step(p, lr, t, &adam);
            }
            disc_loss = parts.adv_disc;
        }

        let dv = bundle.d.bind(&mut tape);
        let codes = BatchCodes {
            hi,
            hi_aug,
            ht,
            ht_aug,
            b_target,
        };
        let (loss, mut parts) = total_loss(
            &mut tape,
            &codes,
            &bundle.d,
            &dv,
            &w,
            Phase::Generator,
            opts,
        )?;
        for (name, v) in [
            ("L_C_inter", parts.c_inter),
            ("L_C_img", parts.c_img),
            ("L_C_txt", parts.c_txt),
            ("L_adv_gen", parts.adv_gen),
            ("L_Q", parts.quant),
            ("L_BB", parts.bit_balance),
            ("total", parts.total),
        ] {
            check(name, v)?;
        }
        let grads = tape.backward(loss)?;
        self.generator_steps += 1;
        let t = self.generator_steps;
        let adam = self.cfg.adam;
        for (net, vars) in [(&mut bundle.f, fv), (&mut bundle.g, gv)] {
            for (p, v) in net.params_mut().into_iter().zip(vars.to_array()) {
                p.zero_grad();
                p.accumulate(&grads, v);
                adam_step(p, lr, t, &adam);
            }
        }
        parts.adv_disc = disc_loss;
        Ok(parts)
    }
}

/// Trains freshly initialized networks for `cfg.epochs` epochs.
pub fn train(data: &TrainingData, cfg: &TrainConfig) -> Result<(ModelBundle, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("the train split is empty".into()));
    }
    let bundle = init_bundle(
        data.x.cols(),
        data.y.cols(),
        cfg.code_bits,
        cfg.hidden_dim,
        cfg.disc_hidden_dim,
        cfg.seed,
    )?;
    let mut trainer = Trainer::new(bundle, cfg.clone())?;
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let rec = trainer.train_epoch(data, epoch)?;
        log::info!(
            "epoch {epoch}: lr {:.2e} total {:.5} inter {:.5}",
            rec.lr,
            rec.total,
            rec.l_c_inter
        );
        report.records.push(rec);
        report.wall_seconds.push(start.elapsed().as_secs_f64());
    }
    Ok((trainer.bundle, report))
}
