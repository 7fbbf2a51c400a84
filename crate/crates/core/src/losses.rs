//! Training objectives over a batch of continuous codes.
//!
//! Contrastive terms share one template: for anchor rows `a` and positive rows
//! `p`, the loss for anchor `j` is
//! `-log( S(a_j, p_j) / (Σ_{k≠j} S(a_j, a_k) + Σ_k S(a_j, p_k)) )` with
//! `S(u, v) = exp(cos(u, v) / τ)`, averaged over the batch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::models::{DiscVars, DiscriminatorNet};

/// Probabilities entering a logarithm are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]`.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            tau: 0.5,
            lambda1: 1.0,
            lambda2: 1.0,
            alpha: 0.01,
            beta: 0.001,
            gamma: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// The four code streams of a batch plus the binary target they are pulled towards.
#[derive(Debug, Clone)]
pub struct BatchCodes {
    pub hi: Var,
    pub hi_aug: Var,
    pub ht: Var,
    pub ht_aug: Var,
    pub b_target: Matrix,
}

impl BatchCodes {
    fn streams(&self) -> [Var; 4] {
        [self.hi, self.hi_aug, self.ht, self.ht_aug]
    }
}

/// Which side of the adversarial game a total loss is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Generator,
    Discriminator,
}

/// Pairwise cosine similarities between the rows of `a` and the rows of `c`.
pub fn cosine_similarity_matrix(tape: &mut Tape, a: Var, c: Var) -> Result<Var> {
    let an = tape.row_l2_normalize(a)?;
    let cn = tape.row_l2_normalize(c)?;
    tape.matmul_t(an, cn)
}

fn contrastive_template(tape: &mut Tape, anchor: Var, positive: Var, tau: f64) -> Result<Var> {
    let (a, p) = (tape.value(anchor), tape.value(positive));
    if a.shape() != p.shape() {
        return Err(Error::dim(
            "contrastive",
            format!("{:?} vs {:?}", a.shape(), p.shape()),
        ));
    }
    let an = tape.row_l2_normalize(anchor)?;
    let pn = tape.row_l2_normalize(positive)?;
    let self_sim = tape.matmul_t(an, an)?;
    let cross_sim = tape.matmul_t(an, pn)?;
    tape.contrastive_nll(self_sim, cross_sim, tau)
}

/// Image-anchored cross-modal contrastive loss.
pub fn inter_modal_contrastive(tape: &mut Tape, hi: Var, ht: Var, tau: f64) -> Result<Var> {
    contrastive_template(tape, hi, ht, tau)
}

/// Average of the image-anchored and text-anchored cross-modal losses.
pub fn symmetric_inter_modal_contrastive(
    tape: &mut Tape,
    hi: Var,
    ht: Var,
    tau: f64,
) -> Result<Var> {
    let a = contrastive_template(tape, hi, ht, tau)?;
    let b = contrastive_template(tape, ht, hi, tau)?;
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, 0.5))
}

/// Contrastive loss between a modality and its augmented view.
pub fn intra_modal_contrastive(tape: &mut Tape, h: Var, h_aug: Var, tau: f64) -> Result<Var> {
    contrastive_template(tape, h, h_aug, tau)
}

/// `inter + λ1·intra_img + λ2·intra_txt`; zero-weighted terms are not evaluated.
pub fn contrastive_total(tape: &mut Tape, codes: &BatchCodes, w: &LossWeights) -> Result<Var> {
    let mut total = inter_modal_contrastive(tape, codes.hi, codes.ht, w.tau)?;
    if w.lambda1 > 0.0 {
        let l = intra_modal_contrastive(tape, codes.hi, codes.hi_aug, w.tau)?;
        let l = tape.scale(l, w.lambda1);
        total = tape.add(total, l)?;
    }
    if w.lambda2 > 0.0 {
        let l = intra_modal_contrastive(tape, codes.ht, codes.ht_aug, w.tau)?;
        let l = tape.scale(l, w.lambda2);
        total = tape.add(total, l)?;
    }
    Ok(total)
}

/// Discriminator objective: text codes are "real", image codes "fake".
///
/// `-(mean log D(text rows) + mean log(1 - D(image rows)))` over both the
/// original and augmented streams.
pub fn adversarial_discriminator_loss(
    tape: &mut Tape,
    d: &DiscriminatorNet,
    dv: &DiscVars,
    codes: &BatchCodes,
) -> Result<Var> {
    let text = tape.vstack(&[codes.ht, codes.ht_aug])?;
    let image = tape.vstack(&[codes.hi, codes.hi_aug])?;
    let p_text = d.forward_with(tape, dv, text)?;
    let p_image = d.forward_with(tape, dv, image)?;
    let real = tape.mean_log(p_text, PROB_FLOOR);
    let fake = tape.mean_log_complement(p_image, PROB_FLOOR);
    let s = tape.add(real, fake)?;
    Ok(tape.scale(s, -1.0))
}

/// Non-saturating generator objective `-mean log D(image rows)`.
pub fn adversarial_generator_loss(
    tape: &mut Tape,
    d: &DiscriminatorNet,
    dv: &DiscVars,
    hi_streams: Var,
) -> Result<Var> {
    let p = d.forward_with(tape, dv, hi_streams)?;
    let l = tape.mean_log(p, PROB_FLOOR);
    Ok(tape.scale(l, -1.0))
}

fn per_element(tape: &Tape, codes: &BatchCodes) -> f64 {
    let (m, b) = tape.value(codes.hi).shape();
    1.0 / (m * b).max(1) as f64
}

/// `Σ_streams ‖B - H‖²_F / (M·B)`.
pub fn quantization_loss(tape: &mut Tape, codes: &BatchCodes) -> Result<Var> {
    if codes
        .b_target
        .as_slice()
        .iter()
        .any(|&v| v != 1.0 && v != -1.0)
    {
        return Err(Error::Config("binary target must be in {-1, +1}".into()));
    }
    let mut total: Option<Var> = None;
    for s in codes.streams() {
        let l = tape.sq_dist_sum(s, &codes.b_target)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    let scale = per_element(tape, codes);
    Ok(tape.scale(total.unwrap(), scale))
}

/// `Σ_streams ‖1ᵀH‖² / (M·B)`: squared per-bit batch sums.
pub fn bit_balance_loss(tape: &mut Tape, codes: &BatchCodes) -> Result<Var> {
    let mut total: Option<Var> = None;
    for s in codes.streams() {
        let l = tape.col_sum_sq(s);
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    let scale = per_element(tape, codes);
    Ok(tape.scale(total.unwrap(), scale))
}

/// Individual loss values of one generator/discriminator evaluation.
/// Terms that were not evaluated (zero weight) are 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub c_inter: f64,
    pub c_img: f64,
    pub c_txt: f64,
    pub adv_disc: f64,
    pub adv_gen: f64,
    pub quant: f64,
    pub bit_balance: f64,
    pub total: f64,
}

/// Options that change how the objective is assembled.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ObjectiveOptions {
    pub symmetric_inter: bool,
}

/// Generator phase: `L_C + α·L_adv_gen + β·L_Q + γ·L_BB`.
/// Discriminator phase: `L_adv_disc`.
///
/// Returns the loss var and the value of each evaluated term.
pub fn total_loss(
    tape: &mut Tape,
    codes: &BatchCodes,
    d: &DiscriminatorNet,
    dv: &DiscVars,
    w: &LossWeights,
    phase: Phase,
    opts: ObjectiveOptions,
) -> Result<(Var, LossBreakdown)> {
    let mut parts = LossBreakdown::default();
    if phase == Phase::Discriminator {
        let l = adversarial_discriminator_loss(tape, d, dv, codes)?;
        parts.adv_disc = tape.scalar(l);
        parts.total = parts.adv_disc;
        return Ok((l, parts));
    }

    let inter = if opts.symmetric_inter {
        symmetric_inter_modal_contrastive(tape, codes.hi, codes.ht, w.tau)?
    } else {
        inter_modal_contrastive(tape, codes.hi, codes.ht, w.tau)?
    };
    parts.c_inter = tape.scalar(inter);
    let mut total = inter;
    let add_term = |tape: &mut Tape, total: &mut Var, l: Var, weight: f64| -> Result<f64> {
        let v = tape.scalar(l);
        let scaled = tape.scale(l, weight);
        *total = tape.add(*total, scaled)?;
        Ok(v)
    };
    if w.lambda1 > 0.0 {
        let l = intra_modal_contrastive(tape, codes.hi, codes.hi_aug, w.tau)?;
        parts.c_img = add_term(tape, &mut total, l, w.lambda1)?;
    }
    if w.lambda2 > 0.0 {
        let l = intra_modal_contrastive(tape, codes.ht, codes.ht_aug, w.tau)?;
        parts.c_txt = add_term(tape, &mut total, l, w.lambda2)?;
    }
    if w.alpha > 0.0 {
        let image = tape.vstack(&[codes.hi, codes.hi_aug])?;
        let l = adversarial_generator_loss(tape, d, dv, image)?;
        parts.adv_gen = add_term(tape, &mut total, l, w.alpha)?;
    }
    if w.beta > 0.0 {
        let l = quantization_loss(tape, codes)?;
        parts.quant = add_term(tape, &mut total, l, w.beta)?;
    }
    if w.gamma > 0.0 {
        let l = bit_balance_loss(tape, codes)?;
        parts.bit_balance = add_term(tape, &mut total, l, w.gamma)?;
    }
    parts.total = tape.scalar(total);
    Ok((total, parts))
}
