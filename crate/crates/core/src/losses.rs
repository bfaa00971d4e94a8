//! Training objectives: the conditional adversarial BCE terms, the
//! residual reconstruction loss, and the 0.4/0.6 composite.
//!
//! The reconstruction loss compares the residual the model should learn
//! (`target_feature = y_ref - x_up`) against the residual it produced
//! (`learned_feature = y_out - x_up`): the normalized sum of the
//! entrywise L1 norm and the (unsquared) Euclidean norm of their
//! difference. The upsampled input cancels algebraically, and a test
//! pins that invariance at 1e-9. Ablation variants keep only the L1 or
//! only the L2 term.
//!
//! Probability-path BCE clamps inputs to `[eps, 1-eps]`; training uses
//! the fused logit path which needs no clamp.

use crate::autodiff::{softplus_value, Tape, Var};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const BCE_EPSILON: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossVariant {
    /// L1 + L2 (the composite reconstruction term).
    R,
    /// L1 only.
    R1,
    /// L2 only.
    R2,
}

impl LossVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossVariant::R => "R",
            LossVariant::R1 => "R1",
            LossVariant::R2 => "R2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "R" | "r" => Ok(LossVariant::R),
            "R1" | "r1" => Ok(LossVariant::R1),
            "R2" | "r2" => Ok(LossVariant::R2),
            other => Err(Error::Config(format!(
                "unknown loss variant '{}' (expected R|R1|R2)",
                other
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub w_adv: f64,
    pub w_rec: f64,
    /// Square the L2 term instead of using the plain norm; off by
    /// default, kept for sensitivity checks.
    pub squared_l2: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            variant: LossVariant::R,
            w_adv: 0.4,
            w_rec: 0.6,
            squared_l2: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_adv >= 0.0 && self.w_rec >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if (self.w_adv + self.w_rec - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "adversarial/reconstruction weights must sum to 1, got {} + {}",
                self.w_adv, self.w_rec
            )));
        }
        Ok(())
    }
}

fn check_same_shape(a: &ImageTensor, b: &ImageTensor, what: &str) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::Geometry(format!(
            "{}: shape {:?} vs {:?}",
            what,
            a.tensor().shape(),
            b.tensor().shape()
        )));
    }
    Ok(())
}

/// The residual an image carries over the upsampled input: `y - x_up`.
pub fn learnable_feature(y: &ImageTensor, x_up: &ImageTensor) -> Result<ImageTensor> {
    check_same_shape(y, x_up, "learnable_feature")?;
    ImageTensor::from_tensor(y.tensor().sub(x_up.tensor()))
}

/// Normalized L1 + L2 distance between the target residual and the
/// produced residual; the normalizer is the output pixel-component
/// count.
pub fn reconstruction_loss(
    y_ref: &ImageTensor,
    y_out: &ImageTensor,
    x_up: &ImageTensor,
    cfg: &LossConfig,
) -> Result<f64> {
    check_same_shape(y_ref, y_out, "reconstruction_loss")?;
    check_same_shape(y_ref, x_up, "reconstruction_loss")?;
    let target_feature = learnable_feature(y_ref, x_up)?;
    let learned_feature = learnable_feature(y_out, x_up)?;
    let diff = target_feature.tensor().sub(learned_feature.tensor());
    let n = diff.numel() as f64;
    let l1: f64 = diff.data().iter().map(|v| v.abs()).sum();
    let l2sq: f64 = diff.data().iter().map(|v| v * v).sum();
    let l2 = if cfg.squared_l2 { l2sq } else { l2sq.sqrt() };
    Ok(match cfg.variant {
        LossVariant::R => (l1 + l2) / n,
        LossVariant::R1 => l1 / n,
        LossVariant::R2 => l2 / n,
    })
}

fn check_probability(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Numeric(format!(
            "probability {} outside [0, 1]; use the logit path for raw scores",
            p
        )));
    }
    Ok(p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON))
}

/// `-ln p` against target 1, `-ln (1-p)` against target 0.
pub fn bce_probability(p: f64, target_real: bool) -> Result<f64> {
    let p = check_probability(p)?;
    Ok(if target_real { -p.ln() } else { -(1.0 - p).ln() })
}

/// Numerically fused BCE on a raw logit.
pub fn bce_logit(z: f64, target_real: bool) -> f64 {
    if target_real {
        softplus_value(-z)
    } else {
        softplus_value(z)
    }
}

/// Adversarial generator loss: BCE of the discriminator's output on
/// generated images against the "real" target, batch mean.
pub fn generator_adv_loss(d_out_fake: &[f64]) -> Result<f64> {
    if d_out_fake.is_empty() {
        return Err(Error::Config("empty probability batch".into()));
    }
    let mut acc = 0.0;
    for &p in d_out_fake {
        acc += bce_probability(p, true)?;
    }
    Ok(acc / d_out_fake.len() as f64)
}

/// Composite generator objective `w_adv * adv + w_rec * rec`.
pub fn total_generator_loss(adv: f64, rec: f64, cfg: &LossConfig) -> f64 {
    cfg.w_adv * adv + cfg.w_rec * rec
}

/// Discriminator objective: half the sum of BCE(fake, 0) and
/// BCE(real, 1), each a batch mean.
pub fn discriminator_loss(d_fake: &[f64], d_real: &[f64]) -> Result<f64> {
    if d_fake.is_empty() || d_real.is_empty() {
        return Err(Error::Config("empty probability batch".into()));
    }
    let mut fake_acc = 0.0;
    for &p in d_fake {
        fake_acc += bce_probability(p, false)?;
    }
    let mut real_acc = 0.0;
    for &p in d_real {
        real_acc += bce_probability(p, true)?;
    }
    Ok(0.5 * (fake_acc / d_fake.len() as f64 + real_acc / d_real.len() as f64))
}

// --- differentiable (tape) versions -----------------------------------

/// Reconstruction loss on the tape; mirrors [`reconstruction_loss`].
pub fn reconstruction_loss_t(
    tape: &mut Tape,
    y_ref: Var,
    y_out: Var,
    x_up: Var,
    cfg: &LossConfig,
) -> Var {
    let target_feature = tape.sub(y_ref, x_up);
    let learned_feature = tape.sub(y_out, x_up);
    let diff = tape.sub(target_feature, learned_feature);
    let n = tape.value(diff).numel() as f64;
    let l1 = tape.abs_sum(diff);
    let l2 = if cfg.squared_l2 {
        let sq = tape.mul(diff, diff);
        tape.sum(sq)
    } else {
        tape.euclid_norm(diff)
    };
    match cfg.variant {
        LossVariant::R => {
            let total = tape.add(l1, l2);
            tape.scale(total, 1.0 / n)
        }
        LossVariant::R1 => tape.scale(l1, 1.0 / n),
        LossVariant::R2 => tape.scale(l2, 1.0 / n),
    }
}

/// Mean fused BCE over a batch of scalar logits.
pub fn bce_logits_t(tape: &mut Tape, logits: &[Var], target_real: bool) -> Var {
    assert!(!logits.is_empty());
    let terms: Vec<Var> = logits
        .iter()
        .map(|&z| {
            if target_real {
                let nz = tape.neg(z);
                tape.softplus(nz)
            } else {
                tape.softplus(z)
            }
        })
        .collect();
    tape.mean_scalars(&terms)
}

/// Discriminator loss on the tape from fake/real logit batches.
pub fn discriminator_loss_t(tape: &mut Tape, fake_logits: &[Var], real_logits: &[Var]) -> Var {
    let fake = bce_logits_t(tape, fake_logits, false);
    let real = bce_logits_t(tape, real_logits, true);
    let sum = tape.add(fake, real);
    tape.scale(sum, 0.5)
}

/// Composite generator objective on the tape.
pub fn total_generator_loss_t(tape: &mut Tape, adv: Var, rec: Var, cfg: &LossConfig) -> Var {
    let a = tape.scale(adv, cfg.w_adv);
    let r = tape.scale(rec, cfg.w_rec);
    tape.add(a, r)
}
