//! Mask losses and the distillation objective.
//!
//! Every loss is a function of per-pixel logits. The `*_grad` variants also return the
//! analytic gradient with respect to those logits; trainers feed it back into the model
//! graph as a constant so the losses themselves stay outside the autodiff engine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{sigmoid, BinaryMask, MaskLogits};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub focal_gamma: f64,
    pub dice_weight: f64,
    pub focal_weight: f64,
    /// Weight of the distillation term in the student objective.
    pub alpha: f64,
    /// Dice denominator stabilizer.
    pub smooth: f64,
    /// Probability clamp used by the KL term.
    pub prob_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_gamma: 2.0,
            dice_weight: 1.0,
            focal_weight: 1.0,
            alpha: 0.1,
            smooth: 1e-6,
            prob_epsilon: 1e-7,
        }
    }
}

impl LossConfig {
    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.focal_gamma >= 0.0) {
            return bad("focal_gamma must be >= 0");
        }
        if !(self.dice_weight >= 0.0 && self.focal_weight >= 0.0) {
            return bad("loss weights must be >= 0");
        }
        if !(self.dice_weight + self.focal_weight > 0.0) {
            return bad("dice_weight + focal_weight must be > 0");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.smooth > 0.0) {
            return bad("smooth must be > 0");
        }
        if !(self.prob_epsilon > 0.0 && self.prob_epsilon < 0.5) {
            return bad("prob_epsilon must lie in (0, 0.5)");
        }
        Ok(())
    }
}

/// Loss value together with its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Breakdown of the student objective.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentLoss {
    pub total: f64,
    pub mask: f64,
    pub distill: f64,
    pub grad: Vec<f64>,
}

fn check_shapes(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            expected: a,
            actual: b,
        });
    }
    Ok(())
}

/// `ln(sigmoid(z))`, stable for large `|z|`.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

pub fn dice_loss(logits: &MaskLogits, target: &BinaryMask, smooth: f64) -> Result<f64> {
    dice_loss_grad(logits, target, smooth).map(|l| l.value)
}

/// `1 - (2 sum(p y) + s) / (sum(p) + sum(y) + s)` with `p = sigmoid(logits)`.
pub fn dice_loss_grad(logits: &MaskLogits, target: &BinaryMask, smooth: f64) -> Result<LossGrad> {
    check_shapes(logits.shape(), target.shape())?;
    let probs: Vec<f64> = logits.data().iter().map(|&z| sigmoid(z)).collect();
    let y = target.data();
    let intersection: f64 = probs.iter().zip(y).map(|(p, &t)| p * t as f64).sum();
    let prob_sum: f64 = probs.iter().sum();
    let target_sum = target.count() as f64;
    let numerator = 2.0 * intersection + smooth;
    let denominator = prob_sum + target_sum + smooth;
    let value = 1.0 - numerator / denominator;
    let grad = probs
        .iter()
        .zip(y)
        .map(|(&p, &t)| {
            let d_ratio_dp = (2.0 * t as f64 * denominator - numerator) / (denominator * denominator);
            -d_ratio_dp * p * (1.0 - p)
        })
        .collect();
    Ok(LossGrad { value, grad })
}

pub fn focal_loss(logits: &MaskLogits, target: &BinaryMask, gamma: f64) -> Result<f64> {
    focal_loss_grad(logits, target, gamma).map(|l| l.value)
}

/// Mean over pixels of `-(1 - p_t)^gamma ln(p_t)`.
pub fn focal_loss_grad(logits: &MaskLogits, target: &BinaryMask, gamma: f64) -> Result<LossGrad> {
    check_shapes(logits.shape(), target.shape())?;
    let n = logits.data().len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(logits.data().len());
    for (&z, &t) in logits.data().iter().zip(target.data()) {
        // p_t = sigmoid(sign * z); u = 1 - p_t = sigmoid(-sign * z).
        let sign = if t != 0 { 1.0 } else { -1.0 };
        let log_pt = log_sigmoid(sign * z);
        let pt = sigmoid(sign * z);
        let u = sigmoid(-sign * z);
        let modulator = if gamma == 0.0 { 1.0 } else { u.powf(gamma) };
        value += -modulator * log_pt;
        // d/dz = sign * (gamma * p_t * u^gamma * ln p_t - u^(gamma + 1))
        let d = sign * (gamma * pt * modulator * log_pt - modulator * u);
        grad.push(d / n);
    }
    Ok(LossGrad {
        value: value / n,
        grad,
    })
}

pub fn dicefocal_loss(logits: &MaskLogits, target: &BinaryMask, config: &LossConfig) -> Result<f64> {
    dicefocal_loss_grad(logits, target, config).map(|l| l.value)
}

/// `dice_weight * dice + focal_weight * focal`.
pub fn dicefocal_loss_grad(
    logits: &MaskLogits,
    target: &BinaryMask,
    config: &LossConfig,
) -> Result<LossGrad> {
    let dice = dice_loss_grad(logits, target, config.smooth)?;
    let focal = focal_loss_grad(logits, target, config.focal_gamma)?;
    Ok(LossGrad {
        value: config.dice_weight * dice.value + config.focal_weight * focal.value,
        grad: dice
            .grad
            .iter()
            .zip(&focal.grad)
            .map(|(d, f)| config.dice_weight * d + config.focal_weight * f)
            .collect(),
    })
}

pub fn kl_distill_loss(
    student: &MaskLogits,
    teacher: &MaskLogits,
    epsilon: f64,
) -> Result<f64> {
    kl_distill_loss_grad(student, teacher, epsilon).map(|l| l.value)
}

/// Mean over pixels of the Bernoulli `KL(teacher || student)`, probabilities clamped to
/// `[epsilon, 1 - epsilon]`. The teacher is a constant target.
pub fn kl_distill_loss_grad(
    student: &MaskLogits,
    teacher: &MaskLogits,
    epsilon: f64,
) -> Result<LossGrad> {
    check_shapes(teacher.shape(), student.shape())?;
    let n = student.data().len() as f64;
    let clamp = |p: f64| p.clamp(epsilon, 1.0 - epsilon);
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(student.data().len());
    for (&zs, &zt) in student.data().iter().zip(teacher.data()) {
        let t = clamp(sigmoid(zt));
        let raw = sigmoid(zs);
        let s = clamp(raw);
        value += t * (t / s).ln() + (1.0 - t) * ((1.0 - t) / (1.0 - s)).ln();
        // Inside the clamp, d/dz [-t ln s - (1 - t) ln(1 - s)] = s - t.
        let d = if raw > epsilon && raw < 1.0 - epsilon {
            s - t
        } else {
            0.0
        };
        grad.push(d / n);
    }
    Ok(LossGrad {
        value: value / n,
        grad,
    })
}

pub fn student_loss(
    student: &MaskLogits,
    target: &BinaryMask,
    teacher: &MaskLogits,
    config: &LossConfig,
) -> Result<f64> {
    student_loss_grad(student, target, teacher, config).map(|l| l.total)
}

/// `(1 - alpha) * dicefocal(student, target) + alpha * kl(teacher || student)`.
pub fn student_loss_grad(
    student: &MaskLogits,
    target: &BinaryMask,
    teacher: &MaskLogits,
    config: &LossConfig,
) -> Result<StudentLoss> {
    check_shapes(student.shape(), target.shape())?;
    check_shapes(student.shape(), teacher.shape())?;
    let mask = dicefocal_loss_grad(student, target, config)?;
    let distill = kl_distill_loss_grad(student, teacher, config.prob_epsilon)?;
    let a = config.alpha;
    Ok(StudentLoss {
        total: (1.0 - a) * mask.value + a * distill.value,
        mask: mask.value,
        distill: distill.value,
        grad: mask
            .grad
            .iter()
            .zip(&distill.grad)
            .map(|(m, d)| (1.0 - a) * m + a * d)
            .collect(),
    })
}
