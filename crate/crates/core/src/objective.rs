//! Training objective: squared-error regression on the final prediction plus
//! a total-variation penalty on every emitted question.

use serde::{Deserialize, Serialize};

use crate::autodiff::{total_variation_value, Tape, Var};
use crate::error::{Error, Result};
use crate::oracle::QuestionMap;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_LAMBDA_SEG: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reg_loss: f64,
    pub seg_loss: f64,
    pub lambda_seg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(reg_loss: f64, seg_loss: f64, lambda_seg: f64) -> Self {
        Self {
            reg_loss,
            seg_loss,
            lambda_seg,
            total: reg_loss + lambda_seg * seg_loss,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.reg_loss.is_finite() && self.seg_loss.is_finite() && self.total.is_finite()
    }
}

/// Mean over pixels of the channel-summed squared error,
/// `(1 / HW) Σ_ij Σ_k (ŷ − y)²`.
pub fn reg_loss<T: Scalar>(prediction: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if prediction.shape() != target.shape() || prediction.shape().len() != 3 {
        return Err(Error::Validation(format!(
            "prediction {:?} and target {:?} must be equal [K, H, W] shapes",
            prediction.shape(),
            target.shape()
        )));
    }
    let (_, h, w) = prediction.chw();
    let s: T = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(s / T::from_usize(h * w).unwrap())
}

/// Anisotropic total variation of each map divided by `HW`, summed over maps.
pub fn smooth_loss<T: Scalar>(questions: &[QuestionMap<T>]) -> Result<T> {
    let Some(first) = questions.first() else {
        return Ok(T::zero());
    };
    let (h, w) = (first.height(), first.width());
    let mut total = T::zero();
    for q in questions {
        if (q.height(), q.width()) != (h, w) {
            return Err(Error::Validation(format!(
                "question maps differ in shape: {}x{} vs {}x{}",
                q.height(),
                q.width(),
                h,
                w
            )));
        }
        total = total + total_variation_value(q.tensor()) / T::from_usize(h * w).unwrap();
    }
    Ok(total)
}

pub fn total_loss<T: Scalar>(
    prediction: &Tensor<T>,
    target: &Tensor<T>,
    questions: &[QuestionMap<T>],
    lambda_seg: f64,
) -> Result<LossBreakdown> {
    validate_lambda(lambda_seg)?;
    let reg = reg_loss(prediction, target)?.to_f64().unwrap();
    let seg = smooth_loss(questions)?.to_f64().unwrap();
    Ok(LossBreakdown::new(reg, seg, lambda_seg))
}

pub fn validate_lambda(lambda_seg: f64) -> Result<()> {
    if !(lambda_seg >= 0.0 && lambda_seg.is_finite()) {
        return Err(Error::Validation(format!(
            "lambda_seg must be finite and >= 0, got {lambda_seg}"
        )));
    }
    Ok(())
}

/// Differentiable counterpart of [`total_loss`] on a tape.
///
/// Returns `(total, reg, seg)` vars. `questions` are `[1, H, W]` vars.
pub fn total_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    prediction: Var,
    target: Var,
    questions: &[Var],
    lambda_seg: f64,
) -> (Var, Var, Var) {
    let (_, h, w) = tape.value(prediction).chw();
    let inv_pixels = T::one() / T::from_usize(h * w).unwrap();
    let reg = tape.squared_error(prediction, target, inv_pixels);
    let terms: Vec<Var> = questions
        .iter()
        .map(|&q| tape.total_variation(q, inv_pixels))
        .collect();
    let seg = tape.sum_scalars(&terms);
    let weighted = tape.scale(seg, T::from_f64_lossy(lambda_seg));
    let total = tape.add(reg, weighted);
    (total, reg, seg)
}
