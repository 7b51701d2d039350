//! The answer function: the question-weighted mean ground-truth color of
//! the requested region, optional answer noise, and the hint broadcast that
//! turns a single color back into an image-sized input.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Denominator guard for the masked mean; an all-zero question is reachable
/// at initialization.
pub const ANSWER_EPSILON: f64 = 1e-8;

/// Lower / upper bound of normalized model-space color channels.
pub const COLOR_RANGE: (f64, f64) = (-1.0, 1.0);

/// Soft question heatmap, stored as a `[1, H, W]` tensor with entries in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct QuestionMap<T: Scalar = f32>(Tensor<T>);

impl<T: Scalar> QuestionMap<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        let shape = values.shape();
        let values = match shape.len() {
            2 => {
                let (h, w) = (shape[0], shape[1]);
                values.reshape(&[1, h, w])?
            }
            3 if shape[0] == 1 => values,
            _ => {
                return Err(Error::Validation(format!(
                    "question map must be HxW or 1xHxW, got {:?}",
                    shape
                )))
            }
        };
        if let Some(v) = values
            .data()
            .iter()
            .find(|v| !v.is_finite() || **v < T::zero() || **v > T::one())
        {
            return Err(Error::Validation(format!(
                "question value {:?} outside [0, 1]",
                v
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Tensor::zeros(&[1, height, width]))
    }

    pub fn uniform(height: usize, width: usize, value: T) -> Self {
        Self(Tensor::full(&[1, height, width], value))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.0.at3(0, i, j)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn mass(&self) -> T {
        self.0.sum()
    }
}

/// One answer color in normalized model space, one entry per color channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerColor<T = f32> {
    pub channels: Vec<T>,
}

impl<T: Scalar> AnswerColor<T> {
    pub fn new(channels: Vec<T>) -> Result<Self> {
        if channels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("answer color must be finite".into()));
        }
        Ok(Self { channels })
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.channels.len()], self.channels.clone()).expect("1-d")
    }
}

/// Broadcast hint image `[K, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HintImage<T: Scalar = f32>(Tensor<T>);

impl<T: Scalar> HintImage<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self(Tensor::zeros(&[channels, height, width]))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub enabled: bool,
    /// Standard deviation in normalized color units.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            sigma: 0.05,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn is_active(&self) -> bool {
        self.enabled && self.sigma > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Validation(format!(
                "noise.sigma must be a finite value >= 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Answer plus a flag set when the question carried (almost) no mass.
#[derive(Clone, Debug, PartialEq)]
pub struct Answer<T = f32> {
    pub color: AnswerColor<T>,
    pub degenerate_mask: bool,
}

/// Masked average of `target_colors: [K, H, W]` under `question`:
/// `a_k = Σ q_ij · y_kij / (Σ q_ij + epsilon)`.
pub fn compute_answer<T: Scalar>(
    question: &QuestionMap<T>,
    target_colors: &Tensor<T>,
    epsilon: T,
) -> Result<Answer<T>> {
    let (k, h, w) = target_colors.chw();
    if (h, w) != (question.height(), question.width()) {
        return Err(Error::Validation(format!(
            "question is {}x{} but target is {}x{}",
            question.height(),
            question.width(),
            h,
            w
        )));
    }
    let plane = h * w;
    let q = question.tensor().data();
    let mass: T = q.iter().copied().sum();
    let denom = mass + epsilon;
    let channels = (0..k)
        .map(|c| {
            let ych = &target_colors.data()[c * plane..(c + 1) * plane];
            let num: T = q.iter().zip(ych).map(|(&a, &b)| a * b).sum();
            num / denom
        })
        .collect();
    Ok(Answer {
        color: AnswerColor { channels },
        degenerate_mask: mass <= epsilon,
    })
}

/// Add i.i.d. Gaussian noise to each channel, then clamp to the color range.
pub fn perturb_answer<T: Scalar, R: Rng + ?Sized>(
    answer: &AnswerColor<T>,
    noise: &NoiseConfig,
    rng: &mut R,
) -> Result<AnswerColor<T>> {
    noise.validate()?;
    if !noise.is_active() {
        return Ok(answer.clone());
    }
    let normal = Normal::new(0.0, noise.sigma).expect("sigma validated");
    let lo = T::from_f64_lossy(COLOR_RANGE.0);
    let hi = T::from_f64_lossy(COLOR_RANGE.1);
    let channels = answer
        .channels
        .iter()
        .map(|&v| (v + T::from_f64_lossy(normal.sample(rng))).max(lo).min(hi))
        .collect();
    Ok(AnswerColor { channels })
}

/// `hint[k, i, j] = q[i, j] · answer[k]`.
pub fn broadcast_hint<T: Scalar>(question: &QuestionMap<T>, answer: &AnswerColor<T>) -> HintImage<T> {
    let (h, w) = (question.height(), question.width());
    let q = question.tensor().data();
    let mut data = Vec::with_capacity(answer.len() * h * w);
    for &a in &answer.channels {
        data.extend(q.iter().map(|&qv| qv * a));
    }
    HintImage(Tensor::from_vec(&[answer.len(), h, w], data).expect("hint shape"))
}
