//! The asking loop: alternate forward passes with answers to the model's
//! latest question.
//!
//! Timeline: pass 0 consumes zero question/hint/prediction and yields
//! `(ŷ_1, q_1)`. Every later pass first receives an answer `a_t` to the
//! pending question `q_t`, broadcasts it to `c_t = q_t ⊙ a_t`, and consumes
//! `(x, q_t, c_t, ŷ_t)`. A rollout with `n` answers therefore makes `n + 1`
//! forward passes. Earlier questions and hints are not fed back; the model
//! has to carry them through its own prediction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::ColorSpaceSpec;
use crate::error::{Error, Result};
use crate::model::{ColorizerModel, INPUT_IMAGE_CHANNELS};
use crate::oracle::{
    broadcast_hint, compute_answer, perturb_answer, AnswerColor, HintImage, NoiseConfig, QuestionMap,
    ANSWER_EPSILON,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeState {
    input: Tensor<f32>,
    color_channels: usize,
    max_answers: usize,
    forward_passes: usize,
    current_question: QuestionMap,
    current_hint: HintImage,
    current_prediction: Tensor<f32>,
    question_history: Vec<QuestionMap>,
    answer_history: Vec<AnswerColor>,
    prediction_history: Vec<Tensor<f32>>,
}

impl EpisodeState {
    /// Fresh episode with all-zero question, hint and prediction.
    pub fn new(input: Tensor<f32>, color_space: ColorSpaceSpec, max_answers: usize) -> Result<Self> {
        let shape = input.shape().to_vec();
        if shape.len() != 3 || shape[0] != INPUT_IMAGE_CHANNELS {
            return Err(Error::Validation(format!(
                "episode input must be [1, H, W], got {:?}",
                shape
            )));
        }
        if !input.is_finite() {
            return Err(Error::Validation("episode input contains non-finite values".into()));
        }
        let (h, w) = (shape[1], shape[2]);
        let k = color_space.color_channels();
        Ok(Self {
            input,
            color_channels: k,
            max_answers,
            forward_passes: 0,
            current_question: QuestionMap::zeros(h, w),
            current_hint: HintImage::zeros(k, h, w),
            current_prediction: Tensor::zeros(&[k, h, w]),
            question_history: Vec::new(),
            answer_history: Vec::new(),
            prediction_history: Vec::new(),
        })
    }

    pub fn input(&self) -> &Tensor<f32> {
        &self.input
    }

    pub fn max_answers(&self) -> usize {
        self.max_answers
    }

    pub fn forward_passes(&self) -> usize {
        self.forward_passes
    }

    /// Number of answers consumed so far (0 before and right after pass 0).
    pub fn step(&self) -> usize {
        self.answer_history.len()
    }

    /// True once `max_answers + 1` forward passes have run.
    pub fn is_exhausted(&self) -> bool {
        self.forward_passes == self.max_answers + 1
    }

    /// True when a question has been asked and may be answered.
    pub fn awaiting_answer(&self) -> bool {
        self.forward_passes >= 1 && !self.is_exhausted()
    }

    pub fn current_question(&self) -> &QuestionMap {
        &self.current_question
    }

    pub fn current_hint(&self) -> &HintImage {
        &self.current_hint
    }

    pub fn current_prediction(&self) -> &Tensor<f32> {
        &self.current_prediction
    }

    pub fn question_history(&self) -> &[QuestionMap] {
        &self.question_history
    }

    pub fn answer_history(&self) -> &[AnswerColor] {
        &self.answer_history
    }

    pub fn prediction_history(&self) -> &[Tensor<f32>] {
        &self.prediction_history
    }

    pub fn color_channels(&self) -> usize {
        self.color_channels
    }

    /// One forward pass. `answer` must be given for every pass after the first
    /// and must be absent for the first.
    pub fn advance(&mut self, model: &ColorizerModel, answer: Option<&AnswerColor>) -> Result<()> {
        let cfg = model.config();
        let (_, h, w) = self.input.chw();
        if cfg.color_channels != self.color_channels || (cfg.height, cfg.width) != (h, w) {
            return Err(Error::Config(format!(
                "model expects {}x{} with {} color channels, episode has {}x{} with {}",
                cfg.height, cfg.width, cfg.color_channels, h, w, self.color_channels
            )));
        }
        if self.is_exhausted() {
            return Err(Error::State(format!(
                "episode exhausted after {} forward passes",
                self.forward_passes
            )));
        }
        let hint = match (self.forward_passes, answer) {
            (0, None) => self.current_hint.clone(),
            (0, Some(_)) => {
                return Err(Error::State("no question has been asked yet".into()));
            }
            (_, None) => {
                return Err(Error::State(
                    "the pending question needs an answer before the next pass".into(),
                ));
            }
            (_, Some(a)) => {
                if a.len() != self.color_channels {
                    return Err(Error::Config(format!(
                        "answer has {} channels, episode expects {}",
                        a.len(),
                        self.color_channels
                    )));
                }
                if a.channels.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Validation("answer color must be finite".into()));
                }
                broadcast_hint(&self.current_question, a)
            }
        };
        let out = model.forward(&self.input, &self.current_question, &hint, &self.current_prediction)?;
        if let Some(a) = answer {
            self.answer_history.push(a.clone());
        }
        self.current_hint = hint;
        self.current_question = out.question.clone();
        self.current_prediction = out.prediction.clone();
        self.question_history.push(out.question);
        self.prediction_history.push(out.prediction);
        self.forward_passes += 1;
        Ok(())
    }
}

/// Supplies the answer to each pending question of a rollout.
pub trait AnswerSource {
    fn answer(&mut self, state: &EpisodeState) -> Result<AnswerColor>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub noise: NoiseConfig,
    pub epsilon: f64,
}

impl Default for OracleConfig {
    /// Noise off: the setting for evaluation and steering.
    fn default() -> Self {
        Self {
            noise: NoiseConfig::disabled(),
            epsilon: ANSWER_EPSILON,
        }
    }
}

/// Answers from ground truth via the masked mean, optionally perturbed.
pub struct OracleAnswers<'a> {
    target: &'a Tensor<f32>,
    config: OracleConfig,
    rng: ChaCha8Rng,
}

impl<'a> OracleAnswers<'a> {
    pub fn new(target: &'a Tensor<f32>, config: OracleConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(config.noise.seed);
        Self { target, config, rng }
    }
}

impl AnswerSource for OracleAnswers<'_> {
    fn answer(&mut self, state: &EpisodeState) -> Result<AnswerColor> {
        let ans = compute_answer(state.current_question(), self.target, self.config.epsilon as f32)?;
        perturb_answer(&ans.color, &self.config.noise, &mut self.rng)
    }
}

/// Fixed answers in order, e.g. a human's sequence replayed offline.
pub struct ScriptedAnswers {
    answers: std::vec::IntoIter<AnswerColor>,
}

impl ScriptedAnswers {
    pub fn new(answers: Vec<AnswerColor>) -> Self {
        Self {
            answers: answers.into_iter(),
        }
    }
}

impl AnswerSource for ScriptedAnswers {
    fn answer(&mut self, _state: &EpisodeState) -> Result<AnswerColor> {
        self.answers
            .next()
            .ok_or_else(|| Error::Validation("scripted answers exhausted".into()))
    }
}

/// `n_answers + 1` forward passes with answers drawn from `source`.
pub fn rollout_with<S: AnswerSource + ?Sized>(
    model: &ColorizerModel,
    input: &Tensor<f32>,
    color_space: ColorSpaceSpec,
    n_answers: usize,
    max_answers: usize,
    source: &mut S,
) -> Result<EpisodeState> {
    if n_answers > max_answers {
        return Err(Error::Validation(format!(
            "n_answers = {n_answers} exceeds max_answers = {max_answers}"
        )));
    }
    let mut state = EpisodeState::new(input.clone(), color_space, max_answers)?;
    state.advance(model, None)?;
    for _ in 0..n_answers {
        let answer = source.answer(&state)?;
        state.advance(model, Some(&answer))?;
    }
    Ok(state)
}

/// Rollout answered by the ground-truth oracle. `target` is only read when
/// `n_answers > 0`.
pub fn rollout(
    model: &ColorizerModel,
    input: &Tensor<f32>,
    target: Option<&Tensor<f32>>,
    color_space: ColorSpaceSpec,
    n_answers: usize,
    max_answers: usize,
    oracle: &OracleConfig,
) -> Result<(Tensor<f32>, EpisodeState)> {
    let state = match target {
        Some(y) => {
            let mut source = OracleAnswers::new(y, oracle.clone());
            rollout_with(model, input, color_space, n_answers, max_answers, &mut source)?
        }
        None if n_answers == 0 => {
            rollout_with(model, input, color_space, 0, max_answers, &mut ScriptedAnswers::new(vec![]))?
        }
        None => {
            return Err(Error::Validation(
                "ground truth is required for oracle answers".into(),
            ))
        }
    };
    Ok((state.current_prediction().clone(), state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model(k: usize) -> ColorizerModel {
        ColorizerModel::new(ModelConfig {
            height: 8,
            width: 8,
            color_channels: k,
            depth: 2,
            base_width: 4,
            seed: 5,
        })
        .unwrap()
    }

    fn image() -> (Tensor<f32>, Tensor<f32>) {
        let x = Tensor::from_vec(&[1, 8, 8], (0..64).map(|v| ((v * 7) % 13) as f32 / 13.0 - 0.5).collect()).unwrap();
        let y = Tensor::from_vec(&[2, 8, 8], (0..128).map(|v| ((v * 5) % 11) as f32 / 11.0 - 0.5).collect()).unwrap();
        (x, y)
    }

    #[test]
    fn init_is_all_zero() {
        let s = EpisodeState::new(Tensor::full(&[1, 2, 2], 0.3), ColorSpaceSpec::LAB, 4).unwrap();
        assert_eq!(s.step(), 0);
        assert_eq!(s.forward_passes(), 0);
        assert!(s.current_question().tensor().data().iter().all(|&v| v == 0.0));
        assert!(s.current_prediction().data().iter().all(|&v| v == 0.0));
        assert_eq!(s.current_prediction().shape(), &[2, 2, 2]);
        assert_eq!(s.current_hint().tensor().shape(), &[2, 2, 2]);
        assert!(s.question_history().is_empty());
        let rgb = EpisodeState::new(Tensor::zeros(&[1, 32, 32]), ColorSpaceSpec::RGB, 4).unwrap();
        assert_eq!(rgb.current_prediction().shape(), &[3, 32, 32]);
        assert!(EpisodeState::new(Tensor::full(&[1, 2, 2], f32::INFINITY), ColorSpaceSpec::LAB, 4).is_err());
        assert!(EpisodeState::new(Tensor::zeros(&[2, 2, 2]), ColorSpaceSpec::LAB, 4).is_err());
    }

    #[test]
    fn zero_budget_allows_exactly_one_pass() {
        let m = model(2);
        let (x, _) = image();
        let mut s = EpisodeState::new(x, ColorSpaceSpec::LAB, 0).unwrap();
        s.advance(&m, None).unwrap();
        assert!(s.is_exhausted());
        let a = AnswerColor::new(vec![0.1, 0.1]).unwrap();
        assert!(matches!(s.advance(&m, Some(&a)), Err(Error::State(_))));
    }

    #[test]
    fn advance_protocol_errors_leave_state_unchanged() {
        let m = model(2);
        let (x, _) = image();
        let mut s = EpisodeState::new(x, ColorSpaceSpec::LAB, 2).unwrap();
        let a = AnswerColor::new(vec![0.1, 0.1]).unwrap();
        assert!(s.advance(&m, Some(&a)).is_err());
        s.advance(&m, None).unwrap();
        let before = s.clone();
        assert!(matches!(s.advance(&m, None), Err(Error::State(_))));
        let wrong = AnswerColor::new(vec![0.1, 0.1, 0.1]).unwrap();
        assert!(matches!(s.advance(&m, Some(&wrong)), Err(Error::Config(_))));
        assert!(matches!(s.advance(&model(3), Some(&a)), Err(Error::Config(_))));
        assert_eq!(s, before);
    }

    #[test]
    fn hint_is_question_times_answer() {
        let m = model(2);
        let (x, _) = image();
        let mut s = EpisodeState::new(x, ColorSpaceSpec::LAB, 3).unwrap();
        s.advance(&m, None).unwrap();
        let q = s.current_question().clone();
        let a = AnswerColor::new(vec![0.4, -0.3]).unwrap();
        s.advance(&m, Some(&a)).unwrap();
        let c = s.current_hint().tensor();
        for k in 0..2 {
            for i in 0..8 {
                for j in 0..8 {
                    assert_eq!(c.at3(k, i, j), q.get(i, j) * a.channels[k]);
                }
            }
        }
    }

    #[test]
    fn rollout_counts_and_composition() {
        let m = model(2);
        let (x, y) = image();
        let oracle = OracleConfig::default();
        let (final0, s0) = rollout(&m, &x, None, ColorSpaceSpec::LAB, 0, 4, &oracle).unwrap();
        assert_eq!(s0.forward_passes(), 1);
        assert!(s0.answer_history().is_empty());
        assert_eq!(&final0, s0.current_prediction());

        let (final3, s3) = rollout(&m, &x, Some(&y), ColorSpaceSpec::LAB, 3, 4, &oracle).unwrap();
        assert_eq!(s3.forward_passes(), 4);
        assert_eq!(s3.answer_history().len(), 3);
        assert_eq!(s3.question_history().len(), 4);
        assert_eq!(s3.prediction_history().len(), 4);

        // explicit step-by-step composition
        let mut manual = EpisodeState::new(x.clone(), ColorSpaceSpec::LAB, 4).unwrap();
        manual.advance(&m, None).unwrap();
        for _ in 0..3 {
            let a = compute_answer(manual.current_question(), &y, ANSWER_EPSILON as f32).unwrap().color;
            manual.advance(&m, Some(&a)).unwrap();
        }
        assert_eq!(manual.current_prediction(), &final3);
        assert_eq!(manual, s3);
        // prefix property
        assert_eq!(s3.prediction_history()[0], final0);
    }

    #[test]
    fn rollout_validation() {
        let m = model(2);
        let (x, _) = image();
        let oracle = OracleConfig::default();
        assert!(matches!(
            rollout(&m, &x, None, ColorSpaceSpec::LAB, 1, 4, &oracle),
            Err(Error::Validation(_))
        ));
        let y = Tensor::zeros(&[2, 8, 8]);
        assert!(matches!(
            rollout(&m, &x, Some(&y), ColorSpaceSpec::LAB, 5, 4, &oracle),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn rollout_is_deterministic() {
        let m = model(2);
        let (x, y) = image();
        let noisy = OracleConfig {
            noise: NoiseConfig { enabled: true, sigma: 0.05, seed: 3 },
            ..Default::default()
        };
        let a = rollout(&m, &x, Some(&y), ColorSpaceSpec::LAB, 3, 3, &noisy).unwrap();
        let b = rollout(&m, &x, Some(&y), ColorSpaceSpec::LAB, 3, 3, &noisy).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn history_is_append_only() {
        let m = model(2);
        let (x, y) = image();
        let mut s = EpisodeState::new(x, ColorSpaceSpec::LAB, 3).unwrap();
        s.advance(&m, None).unwrap();
        let mut seen: Vec<Tensor<f32>> = s.prediction_history().to_vec();
        for _ in 0..3 {
            let a = compute_answer(s.current_question(), &y, 1e-8).unwrap().color;
            s.advance(&m, Some(&a)).unwrap();
            assert_eq!(&s.prediction_history()[..seen.len()], &seen[..]);
            seen = s.prediction_history().to_vec();
        }
    }
}
