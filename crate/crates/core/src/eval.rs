//! Evaluation protocols: PSNR per number of answers, question order versus
//! prediction error, and class precision of question heatmaps.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::color::{ColorSpaceSpec, Rgb8Image};
use crate::episode::{rollout, EpisodeState, OracleConfig};
use crate::error::{Error, Result};
use crate::model::ColorizerModel;
use crate::oracle::QuestionMap;
use crate::parallel::{par_map, Execution};
use crate::synth::{Sample, SegmentationMap};
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 100.0;
const PEAK: f64 = 255.0;
/// Questions with less total mass than this are excluded from ratios.
pub const MIN_QUESTION_MASS: f64 = 1e-6;
/// Binarization level of the thresholded precision variant.
pub const PRECISION_THRESHOLD: f32 = 0.5;

/// `10 log10(255² / MSE)` over all pixels and channels, capped at 100 dB.
pub fn psnr(prediction: &Rgb8Image, reference: &Rgb8Image) -> Result<f64> {
    if (prediction.width, prediction.height) != (reference.width, reference.height) {
        return Err(Error::Validation(format!(
            "psnr needs equal sizes, got {}x{} and {}x{}",
            prediction.width, prediction.height, reference.width, reference.height
        )));
    }
    let sq: f64 = prediction
        .pixels
        .iter()
        .zip(&reference.pixels)
        .flat_map(|(a, b)| (0..3).map(move |c| (a[c] as f64 - b[c] as f64).powi(2)))
        .sum();
    let mse = sq / (3 * prediction.pixels.len()).max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (PEAK * PEAK / mse).log10()).min(PSNR_CAP_DB))
}

/// Per-pixel L1 error summed over color channels, `[H*W]` row-major.
pub fn error_map(prediction: &Tensor<f32>, target: &Tensor<f32>) -> Result<Vec<f64>> {
    if prediction.shape() != target.shape() {
        return Err(Error::Validation(format!(
            "error map needs equal shapes, got {:?} and {:?}",
            prediction.shape(),
            target.shape()
        )));
    }
    let (k, h, w) = target.chw();
    let plane = h * w;
    let (p, y) = (prediction.data(), target.data());
    Ok((0..plane)
        .map(|i| (0..k).map(|c| (p[c * plane + i] as f64 - y[c * plane + i] as f64).abs()).sum())
        .collect())
}

/// Question-weighted error: `(Σ E·Q / Σ Q, Σ E·Q)`. `None` when Q has no mass.
pub fn weighted_error(errors: &[f64], question: &QuestionMap) -> Option<(f64, f64)> {
    let q = question.tensor().data();
    assert_eq!(errors.len(), q.len(), "error map / question size mismatch");
    let mass: f64 = q.iter().map(|&v| v as f64).sum();
    if mass < MIN_QUESTION_MASS {
        return None;
    }
    let weighted: f64 = errors.iter().zip(q).map(|(&e, &v)| e * v as f64).sum();
    Some((weighted / mass, weighted))
}

fn precision_of(weights: impl Iterator<Item = f64>, seg: &SegmentationMap) -> Option<f64> {
    let mut per_class: BTreeMap<u32, f64> = BTreeMap::new();
    let mut total = 0.0;
    for (&label, wv) in seg.labels.iter().zip(weights) {
        *per_class.entry(label).or_default() += wv;
        total += wv;
    }
    if total < MIN_QUESTION_MASS {
        return None;
    }
    Some(per_class.values().copied().fold(0.0, f64::max) / total)
}

/// Largest share of the question's mass inside a single label region.
/// `None` for a question without mass.
pub fn class_precision(question: &QuestionMap, seg: &SegmentationMap) -> Result<Option<f64>> {
    check_seg(question, seg)?;
    Ok(precision_of(question.tensor().data().iter().map(|&v| v as f64), seg))
}

/// Precision of the binarized question `q > 0.5`.
pub fn thresholded_class_precision(question: &QuestionMap, seg: &SegmentationMap) -> Result<Option<f64>> {
    check_seg(question, seg)?;
    let w = question
        .tensor()
        .data()
        .iter()
        .map(|&v| if v > PRECISION_THRESHOLD { 1.0 } else { 0.0 });
    Ok(precision_of(w, seg))
}

fn check_seg(question: &QuestionMap, seg: &SegmentationMap) -> Result<()> {
    if (question.height(), question.width()) != (seg.height, seg.width) {
        return Err(Error::Validation(format!(
            "question is {}x{} but segmentation is {}x{}",
            question.height(),
            question.width(),
            seg.height,
            seg.width
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    /// Standard error of the mean (sample std / sqrt(count)).
    pub std_err: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            count: n,
            mean,
            std_err: (var / n as f64).sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Largest number of answers; PSNR is reported for 0..=max_steps.
    pub max_steps: usize,
    /// Questions Q1..Qn used for the order analysis and precision.
    pub num_questions: usize,
    pub color_space: ColorSpaceSpec,
    pub execution: Execution,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_steps: 3,
            num_questions: 3,
            color_space: ColorSpaceSpec::LAB,
            execution: Execution::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrecisionReport {
    /// Mass-weighted precision pooled over every (image, question) pair.
    pub soft: Summary,
    pub thresholded: Summary,
    /// A uniform heatmap on the same images.
    pub uniform_baseline: Summary,
    /// Per-image mean soft precision, in dataset order (NaN when excluded).
    pub per_image: Vec<f64>,
    pub excluded_questions: usize,
    pub excluded_thresholded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub images: usize,
    pub max_steps: usize,
    pub num_questions: usize,
    pub color_space: ColorSpaceSpec,
    pub answer_noise: String,
    pub error_map_source: String,
    pub weighted_error_normalization: String,
    /// Images whose question had no mass, per question index.
    pub excluded_by_question: BTreeMap<usize, usize>,
    pub images_without_segmentation: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Keyed by number of answers.
    pub psnr_by_steps: BTreeMap<usize, Summary>,
    /// Mean of E per image.
    pub global_error_baseline: Summary,
    /// Keyed by question index (1-based): Σ E·Q / Σ Q per image.
    pub weighted_error_by_question: BTreeMap<usize, Summary>,
    /// Σ E·Q per image, without normalization.
    pub weighted_error_unnormalized_by_question: BTreeMap<usize, Summary>,
    pub class_precision: Option<PrecisionReport>,
    pub run_metadata: RunMetadata,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializable report");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

struct ImageResult {
    psnr: Vec<f64>,
    global_error: f64,
    weighted: Vec<Option<(f64, f64)>>,
    soft: Vec<Option<f64>>,
    thresholded: Vec<Option<f64>>,
    uniform: Option<f64>,
}

fn evaluate_image(model: &ColorizerModel, sample: &Sample, opts: &EvalOptions) -> Result<(ImageResult, EpisodeState)> {
    let cs = opts.color_space;
    let (_, state) = rollout(
        model,
        &sample.input,
        Some(&sample.target),
        cs,
        opts.max_steps,
        opts.max_steps,
        &OracleConfig::default(),
    )?;
    let reference = cs.from_model_space(&sample.target, &sample.input)?;
    let psnr = state.prediction_history()[..=opts.max_steps]
        .iter()
        .map(|p| psnr(&cs.from_model_space(p, &sample.input)?, &reference))
        .collect::<Result<Vec<_>>>()?;
    let errors = error_map(&state.prediction_history()[0], &sample.target)?;
    let global_error = errors.iter().sum::<f64>() / errors.len() as f64;
    let questions = &state.question_history()[..opts.num_questions];
    let weighted = questions.iter().map(|q| weighted_error(&errors, q)).collect();
    let (soft, thresholded, uniform) = match &sample.segmentation {
        Some(seg) => {
            let (_, h, w) = sample.input.chw();
            (
                questions.iter().map(|q| class_precision(q, seg)).collect::<Result<Vec<_>>>()?,
                questions
                    .iter()
                    .map(|q| thresholded_class_precision(q, seg))
                    .collect::<Result<Vec<_>>>()?,
                class_precision(&QuestionMap::uniform(h, w, 1.0), seg)?,
            )
        }
        None => (vec![], vec![], None),
    };
    Ok((
        ImageResult {
            psnr,
            global_error,
            weighted,
            soft,
            thresholded,
            uniform,
        },
        state,
    ))
}

/// Run every protocol on `dataset` with one noise-free rollout of
/// `max_steps` answers per image. Prefixes of a rollout are rollouts with
/// fewer answers, so step `n` reads the `n`-th prediction.
pub fn evaluate(model: &ColorizerModel, dataset: &[Sample], opts: &EvalOptions) -> Result<EvalReport> {
    evaluate_with_dump(model, dataset, opts, None)
}

/// As [`evaluate`], additionally writing montages of the first `dump.1` images to `dump.0`.
pub fn evaluate_with_dump(
    model: &ColorizerModel,
    dataset: &[Sample],
    opts: &EvalOptions,
    dump: Option<(&Path, usize)>,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Validation("evaluation dataset is empty".into()));
    }
    if opts.num_questions == 0 || opts.num_questions > opts.max_steps + 1 {
        return Err(Error::Validation(format!(
            "num_questions must lie in 1..={} for max_steps = {}",
            opts.max_steps + 1,
            opts.max_steps
        )));
    }
    let results = par_map(opts.execution, dataset, |_, s| evaluate_image(model, s, opts));
    let mut images = Vec::with_capacity(results.len());
    for (i, r) in results.into_iter().enumerate() {
        let (img, state) = r?;
        if let Some((dir, count)) = dump {
            if i < count {
                crate::render::write_episode_dump(dir, &format!("image_{i:05}"), &state, opts.color_space)?;
            }
        }
        images.push(img);
    }

    let psnr_by_steps = (0..=opts.max_steps)
        .map(|n| (n, Summary::of(&images.iter().map(|r| r.psnr[n]).collect::<Vec<_>>())))
        .collect();
    let global_error_baseline = Summary::of(&images.iter().map(|r| r.global_error).collect::<Vec<_>>());
    let mut weighted_error_by_question = BTreeMap::new();
    let mut unnormalized = BTreeMap::new();
    let mut excluded_by_question = BTreeMap::new();
    for qi in 0..opts.num_questions {
        let vals: Vec<(f64, f64)> = images.iter().filter_map(|r| r.weighted[qi]).collect();
        excluded_by_question.insert(qi + 1, images.len() - vals.len());
        weighted_error_by_question.insert(qi + 1, Summary::of(&vals.iter().map(|v| v.0).collect::<Vec<_>>()));
        unnormalized.insert(qi + 1, Summary::of(&vals.iter().map(|v| v.1).collect::<Vec<_>>()));
    }
    let with_seg: Vec<&ImageResult> = images.iter().filter(|r| r.uniform.is_some()).collect();
    let class_precision = (!with_seg.is_empty()).then(|| {
        let soft: Vec<f64> = with_seg.iter().flat_map(|r| r.soft.iter().flatten().copied()).collect();
        let thr: Vec<f64> = with_seg.iter().flat_map(|r| r.thresholded.iter().flatten().copied()).collect();
        let total = with_seg.len() * opts.num_questions;
        PrecisionReport {
            excluded_questions: total - soft.len(),
            excluded_thresholded: total - thr.len(),
            soft: Summary::of(&soft),
            thresholded: Summary::of(&thr),
            uniform_baseline: Summary::of(&with_seg.iter().filter_map(|r| r.uniform).collect::<Vec<_>>()),
            per_image: images
                .iter()
                .map(|r| {
                    let v: Vec<f64> = r.soft.iter().flatten().copied().collect();
                    if v.is_empty() {
                        f64::NAN
                    } else {
                        v.iter().sum::<f64>() / v.len() as f64
                    }
                })
                .collect(),
        }
    });
    Ok(EvalReport {
        psnr_by_steps,
        global_error_baseline,
        weighted_error_by_question,
        weighted_error_unnormalized_by_question: unnormalized,
        class_precision,
        run_metadata: RunMetadata {
            images: images.len(),
            max_steps: opts.max_steps,
            num_questions: opts.num_questions,
            color_space: opts.color_space,
            answer_noise: "disabled".into(),
            error_map_source: "this model's zero-answer prediction (no separate baseline model)".into(),
            weighted_error_normalization: "sum(E*Q)/sum(Q); unnormalized sum(E*Q) reported separately".into(),
            excluded_by_question,
            images_without_segmentation: images.len() - with_seg.len(),
        },
    })
}

/// PSNR summary for 0..=max_steps answers.
pub fn eval_hint_curve(
    model: &ColorizerModel,
    dataset: &[Sample],
    max_steps: usize,
    color_space: ColorSpaceSpec,
) -> Result<BTreeMap<usize, Summary>> {
    let opts = EvalOptions {
        max_steps,
        num_questions: 1,
        color_space,
        ..Default::default()
    };
    Ok(evaluate(model, dataset, &opts)?.psnr_by_steps)
}
