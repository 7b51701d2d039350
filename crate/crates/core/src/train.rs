//! Training: random hint counts, oracle-answered episodes unrolled on a
//! tape, Adam updates.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::color::ColorSpaceSpec;
use crate::error::{Error, Result};
use crate::model::{ColorizerModel, ModelConfig};
use crate::objective::{total_loss_on_tape, validate_lambda, LossBreakdown, DEFAULT_LAMBDA_SEG};
use crate::oracle::{NoiseConfig, ANSWER_EPSILON, COLOR_RANGE};
use crate::parallel::{par_map, Execution};
use crate::synth::{generate_synthetic_batch, Sample, SyntheticSceneSpec};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// T: forward passes in the longest episode. Hint counts are drawn
    /// uniformly from `0..T`, so at most `T - 1` questions get answered.
    pub horizon: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub lambda_seg: f64,
    /// Answer noise during training. `noise.seed` is unused: noise is drawn
    /// from the per-sample stream.
    pub noise: NoiseConfig,
    pub steps: u64,
    pub seed: u64,
    /// Steps between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    /// Let the loss gradient flow through the oracle answer into the question.
    pub answer_gradient: bool,
    /// Override the random hint count (sanity runs).
    pub fixed_n_hint: Option<usize>,
    pub execution: Execution,
    /// Batches prepared ahead of the optimizer.
    pub queue_depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            horizon: 4,
            batch_size: 8,
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            lambda_seg: DEFAULT_LAMBDA_SEG,
            noise: NoiseConfig::default(),
            steps: 20_000,
            seed: 0,
            checkpoint_interval: 1000,
            answer_gradient: true,
            fixed_n_hint: None,
            execution: Execution::default(),
            queue_depth: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, why: String| Err(Error::Validation(format!("train.{key}: {why}")));
        if self.horizon == 0 {
            return fail("horizon", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate", format!("must be finite and >= 0, got {}", self.learning_rate));
        }
        for (key, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(key, format!("must lie in [0, 1), got {b}"));
            }
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return fail("adam_epsilon", "must be positive".into());
        }
        if self.queue_depth == 0 {
            return fail("queue_depth", "must be at least 1".into());
        }
        if let Some(n) = self.fixed_n_hint {
            if n >= self.horizon {
                return fail("fixed_n_hint", format!("{n} is outside 0..{}", self.horizon));
            }
        }
        validate_lambda(self.lambda_seg).map_err(|e| Error::Validation(format!("train.lambda_seg: {e}")))?;
        self.noise.validate().map_err(|e| Error::Validation(format!("train.noise: {e}")))
    }

    /// Maximum answers per episode.
    pub fn max_answers(&self) -> usize {
        self.horizon - 1
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scene: SyntheticSceneSpec,
    pub color_space: ColorSpaceSpec,
}

impl Default for ColorSpaceSpec {
    fn default() -> Self {
        ColorSpaceSpec::LAB
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.scene.validate()?;
        if self.model.color_channels != self.color_space.color_channels() {
            return Err(Error::Config(format!(
                "model.color_channels = {} but color_space needs {}",
                self.model.color_channels,
                self.color_space.color_channels()
            )));
        }
        if (self.model.height, self.model.width) != (self.scene.height, self.scene.width) {
            return Err(Error::Config(format!(
                "model is {}x{} but scene.height/width is {}x{}",
                self.model.height, self.model.width, self.scene.height, self.scene.width
            )));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the random stream owned by one sample of one step.
pub fn sample_seed(seed: u64, step: u64, index: usize) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ step) ^ index as u64)
}

/// Hint count for one sample: uniform over `0..T`.
pub fn sample_n_hint<R: Rng + ?Sized>(config: &TrainConfig, rng: &mut R) -> usize {
    match config.fixed_n_hint {
        Some(n) => n,
        None => rng.gen_range(0..config.horizon),
    }
}

/// Result of unrolling one training episode.
#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    pub n_hint: usize,
    pub loss: LossBreakdown,
    pub prediction: Tensor<f32>,
    /// Every emitted question, `n_hint + 1` of them.
    pub questions: Vec<Tensor<f32>>,
    /// One gradient per model parameter.
    pub gradients: Vec<Tensor<f32>>,
}

/// Unroll `n_hint` oracle-answered steps on a tape and backpropagate the
/// loss of the final prediction through the whole episode.
pub fn episode_gradients<R: Rng + ?Sized>(
    model: &ColorizerModel,
    sample: &Sample,
    n_hint: usize,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<EpisodeOutcome> {
    let cfg = model.config();
    let (k, h, w) = (cfg.color_channels, cfg.height, cfg.width);
    let mut tape = Tape::<f32>::new();
    let params = model.register(&mut tape, true);
    let x = tape.constant(sample.input.clone());
    let y = tape.constant(sample.target.clone());
    let mut q = tape.constant(Tensor::zeros(&[1, h, w]));
    let mut c = tape.constant(Tensor::zeros(&[k, h, w]));
    let mut p = tape.constant(Tensor::zeros(&[k, h, w]));
    let normal = config
        .noise
        .is_active()
        .then(|| Normal::new(0.0, config.noise.sigma).expect("validated sigma"));
    let mut questions = Vec::with_capacity(n_hint + 1);
    for pass in 0..=n_hint {
        if pass > 0 {
            let mut a = tape.masked_mean(q, y, ANSWER_EPSILON as f32);
            if !config.answer_gradient {
                a = tape.detach(a);
            }
            if let Some(normal) = &normal {
                let noise: Vec<f32> = (0..k).map(|_| normal.sample(rng) as f32).collect();
                let noise = tape.constant(Tensor::from_vec(&[k], noise)?);
                let noisy = tape.add(a, noise);
                a = tape.clamp(noisy, COLOR_RANGE.0 as f32, COLOR_RANGE.1 as f32);
            }
            c = tape.broadcast(q, a);
        }
        let (p_next, q_next) = model.forward_on_tape(&mut tape, &params, x, q, c, p)?;
        p = p_next;
        q = q_next;
        questions.push(q);
    }
    let (total, reg, seg) = total_loss_on_tape(&mut tape, p, y, &questions, config.lambda_seg);
    let loss = LossBreakdown::new(
        tape.value(reg).item() as f64,
        tape.value(seg).item() as f64,
        config.lambda_seg,
    );
    let total_value = tape.value(total).item();
    let mut grads = tape.backward(total);
    let gradients = params
        .iter()
        .zip(model.parameters())
        .map(|(&v, param)| grads.take(v).unwrap_or_else(|| Tensor::zeros(param.value.shape())))
        .collect();
    let loss = LossBreakdown {
        total: total_value as f64,
        ..loss
    };
    Ok(EpisodeOutcome {
        n_hint,
        loss,
        prediction: tape.value(p).clone(),
        questions: questions.iter().map(|&v| tape.value(v).clone()).collect(),
        gradients,
    })
}

#[derive(Clone, Debug)]
struct Adam {
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    t: i32,
}

impl Adam {
    fn new(model: &ColorizerModel) -> Self {
        let zeros: Vec<Tensor<f32>> = model
            .parameters()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn update(&mut self, model: &mut ColorizerModel, grads: &[Tensor<f32>], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let step = cfg.learning_rate * (1.0 - b2.powi(self.t)).sqrt() / (1.0 - b1.powi(self.t));
        let (b1, b2, step, eps) = (b1 as f32, b2 as f32, step as f32, cfg.adam_epsilon as f32);
        for (((param, g), m), v) in model
            .parameters_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let (w, g, m, v) = (param.value.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                w[i] -= step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

/// One row of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub total: f64,
    pub reg_loss: f64,
    pub seg_loss: f64,
    pub mean_n_hint: f64,
}

/// Model plus optimizer state.
pub struct Trainer {
    model: ColorizerModel,
    config: TrainConfig,
    adam: Adam,
    step: u64,
}

impl Trainer {
    pub fn new(model: ColorizerModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(&model);
        Ok(Self {
            model,
            config,
            adam,
            step: 0,
        })
    }

    pub fn model(&self) -> &ColorizerModel {
        &self.model
    }

    pub fn into_model(self) -> ColorizerModel {
        self.model
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// One optimizer update on `batch`. Each sample draws its own hint count
    /// and answer noise from a stream keyed by (seed, step, index).
    pub fn train_step(&mut self, batch: &[Sample]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let (step, cfg, model) = (self.step, &self.config, &self.model);
        let outcomes = par_map(cfg.execution, batch, |i, sample| {
            let seed = sample_seed(cfg.seed, step, i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n_hint = sample_n_hint(cfg, &mut rng);
            (seed, episode_gradients(model, sample, n_hint, cfg, &mut rng))
        });
        let inv = 1.0 / batch.len() as f32;
        let mut grads: Option<Vec<Tensor<f32>>> = None;
        let (mut reg, mut seg, mut hints) = (0.0, 0.0, 0.0);
        for (seed, outcome) in outcomes {
            let outcome = outcome?;
            if !outcome.loss.is_finite() || outcome.gradients.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step,
                    sample_seed: seed,
                    detail: format!("{:?}", outcome.loss),
                });
            }
            reg += outcome.loss.reg_loss;
            seg += outcome.loss.seg_loss;
            hints += outcome.n_hint as f64;
            match &mut grads {
                None => grads = Some(outcome.gradients),
                Some(acc) => acc.iter_mut().zip(&outcome.gradients).for_each(|(a, g)| a.add_assign(g)),
            }
        }
        let grads: Vec<Tensor<f32>> = grads.expect("non-empty batch").iter().map(|g| g.scale(inv)).collect();
        self.adam.update(&mut self.model, &grads, &self.config);
        self.step += 1;
        let n = batch.len() as f64;
        let loss = LossBreakdown::new(reg / n, seg / n, self.config.lambda_seg);
        Ok(StepReport {
            step,
            total: loss.total,
            reg_loss: loss.reg_loss,
            seg_loss: loss.seg_loss,
            mean_n_hint: hints / n,
        })
    }
}

/// Supplies the batch for a given step. Batches must depend only on the
/// step so that prefetching cannot change the data order.
pub trait BatchSource: Send {
    fn batch(&mut self, step: u64, batch_size: usize) -> Result<Vec<Sample>>;
}

pub struct SyntheticSource {
    pub spec: SyntheticSceneSpec,
    pub color_space: ColorSpaceSpec,
    pub seed: u64,
}

impl BatchSource for SyntheticSource {
    fn batch(&mut self, step: u64, batch_size: usize) -> Result<Vec<Sample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(self.seed ^ 0xDA7A, step, usize::MAX));
        generate_synthetic_batch(&self.spec, self.color_space, batch_size, &mut rng)
    }
}

/// Uniform sampling with replacement from a fixed set.
pub struct FixedSource {
    pub samples: Vec<Sample>,
    pub seed: u64,
}

impl BatchSource for FixedSource {
    fn batch(&mut self, step: u64, batch_size: usize) -> Result<Vec<Sample>> {
        if self.samples.is_empty() {
            return Err(Error::Validation("dataset is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(self.seed ^ 0xDA7A, step, usize::MAX));
        Ok((0..batch_size)
            .map(|_| self.samples[rng.gen_range(0..self.samples.len())].clone())
            .collect())
    }
}

pub struct TrainOutcome {
    pub model: ColorizerModel,
    pub log: Vec<StepReport>,
    pub final_checkpoint: Option<PathBuf>,
}

pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const FINAL_CHECKPOINT_FILE: &str = "model.ckpt";

/// Train for `experiment.train.steps` steps. Batches are produced on a
/// separate thread through a bounded queue; updates stay sequential.
/// With `out_dir`, writes the loss log, periodic checkpoints under
/// `checkpoints/` and the final `model.ckpt`.
pub fn train_loop(
    experiment: &ExperimentConfig,
    model: ColorizerModel,
    source: Box<dyn BatchSource>,
    out_dir: Option<&Path>,
    on_step: &mut dyn FnMut(&StepReport),
) -> Result<TrainOutcome> {
    experiment.validate()?;
    if model.config() != &experiment.model {
        return Err(Error::Config("model does not match experiment.model".into()));
    }
    let cfg = &experiment.train;
    let config_json = serde_json::to_value(experiment).expect("serializable config");
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOSS_LOG_FILE);
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            Some((csv::Writer::from_writer(file), path))
        }
        None => None,
    };
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut log = Vec::with_capacity(cfg.steps as usize);
    let steps = cfg.steps;
    let batch_size = cfg.batch_size;

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel::<Result<Vec<Sample>>>(cfg.queue_depth);
        let mut source = source;
        scope.spawn(move || {
            for step in 0..steps {
                let batch = source.batch(step, batch_size);
                let failed = batch.is_err();
                if tx.send(batch).is_err() || failed {
                    break;
                }
            }
        });
        for step in 0..steps {
            let batch = rx
                .recv()
                .map_err(|_| Error::Generation("batch producer stopped".into()))??;
            let report = trainer.train_step(&batch)?;
            if let Some((writer, path)) = &mut log_file {
                writer.serialize(&report).map_err(|e| Error::io(path.as_path(), e.into()))?;
            }
            on_step(&report);
            log.push(report);
            let done = step + 1;
            if let Some(dir) = out_dir {
                if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 && done < steps {
                    Checkpoint::from_model(trainer.model(), config_json.clone(), done)
                        .save(&dir.join("checkpoints").join(format!("step_{done:07}.ckpt")))?;
                }
            }
        }
        Ok(())
    })?;

    let mut final_checkpoint = None;
    if let Some((mut writer, path)) = log_file {
        writer.flush().map_err(|e| Error::io(&path, e))?;
        let dir = out_dir.expect("log implies out_dir");
        let ckpt = dir.join(FINAL_CHECKPOINT_FILE);
        Checkpoint::from_model(trainer.model(), config_json, trainer.steps_done()).save(&ckpt)?;
        final_checkpoint = Some(ckpt);
    }
    Ok(TrainOutcome {
        model: trainer.into_model(),
        log,
        final_checkpoint,
    })
}
