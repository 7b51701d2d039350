//! Encoder–decoder colorizer. Each forward pass consumes the channel stack
//! `(x, q_t, c_t, ŷ_t)` and emits K color channels plus one sigmoid question
//! channel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::oracle::{HintImage, QuestionMap};
use crate::tensor::{Scalar, Tensor};

const LEAKY_SLOPE: f64 = 0.1;

/// Grayscale or outline input: one channel.
pub const INPUT_IMAGE_CHANNELS: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// K: 2 for a\*b\*, 3 for RGB.
    pub color_channels: usize,
    /// Number of 2× downsamplings.
    pub depth: usize,
    /// Channel width of the first level; doubles per level.
    pub base_width: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            color_channels: 2,
            depth: 3,
            base_width: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// `Kx + 1 + K + K`: image, question, hint, previous prediction.
    pub fn input_channels(&self) -> usize {
        INPUT_IMAGE_CHANNELS + 1 + 2 * self.color_channels
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.color_channels, 2 | 3) {
            return Err(Error::Config(format!(
                "model.color_channels must be 2 or 3, got {}",
                self.color_channels
            )));
        }
        if self.base_width == 0 {
            return Err(Error::Config("model.base_width must be positive".into()));
        }
        let div = 1usize << self.depth;
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(div) || !self.width.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "model image size {}x{} must be positive and divisible by 2^depth = {}",
                self.height, self.width, div
            )));
        }
        Ok(())
    }

    fn level_width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Convolution layers in parameter order.
    pub fn layers(&self) -> Vec<ConvSpec> {
        let mut layers = Vec::new();
        let mut push = |name: String, cin, cout, kernel| {
            layers.push(ConvSpec {
                name,
                in_channels: cin,
                out_channels: cout,
                kernel,
            })
        };
        for level in 0..=self.depth {
            let cin = if level == 0 {
                self.input_channels()
            } else {
                self.level_width(level - 1)
            };
            let w = self.level_width(level);
            push(format!("enc{level}.conv0"), cin, w, 3);
            push(format!("enc{level}.conv1"), w, w, 3);
        }
        for level in (0..self.depth).rev() {
            let w = self.level_width(level);
            push(format!("dec{level}.conv0"), self.level_width(level + 1) + w, w, 3);
            push(format!("dec{level}.conv1"), w, w, 3);
        }
        push("head".into(), self.base_width, self.color_channels + 1, 1);
        layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(ConvSpec::parameter_count).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvSpec {
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn parameter_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColorizerModel {
    config: ModelConfig,
    params: Vec<Parameter>,
}

/// Output of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `[K, H, W]` in the normalized color range.
    pub prediction: Tensor<f32>,
    pub question: QuestionMap<f32>,
}

impl ColorizerModel {
    /// Build with seeded He-uniform weights and zero biases.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let mut params = Vec::new();
        for layer in config.layers() {
            let shape = layer.weight_shape();
            let fan_in = (layer.in_channels * layer.kernel * layer.kernel) as f64;
            let bound = gain * (3.0 / fan_in).sqrt();
            let n = shape.iter().product();
            let w: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect();
            params.push(Parameter {
                name: format!("{}.weight", layer.name),
                value: Tensor::from_vec(&shape, w)?,
            });
            params.push(Parameter {
                name: format!("{}.bias", layer.name),
                value: Tensor::zeros(&[layer.out_channels]),
            });
        }
        Ok(Self { config, params })
    }

    /// Rebuild from named arrays, checking every name and shape against `config`.
    pub fn from_parameters(config: ModelConfig, arrays: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        let template = Self::new(config.clone())?;
        if arrays.len() != template.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter arrays, got {}",
                template.params.len(),
                arrays.len()
            )));
        }
        let mut params = Vec::with_capacity(arrays.len());
        for (expected, (name, value)) in template.params.iter().zip(arrays) {
            if expected.name != name {
                return Err(Error::Config(format!(
                    "parameter `{}` found where `{}` was expected",
                    name, expected.name
                )));
            }
            if expected.value.shape() != value.shape() {
                return Err(crate::error::CheckpointError::ShapeMismatch {
                    name,
                    found: value.shape().to_vec(),
                    expected: expected.value.shape().to_vec(),
                }
                .into());
            }
            params.push(Parameter { name, value });
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Register every parameter on `tape`, as differentiable leaves or constants.
    pub fn register<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let value = p.value.cast::<T>();
                if trainable {
                    tape.leaf(value)
                } else {
                    tape.constant(value)
                }
            })
            .collect()
    }

    /// One forward pass on a tape. Returns `(prediction [K,H,W], question [1,H,W])`.
    pub fn forward_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        input: Var,
        question: Var,
        hint: Var,
        prediction: Var,
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let k = cfg.color_channels;
        let (h, w) = (cfg.height, cfg.width);
        for (var, channels, what) in [
            (input, INPUT_IMAGE_CHANNELS, "input"),
            (question, 1, "question"),
            (hint, k, "hint"),
            (prediction, k, "prediction"),
        ] {
            let shape = tape.value(var).shape();
            if shape != [channels, h, w] {
                return Err(Error::Config(format!(
                    "{what} has shape {:?}, model expects [{channels}, {h}, {w}]",
                    shape
                )));
            }
        }
        let slope = T::from_f64_lossy(LEAKY_SLOPE);
        let mut next = params.chunks(2);
        let mut conv = |tape: &mut Tape<T>, x: Var, activate: bool| {
            let pair = next.next().expect("layer parameters");
            let y = tape.conv2d(x, pair[0], pair[1]);
            if activate {
                tape.leaky_relu(y, slope)
            } else {
                y
            }
        };

        let mut hcur = tape.concat(&[input, question, hint, prediction]);
        let mut skips = Vec::with_capacity(cfg.depth);
        for level in 0..=cfg.depth {
            hcur = conv(tape, hcur, true);
            hcur = conv(tape, hcur, true);
            if level < cfg.depth {
                skips.push(hcur);
                hcur = tape.avg_pool2(hcur);
            }
        }
        for level in (0..cfg.depth).rev() {
            let up = tape.upsample2(hcur);
            hcur = tape.concat(&[up, skips[level]]);
            hcur = conv(tape, hcur, true);
            hcur = conv(tape, hcur, true);
        }
        let out = conv(tape, hcur, false);
        let color = tape.channels(out, 0, k);
        let color = tape.tanh(color);
        let q = tape.channels(out, k, 1);
        let q = tape.sigmoid(q);
        Ok((color, q))
    }

    /// Inference forward pass `ŷ_{t+1}, q_{t+1} = f(x, q_t, c_t, ŷ_t)`.
    pub fn forward(
        &self,
        input: &Tensor<f32>,
        question: &QuestionMap<f32>,
        hint: &HintImage<f32>,
        prediction: &Tensor<f32>,
    ) -> Result<ForwardOutput> {
        for (t, what) in [
            (input, "input"),
            (hint.tensor(), "hint"),
            (prediction, "prediction"),
        ] {
            if !t.is_finite() {
                return Err(Error::Validation(format!("{what} contains non-finite values")));
            }
        }
        let mut tape = Tape::<f32>::new();
        let params = self.register(&mut tape, false);
        let x = tape.constant(input.clone());
        let q = tape.constant(question.tensor().clone());
        let c = tape.constant(hint.tensor().clone());
        let y = tape.constant(prediction.clone());
        let (pred, q_next) = self.forward_on_tape(&mut tape, &params, x, q, c, y)?;
        Ok(ForwardOutput {
            prediction: tape.value(pred).clone(),
            question: QuestionMap::new(tape.value(q_next).clone())?,
        })
    }
}
