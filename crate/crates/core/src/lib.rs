//! Colorization by asking: a recurrent image-to-image network that, at
//! each step, emits a soft question heatmap, receives the mean color of the
//! asked region, and refines its prediction.

pub mod autodiff;
pub mod checkpoint;
pub mod color;
pub mod dataset;
pub mod episode;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod oracle;
pub mod parallel;
pub mod render;
pub mod synth;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use color::{ColorMode, ColorSpaceSpec, Rgb8Image};
pub use episode::{rollout, rollout_with, AnswerSource, EpisodeState, OracleAnswers, OracleConfig, ScriptedAnswers};
pub use error::{CheckpointError, Error, Result};
pub use model::{ColorizerModel, ModelConfig};
pub use objective::{reg_loss, smooth_loss, total_loss, LossBreakdown};
pub use oracle::{broadcast_hint, compute_answer, perturb_answer, AnswerColor, HintImage, NoiseConfig, QuestionMap};
pub use parallel::Execution;
pub use synth::{generate_synthetic_batch, Sample, SegmentationMap, SyntheticSceneSpec};
pub use tensor::Tensor;
