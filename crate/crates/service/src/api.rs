//! Request and response bodies.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    /// Base64 PNG. Only its lightness is shown to the model.
    pub image_png: String,
    pub checkpoint_id: Option<String>,
    /// Defaults to the checkpoint's training horizon minus one.
    pub max_answers: Option<usize>,
    /// `lab_ab` or `rgb`; must agree with the checkpoint.
    pub color_space: Option<String>,
    /// Base64 PNG enabling oracle answers.
    pub ground_truth_png: Option<String>,
    /// Center-crop and resize images that differ from the checkpoint size.
    #[serde(default)]
    pub resize: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMode {
    Custom,
    Oracle,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnswerRequest {
    pub mode: AnswerMode,
    /// 8-bit sRGB; required for `custom`, rejected for `oracle`.
    pub color: Option<[u8; 3]>,
    /// Attach ground truth now if the session was created without it.
    pub ground_truth_png: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    /// SHA-256 of the PNG bytes, hex.
    pub hash: String,
    pub url: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub png_base64: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionView {
    pub heatmap: ImageRef,
    /// Row-major heatmap values in [0, 1].
    pub values: Vec<Vec<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Exhausted,
    Closed,
}

/// Result of creating a session or answering a question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResponse {
    pub session_id: String,
    /// Answers given so far.
    pub step: usize,
    pub exhausted: bool,
    pub status: SessionStatus,
    pub prediction: ImageRef,
    /// The pending question; absent once no more answers are accepted.
    pub question: Option<QuestionView>,
    /// The model-space answer just applied.
    pub answer: Option<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub checkpoint_id: String,
    pub status: SessionStatus,
    pub step: usize,
    pub max_answers: usize,
    pub color_space: String,
    pub has_ground_truth: bool,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub predictions: Vec<ImageRef>,
    pub questions: Vec<QuestionView>,
    /// Model-space answers, one per step.
    pub answers: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloseResponse {
    pub session_id: String,
    pub status: SessionStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub sessions: usize,
    pub checkpoints: usize,
}
