use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use askpaint_core::render::heatmap_png;
use askpaint_core::{ColorSpaceSpec, ColorizerModel, EpisodeState, QuestionMap, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::api::{ImageRef, QuestionView, SessionStatus, SessionView};
use crate::blobs::{image_ref, BlobStore};
use crate::error::ApiError;

pub struct Session {
    pub id: String,
    pub checkpoint_id: String,
    pub model: Arc<ColorizerModel>,
    pub episode: EpisodeState,
    pub color_space: ColorSpaceSpec,
    pub ground_truth: Option<Tensor<f32>>,
    pub created_at: u64,
    pub last_activity: Instant,
    pub closed: bool,
    /// Blob hashes per forward pass: (prediction, question heatmap).
    pub blobs: Vec<(String, String)>,
    pub rng: ChaCha8Rng,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn question_values(q: &QuestionMap) -> Vec<Vec<f32>> {
    q.tensor().data().chunks(q.width()).map(<[f32]>::to_vec).collect()
}

impl Session {
    pub fn status(&self) -> SessionStatus {
        if self.closed {
            SessionStatus::Closed
        } else if self.episode.is_exhausted() {
            SessionStatus::Exhausted
        } else {
            SessionStatus::Active
        }
    }

    pub fn ensure_active(&self) -> Result<(), ApiError> {
        match self.status() {
            SessionStatus::Active => Ok(()),
            SessionStatus::Exhausted => Err(ApiError::Conflict(format!(
                "session {} is exhausted after {} answers",
                self.id,
                self.episode.step()
            ))),
            SessionStatus::Closed => Err(ApiError::Conflict(format!("session {} is closed", self.id))),
        }
    }

    /// Store PNGs for any forward pass not yet rendered.
    pub fn render_new_passes(&mut self, store: &BlobStore) -> Result<(), ApiError> {
        for t in self.blobs.len()..self.episode.forward_passes() {
            let pred = self
                .color_space
                .from_model_space(&self.episode.prediction_history()[t], self.episode.input())?;
            let pred_hash = store.put(askpaint_core::dataset::encode_png(&pred));
            let q_hash = store.put(heatmap_png(&self.episode.question_history()[t]));
            self.blobs.push((pred_hash, q_hash));
        }
        Ok(())
    }

    fn question_view(&self, t: usize, store: Option<&BlobStore>) -> QuestionView {
        let q = &self.episode.question_history()[t];
        let hash = &self.blobs[t].1;
        let bytes = store.and_then(|s| s.get(hash));
        QuestionView {
            heatmap: image_ref(hash, bytes.as_deref()),
            values: question_values(q),
        }
    }

    fn prediction_ref(&self, t: usize, store: Option<&BlobStore>) -> ImageRef {
        let hash = &self.blobs[t].0;
        image_ref(hash, store.and_then(|s| s.get(hash)).as_deref())
    }

    /// Latest prediction and, while answers are still accepted, the pending question.
    pub fn latest(&self, store: &BlobStore) -> (ImageRef, Option<QuestionView>) {
        let t = self.episode.forward_passes() - 1;
        let question = (self.status() == SessionStatus::Active).then(|| self.question_view(t, Some(store)));
        (self.prediction_ref(t, Some(store)), question)
    }

    pub fn view(&self) -> SessionView {
        let passes = self.episode.forward_passes();
        SessionView {
            session_id: self.id.clone(),
            checkpoint_id: self.checkpoint_id.clone(),
            status: self.status(),
            step: self.episode.step(),
            max_answers: self.episode.max_answers(),
            color_space: match self.color_space.mode {
                askpaint_core::ColorMode::LabAb => "lab_ab".into(),
                askpaint_core::ColorMode::Rgb => "rgb".into(),
            },
            has_ground_truth: self.ground_truth.is_some(),
            created_at: self.created_at,
            predictions: (0..passes).map(|t| self.prediction_ref(t, None)).collect(),
            questions: (0..passes).map(|t| self.question_view(t, None)).collect(),
            answers: self
                .episode
                .answer_history()
                .iter()
                .map(|a| a.channels.clone())
                .collect(),
        }
    }
}
