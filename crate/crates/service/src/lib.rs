//! HTTP service for steering a trained colorizer one answer at a time.
//!
//! A session wraps one episode. The client uploads an image, sees the
//! model's prediction and its question heatmap, and answers either with a
//! color of its choice or with the ground-truth mean under the question.

pub mod api;
pub mod blobs;
pub mod config;
pub mod error;
pub mod registry;
pub mod session;

use std::collections::{HashMap, HashSet};
use std::future::Future;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use askpaint_core::dataset::{decode_png, fit_to};
use askpaint_core::oracle::{compute_answer, perturb_answer, AnswerColor, NoiseConfig, ANSWER_EPSILON};
use askpaint_core::{ColorMode, ColorSpaceSpec, EpisodeState, Rgb8Image};
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::header;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::api::*;
use crate::config::ServiceConfig;
use crate::error::{ApiError, ServiceError};
use crate::registry::{CheckpointInfo, Registry};
use crate::session::{unix_now, Session};

type SessionHandle = Arc<tokio::sync::Mutex<Session>>;

/// Shared server state. Models are read-only; each session has its own
/// FIFO lock so requests to one session apply in arrival order.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    config: ServiceConfig,
    registry: Registry,
    sessions: Mutex<HashMap<String, SessionHandle>>,
    blobs: blobs::BlobStore,
}

impl AppState {
    pub fn new(config: ServiceConfig, registry: Registry) -> Self {
        Self {
            inner: Arc::new(Inner {
                config,
                registry,
                sessions: Mutex::new(HashMap::new()),
                blobs: blobs::BlobStore::default(),
            }),
        }
    }

    pub fn from_config(config: ServiceConfig) -> Result<Self, ServiceError> {
        let registry = Registry::load_dir(&config.checkpoint_dir)?;
        Ok(Self::new(config, registry))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    pub fn session_count(&self) -> usize {
        self.inner.sessions.lock().expect("sessions lock").len()
    }

    pub fn blob_count(&self) -> usize {
        self.inner.blobs.len()
    }

    fn session(&self, id: &str) -> Result<SessionHandle, ApiError> {
        self.inner
            .sessions
            .lock()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("no session {id}")))
    }

    /// Drop sessions idle longer than `ttl`, then blobs no session refers to.
    /// Sessions with a request in flight are never touched.
    pub fn reap(&self, ttl: Duration) -> usize {
        let now = Instant::now();
        let mut sessions = self.inner.sessions.lock().expect("sessions lock");
        let mut busy = false;
        let mut live = HashSet::new();
        let before = sessions.len();
        sessions.retain(|_, handle| match handle.try_lock() {
            Ok(s) => {
                let keep = now.duration_since(s.last_activity) <= ttl;
                if keep {
                    live.extend(s.blobs.iter().flat_map(|(a, b)| [a.clone(), b.clone()]));
                }
                keep
            }
            Err(_) => {
                busy = true;
                true
            }
        });
        let removed = before - sessions.len();
        drop(sessions);
        if !busy {
            self.inner.blobs.retain(&live);
        }
        removed
    }
}

fn decode_b64_png(field: &str, data: &str) -> Result<Rgb8Image, ApiError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(data.trim())
        .map_err(|e| ApiError::BadRequest(format!("{field}: invalid base64: {e}")))?;
    decode_png(&bytes).map_err(|e| ApiError::BadRequest(format!("{field}: {e}")))
}

fn fit(field: &str, img: Rgb8Image, h: usize, w: usize, resize: bool) -> Result<Rgb8Image, ApiError> {
    if (img.height, img.width) == (h, w) {
        Ok(img)
    } else if resize {
        Ok(fit_to(&img, h, w, image_filter()))
    } else {
        Err(ApiError::Unprocessable(format!(
            "{field} is {}x{} but the checkpoint expects {h}x{w}; pass resize=true to fit it",
            img.width, img.height
        )))
    }
}

fn image_filter() -> askpaint_core::dataset::FilterType {
    askpaint_core::dataset::FilterType::Triangle
}

fn parse_color_space(name: &str) -> Result<ColorSpaceSpec, ApiError> {
    match name {
        "lab_ab" => Ok(ColorSpaceSpec::LAB),
        "rgb" => Ok(ColorSpaceSpec::RGB),
        other => Err(ApiError::BadRequest(format!(
            "color_space must be \"lab_ab\" or \"rgb\", got {other:?}"
        ))),
    }
}

fn json_body<T>(body: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    body.map(|Json(v)| v)
        .map_err(|e| ApiError::BadRequest(format!("invalid request body: {}", e.body_text())))
}

async fn run_blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(format!("worker failed: {e}")))
}

async fn create_session(
    State(state): State<AppState>,
    body: Result<Json<CreateSessionRequest>, JsonRejection>,
) -> Result<Json<StepResponse>, ApiError> {
    let req = json_body(body)?;
    let inner = &state.inner;
    let ckpt_id = match &req.checkpoint_id {
        Some(id) => id.clone(),
        None => inner
            .registry
            .default_id()
            .ok_or_else(|| ApiError::NotFound("no checkpoints are loaded".into()))?
            .to_string(),
    };
    let ckpt = inner
        .registry
        .get(&ckpt_id)
        .ok_or_else(|| ApiError::NotFound(format!("unknown checkpoint {ckpt_id:?}")))?;
    let ckpt_space = match ckpt.info.color_mode {
        ColorMode::LabAb => ColorSpaceSpec::LAB,
        ColorMode::Rgb => ColorSpaceSpec::RGB,
    };
    let color_space = match &req.color_space {
        Some(name) => parse_color_space(name)?,
        None => ckpt_space,
    };
    if color_space != ckpt_space {
        return Err(ApiError::Unprocessable(format!(
            "checkpoint {ckpt_id} predicts {:?}, not {:?}",
            ckpt_space.mode, color_space.mode
        )));
    }
    let max_answers = req.max_answers.unwrap_or(ckpt.info.max_answers);
    if max_answers > inner.config.max_answers_limit {
        return Err(ApiError::BadRequest(format!(
            "max_answers = {max_answers} exceeds the limit {}",
            inner.config.max_answers_limit
        )));
    }
    let (h, w) = (ckpt.info.height, ckpt.info.width);
    let image = fit("image_png", decode_b64_png("image_png", &req.image_png)?, h, w, req.resize)?;
    let ground_truth = match &req.ground_truth_png {
        Some(data) => {
            let gt = fit("ground_truth_png", decode_b64_png("ground_truth_png", data)?, h, w, req.resize)?;
            Some(color_space.to_model_space(&gt).target)
        }
        None => None,
    };
    let input = color_space.to_model_space(&image).input;
    let model = ckpt.model.clone();
    let episode = run_blocking(move || -> askpaint_core::Result<EpisodeState> {
        let mut episode = EpisodeState::new(input, color_space, max_answers)?;
        episode.advance(&model, None)?;
        Ok(episode)
    })
    .await??;

    let id = uuid::Uuid::new_v4().simple().to_string();
    let mut session = Session {
        id: id.clone(),
        checkpoint_id: ckpt_id,
        model: ckpt.model.clone(),
        episode,
        color_space,
        ground_truth,
        created_at: unix_now(),
        last_activity: Instant::now(),
        closed: false,
        blobs: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(unix_now()),
    };
    session.render_new_passes(&inner.blobs)?;
    let response = step_response(&session, &inner.blobs, None);
    inner
        .sessions
        .lock()
        .expect("sessions lock")
        .insert(id, Arc::new(tokio::sync::Mutex::new(session)));
    Ok(Json(response))
}

fn step_response(session: &Session, store: &blobs::BlobStore, answer: Option<Vec<f32>>) -> StepResponse {
    let (prediction, question) = session.latest(store);
    StepResponse {
        session_id: session.id.clone(),
        step: session.episode.step(),
        exhausted: session.episode.is_exhausted(),
        status: session.status(),
        prediction,
        question,
        answer,
    }
}

async fn submit_answer(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<AnswerRequest>, JsonRejection>,
) -> Result<Json<StepResponse>, ApiError> {
    let handle = state.session(&id)?;
    let req = json_body(body)?;
    let inner = &state.inner;
    let mut session = handle.lock().await;
    session.ensure_active()?;
    let answer = match req.mode {
        AnswerMode::Custom => {
            if req.ground_truth_png.is_some() {
                return Err(ApiError::BadRequest("ground_truth_png is only accepted in oracle mode".into()));
            }
            let rgb = req
                .color
                .ok_or_else(|| ApiError::BadRequest("custom answers need a color".into()))?;
            let channels = session
                .color_space
                .encode_display_color(rgb)
                .into_iter()
                .map(|v| v as f32)
                .collect();
            AnswerColor::new(channels)?
        }
        AnswerMode::Oracle => {
            if req.color.is_some() {
                return Err(ApiError::BadRequest("oracle answers take no color".into()));
            }
            if let Some(data) = &req.ground_truth_png {
                let (_, h, w) = session.episode.input().chw();
                let gt = fit("ground_truth_png", decode_b64_png("ground_truth_png", data)?, h, w, false)?;
                session.ground_truth = Some(session.color_space.to_model_space(&gt).target);
            }
            let truth = session.ground_truth.as_ref().ok_or_else(|| {
                ApiError::BadRequest("oracle answers need ground truth; attach ground_truth_png".into())
            })?;
            let exact = compute_answer(session.episode.current_question(), truth, ANSWER_EPSILON as f32)?.color;
            match inner.config.debug_answer_noise_sigma {
                Some(sigma) => {
                    let noise = NoiseConfig {
                        enabled: true,
                        sigma,
                        seed: 0,
                    };
                    perturb_answer(&exact, &noise, &mut session.rng)?
                }
                None => exact,
            }
        }
    };
    let model = session.model.clone();
    let mut episode = session.episode.clone();
    let applied = answer.channels.clone();
    let episode = run_blocking(move || episode.advance(&model, Some(&answer)).map(|_| episode)).await??;
    session.episode = episode;
    session.last_activity = Instant::now();
    session.render_new_passes(&inner.blobs)?;
    Ok(Json(step_response(&session, &inner.blobs, Some(applied))))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let handle = state.session(&id)?;
    let mut session = handle.lock().await;
    session.last_activity = Instant::now();
    Ok(Json(session.view()))
}

async fn close_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<CloseResponse>, ApiError> {
    let handle = state.session(&id)?;
    let mut session = handle.lock().await;
    session.closed = true;
    session.last_activity = Instant::now();
    if !state.inner.config.keep_closed_sessions {
        state.inner.sessions.lock().expect("sessions lock").remove(&id);
    }
    Ok(Json(CloseResponse {
        session_id: id,
        status: SessionStatus::Closed,
    }))
}

async fn list_checkpoints(State(state): State<AppState>) -> Json<Vec<CheckpointInfo>> {
    Json(state.inner.registry.list())
}

async fn healthz(State(state): State<AppState>) -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
        sessions: state.session_count(),
        checkpoints: state.inner.registry.len(),
    })
}

async fn get_blob(State(state): State<AppState>, Path(hash): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let bytes = state
        .inner
        .blobs
        .get(&hash)
        .ok_or_else(|| ApiError::NotFound(format!("no blob {hash}")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes))
}

pub fn router(state: AppState) -> Router {
    let limit = state.inner.config.max_body_bytes;
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(close_session))
        .route("/sessions/{id}/answers", post(submit_answer))
        .route("/checkpoints", get(list_checkpoints))
        .route("/healthz", get(healthz))
        .route("/blobs/{hash}", get(get_blob))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Periodically reap idle sessions until the returned handle is aborted.
pub fn spawn_reaper(state: AppState) -> tokio::task::JoinHandle<()> {
    let ttl = Duration::from_secs(state.config().session_ttl_secs);
    let every = Duration::from_secs(state.config().reap_interval_secs.max(1));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        loop {
            tick.tick().await;
            state.reap(ttl);
        }
    })
}

/// Bind and serve until `shutdown` resolves.
pub async fn serve(state: AppState, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), ServiceError> {
    let addr = format!("{}:{}", state.config().host, state.config().port);
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    serve_on(listener, state, shutdown).await
}

pub async fn serve_on(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let reaper = spawn_reaper(state.clone());
    let result = axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await;
    reaper.abort();
    result.map_err(ServiceError::Io)
}
