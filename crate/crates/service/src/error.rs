use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    /// Well-formed request that does not fit the model (size, channels).
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            ApiError::BadRequest(_) => "bad_request",
            ApiError::NotFound(_) => "not_found",
            ApiError::Conflict(_) => "conflict",
            ApiError::Unprocessable(_) => "unprocessable",
            ApiError::Internal(_) => "internal",
        }
    }
}

impl From<askpaint_core::Error> for ApiError {
    fn from(e: askpaint_core::Error) -> Self {
        use askpaint_core::Error as E;
        match e {
            E::Validation(_) | E::Image(_) => ApiError::BadRequest(e.to_string()),
            E::Config(_) => ApiError::Unprocessable(e.to_string()),
            E::State(_) => ApiError::Conflict(e.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.code(), "message": self.to_string() } });
        (self.status(), Json(body)).into_response()
    }
}

/// Startup and configuration failures.
#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("configuration error in {key}: {message}")]
    Config { key: String, message: String },
    #[error("cannot load checkpoint {path}: {source}")]
    Checkpoint {
        path: String,
        #[source]
        source: askpaint_core::Error,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
