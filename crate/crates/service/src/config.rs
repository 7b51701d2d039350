use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

pub const ENV_PORT: &str = "ASKPAINT_PORT";
pub const ENV_CHECKPOINT_DIR: &str = "ASKPAINT_CHECKPOINT_DIR";
pub const ENV_SESSION_TTL: &str = "ASKPAINT_SESSION_TTL_SECS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    /// Every `*.ckpt` file here is served under its file stem.
    pub checkpoint_dir: PathBuf,
    /// Idle sessions older than this are dropped.
    pub session_ttl_secs: u64,
    pub reap_interval_secs: u64,
    /// Keep closed sessions readable (status `closed`) until reaped, instead
    /// of answering 404 right away.
    pub keep_closed_sessions: bool,
    /// Debug only: perturb oracle answers with this Gaussian sigma.
    pub debug_answer_noise_sigma: Option<f64>,
    pub max_body_bytes: usize,
    /// Upper bound on `max_answers` a client may request.
    pub max_answers_limit: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            checkpoint_dir: PathBuf::from("checkpoints"),
            session_ttl_secs: 1800,
            reap_interval_secs: 30,
            keep_closed_sessions: true,
            debug_answer_noise_sigma: None,
            max_body_bytes: 16 * 1024 * 1024,
            max_answers_limit: 64,
        }
    }
}

impl ServiceConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| ServiceError::Config {
            key: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Apply environment overrides for port, checkpoint directory and TTL.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ServiceError> {
        if let Some(v) = lookup(ENV_PORT) {
            self.port = v.parse().map_err(|_| ServiceError::Config {
                key: ENV_PORT.into(),
                message: format!("not a port number: {v:?}"),
            })?;
        }
        if let Some(v) = lookup(ENV_CHECKPOINT_DIR) {
            self.checkpoint_dir = PathBuf::from(v);
        }
        if let Some(v) = lookup(ENV_SESSION_TTL) {
            self.session_ttl_secs = v.parse().map_err(|_| ServiceError::Config {
                key: ENV_SESSION_TTL.into(),
                message: format!("not a number of seconds: {v:?}"),
            })?;
        }
        Ok(())
    }
}
