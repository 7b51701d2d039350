use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use askpaint_core::{Checkpoint, ColorMode, ColorizerModel};
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

/// Answers per episode when a checkpoint does not record its training horizon.
pub const FALLBACK_MAX_ANSWERS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub color_channels: usize,
    pub color_mode: ColorMode,
    pub depth: usize,
    pub base_width: usize,
    pub step_count: u64,
    /// Default episode length for new sessions.
    pub max_answers: usize,
}

pub struct LoadedCheckpoint {
    pub info: CheckpointInfo,
    pub model: Arc<ColorizerModel>,
}

/// Read-only set of models shared by all sessions.
#[derive(Default)]
pub struct Registry {
    entries: BTreeMap<String, LoadedCheckpoint>,
}

impl Registry {
    pub fn load_dir(dir: &Path) -> Result<Self, ServiceError> {
        let mut registry = Registry::default();
        if !dir.is_dir() {
            return Ok(registry);
        }
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
            .collect();
        paths.sort();
        for path in paths {
            let ckpt = Checkpoint::load(&path).map_err(|source| ServiceError::Checkpoint {
                path: path.display().to_string(),
                source,
            })?;
            let id = path.file_stem().expect("file stem").to_string_lossy().into_owned();
            registry.insert_checkpoint(&id, &ckpt).map_err(|source| ServiceError::Checkpoint {
                path: path.display().to_string(),
                source,
            })?;
        }
        Ok(registry)
    }

    pub fn insert_checkpoint(&mut self, id: &str, ckpt: &Checkpoint) -> askpaint_core::Result<()> {
        let horizon = ckpt.train_config.pointer("/train/horizon").and_then(|v| v.as_u64());
        let max_answers = horizon.map(|h| h.saturating_sub(1) as usize).unwrap_or(FALLBACK_MAX_ANSWERS);
        self.insert(id, ckpt.to_model()?, ckpt.step_count, max_answers);
        Ok(())
    }

    pub fn insert(&mut self, id: &str, model: ColorizerModel, step_count: u64, max_answers: usize) {
        let cfg = model.config().clone();
        let info = CheckpointInfo {
            id: id.to_string(),
            height: cfg.height,
            width: cfg.width,
            color_channels: cfg.color_channels,
            color_mode: if cfg.color_channels == 3 { ColorMode::Rgb } else { ColorMode::LabAb },
            depth: cfg.depth,
            base_width: cfg.base_width,
            step_count,
            max_answers,
        };
        self.entries.insert(
            id.to_string(),
            LoadedCheckpoint {
                info,
                model: Arc::new(model),
            },
        );
    }

    pub fn get(&self, id: &str) -> Option<&LoadedCheckpoint> {
        self.entries.get(id)
    }

    /// The checkpoint used when a request names none: the first by id.
    pub fn default_id(&self) -> Option<&str> {
        self.entries.keys().next().map(String::as_str)
    }

    pub fn list(&self) -> Vec<CheckpointInfo> {
        self.entries.values().map(|e| e.info.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
