//! On-disk state of the iterative context protocol between CLI invocations.
//!
//! A context directory holds `state.toml`, the last exported mosaic with its sidecar,
//! and every imported edited view under `views/`. Camera ids index the dataset's train
//! split, the same numbering the service uses.

use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use serde::{Deserialize, Serialize};
use triplane_edit::context::{EditHistory, EditedView, Provenance};
use triplane_edit::io::{atomic_write, load_rgb8, save_rgb8};
use triplane_edit::{Camera, Error};

pub const STATE_FILE: &str = "state.toml";
const VIEWS_DIR: &str = "views";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredView {
    pub camera_id: usize,
    pub epoch: usize,
    /// Path relative to the context directory.
    pub file: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextState {
    pub session: String,
    pub seed: u64,
    pub epochs: usize,
    pub samples: usize,
    /// Epoch of the next grid to export.
    pub next_epoch: usize,
    /// Provenance of the exported grid awaiting its edit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending: Option<Provenance>,
    #[serde(default)]
    pub views: Vec<StoredView>,
}

impl ContextState {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join(STATE_FILE)
    }

    pub fn exists(dir: &Path) -> bool {
        Self::path(dir).is_file()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = Self::path(dir);
        let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
            _ => Error::Io(e),
        })?;
        toml::from_str(&text).map_err(|e| {
            Error::Corrupt {
                format: "context state",
                reason: e.message().to_string(),
            }
            .into()
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self).context("encoding context state")?;
        atomic_write(&Self::path(dir), text.as_bytes())?;
        Ok(())
    }

    pub fn done(&self) -> bool {
        self.next_epoch >= self.epochs
    }

    /// Decodes every stored view in edit order.
    pub fn history(&self, dir: &Path, cameras: &[Camera]) -> Result<EditHistory> {
        let mut history = EditHistory::default();
        for v in &self.views {
            let camera = cameras
                .get(v.camera_id)
                .ok_or_else(|| Error::Context(format!("stored view names train camera {} of {}", v.camera_id, cameras.len())))?;
            let (w, h, rgb) = load_rgb8(&dir.join(&v.file))?;
            if (w, h) != (camera.width, camera.height) {
                return Err(Error::Context(format!(
                    "stored view {} is {w}x{h}, camera {} is {}x{}",
                    v.file.display(),
                    v.camera_id,
                    camera.width,
                    camera.height
                ))
                .into());
            }
            history.record(EditedView {
                camera_id: v.camera_id,
                epoch: v.epoch,
                rgb,
            });
        }
        Ok(history)
    }

    /// Writes `view` under `views/` and records it, replacing an earlier edit of the
    /// same camera in place.
    pub fn store(&mut self, dir: &Path, width: u32, height: u32, view: &EditedView) -> Result<()> {
        let file = PathBuf::from(VIEWS_DIR).join(format!("e{}_cam{:03}.png", view.epoch, view.camera_id));
        save_rgb8(&dir.join(&file), width, height, &view.rgb)?;
        let entry = StoredView {
            camera_id: view.camera_id,
            epoch: view.epoch,
            file,
        };
        match self.views.iter_mut().find(|v| v.camera_id == view.camera_id) {
            Some(v) => {
                if v.file != entry.file {
                    std::fs::remove_file(dir.join(&v.file)).ok();
                }
                *v = entry;
            }
            None => self.views.push(entry),
        }
        Ok(())
    }
}
