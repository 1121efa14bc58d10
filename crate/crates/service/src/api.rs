//! Request and response bodies. Images travel as base64 PNG strings; requests reject
//! unknown fields.

use serde::{Deserialize, Serialize};
use triplane_edit::io::Split;
use triplane_edit::select::DeletionMode;
use triplane_edit::train::IterationMetrics;
use triplane_edit::{Camera, EditKind, Patch};

use crate::error::ErrorBody;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSummary {
    pub index: usize,
    pub split: Split,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub frame: usize,
    pub patch: Patch,
    pub f_bar: Vec<f32>,
    pub thr: f32,
    pub snapshot_version: u64,
    /// 1st and 99th percentile of the query distance over occupied space.
    pub f_distance_range: Option<[f64; 2]>,
    pub baked_version: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextSummary {
    pub epoch: Option<usize>,
    pub epochs: usize,
    pub edited_views: Vec<usize>,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneResponse {
    pub scene: String,
    pub session: String,
    pub frames: Vec<FrameSummary>,
    pub bounds: [[f64; 3]; 2],
    pub sem_dim: usize,
    pub active_version: u64,
    pub versions: Vec<u64>,
    pub f_distance_range: Option<[f64; 2]>,
    pub selection: Option<SelectionSummary>,
    pub layers: usize,
    pub context: Option<ContextSummary>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderChannel {
    Rgb,
    Depth,
    Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    #[serde(default)]
    pub frame: Option<usize>,
    #[serde(default)]
    pub camera: Option<Camera>,
    /// RGB is always returned; list `depth` or `mask` for the extra planes.
    #[serde(default)]
    pub channels: Vec<RenderChannel>,
    #[serde(default = "yes")]
    pub use_stack: bool,
    #[serde(default)]
    pub deletion: Option<DeletionMode>,
    #[serde(default)]
    pub samples: Option<usize>,
    /// Published snapshot to render; the active one when absent.
    #[serde(default)]
    pub version: Option<u64>,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderResponse {
    pub version: u64,
    pub width: u32,
    pub height: u32,
    pub rgb_png: String,
    /// 16-bit PNG, linear between `near` and `far`.
    pub depth_png: Option<String>,
    pub mask_png: Option<String>,
    pub near: f64,
    pub far: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectRequest {
    pub frame: usize,
    pub patch: Patch,
    /// Squared feature-distance threshold; half the query norm squared when absent.
    #[serde(default)]
    pub thr: Option<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdRequest {
    pub thr: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectResponse {
    pub selection: SelectionSummary,
    pub width: u32,
    pub height: u32,
    pub mask_png: String,
    pub mask_pixels: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportRequest {
    /// Start over at epoch 0, discarding the edit history.
    #[serde(default)]
    pub restart: bool,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceBody {
    pub session: String,
    pub field_version: u64,
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportResponse {
    pub provenance: ProvenanceBody,
    pub epoch: usize,
    pub epochs: usize,
    pub cameras: [usize; 4],
    pub roles: [String; 4],
    pub width: u32,
    pub height: u32,
    pub rgb_png: String,
    pub mask_png: String,
    pub depth_png: String,
    /// Text sidecar as the command line writes it.
    pub sidecar: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportRequest {
    pub provenance: ProvenanceBody,
    pub mosaic_png: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NextStep {
    /// Train on the stored views, then export the next epoch.
    NextEpoch,
    /// Every epoch is edited; train on the stored views.
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportResponse {
    pub recorded: Vec<usize>,
    pub edited_views: usize,
    pub epoch: usize,
    pub next: NextStep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Pretrain,
    EditResidual,
    Finetune,
    BakeMask,
}

impl JobKind {
    pub fn trains(self) -> bool {
        self != JobKind::BakeMask
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobRequest {
    pub kind: JobKind,
    /// Training config fields laid over the regime preset.
    #[serde(default)]
    pub config: Option<serde_json::Value>,
    /// Pretrain only: start from a fresh field with these settings.
    #[serde(default)]
    pub field: Option<serde_json::Value>,
    /// Bake only: grid cells per axis.
    #[serde(default)]
    pub resolution: Option<usize>,
    /// Edit only: layer label.
    #[serde(default)]
    pub label: Option<String>,
    /// Edit only: residual input, features or color.
    #[serde(default)]
    pub edit_kind: Option<EditKind>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed | JobState::Cancelled)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: u64,
    pub kind: JobKind,
    pub state: JobState,
    pub iteration: usize,
    pub total: usize,
    pub losses: Option<IterationMetrics>,
    pub result: Option<serde_json::Value>,
    pub error: Option<ErrorBody>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobCreated {
    pub id: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub id: u64,
    pub kind: EditKind,
    pub label: String,
    pub enabled: bool,
    pub bytes: usize,
    pub created_at: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToggleResponse {
    pub id: u64,
    pub enabled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReorderRequest {
    pub order: Vec<u64>,
}
