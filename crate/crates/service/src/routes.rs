use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{FromRequest, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::Value;
use triplane_edit::context::{ContextConfig, ContextSession, Provenance};
use triplane_edit::io::{decode_rgb8, encode_depth16, encode_mask, encode_rgb8, write_checkpoint};
use triplane_edit::pipeline::field_config_for;
use triplane_edit::render::{render_view, Channels, RenderOptions};
use triplane_edit::select::{feature_distances, percentile_range, project_mask, query_mean_feature, Deletion, PROJECTION_THRESHOLD};
use triplane_edit::train::{Regime, TrainConfig, TrainView};
use triplane_edit::{Camera, FieldConfig, SelectionMask, TriPlaneField};

use crate::api::*;
use crate::error::{ApiError, ApiResult};
use crate::jobs::{self, Job, Plan};
use crate::state::{AppState, SelectionState};

/// JSON body whose every rejection is a 422 with a machine-readable code.
#[derive(FromRequest)]
#[from_request(via(axum::Json), rejection(ApiError))]
pub struct ApiJson<T>(pub T);

impl<T: serde::Serialize> IntoResponse for ApiJson<T> {
    fn into_response(self) -> Response {
        Json(self.0).into_response()
    }
}

/// Runs CPU-heavy work off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "worker_panic", e.to_string()))?
}

fn b64(bytes: Vec<u8>) -> String {
    B64.encode(bytes)
}

fn parse_id(raw: &str, what: &str) -> ApiResult<u64> {
    raw.parse()
        .map_err(|_| ApiError::invalid(format!("{what} id must be an unsigned integer, got `{raw}`")))
}

fn frame_camera(st: &AppState, index: usize) -> ApiResult<Camera> {
    st.inner
        .dataset
        .frames
        .iter()
        .find(|f| f.index == index)
        .map(|f| f.camera)
        .ok_or_else(|| ApiError::not_found("unknown_frame", format!("no frame with index {index}")))
}

fn range_of(field: &TriPlaneField, f_bar: &[f32], probes: usize) -> Option<[f64; 2]> {
    percentile_range(&feature_distances(field, f_bar, probes, 0), 1.0, 99.0).map(|(lo, hi)| [lo, hi])
}

pub async fn scene(State(st): State<AppState>) -> Json<SceneResponse> {
    let data = &st.inner.dataset;
    let b = data.bounds();
    let (sem_dim, active, versions, selection, layers) = {
        let s = st.inner.session();
        (
            s.active_field().sem_dim(),
            s.active,
            s.snapshots.keys().copied().collect(),
            s.selection.as_ref().map(|x| x.summary()),
            s.stack.len(),
        )
    };
    let context = st.inner.context().as_ref().map(|c| ContextSummary {
        epoch: c.current.as_ref().map(|g| g.epoch),
        epochs: c.config.epochs,
        edited_views: c.history.views.iter().map(|v| v.camera_id).collect(),
        done: c.done,
    });
    Json(SceneResponse {
        scene: data.name().to_string(),
        session: st.inner.config.session.clone(),
        frames: data
            .frames
            .iter()
            .map(|f| FrameSummary {
                index: f.index,
                split: f.split,
                width: f.camera.width,
                height: f.camera.height,
            })
            .collect(),
        bounds: [[b.min.x, b.min.y, b.min.z], [b.max.x, b.max.y, b.max.z]],
        sem_dim,
        active_version: active,
        versions,
        f_distance_range: selection.as_ref().and_then(|s| s.f_distance_range),
        selection,
        layers,
        context,
    })
}

pub async fn render(State(st): State<AppState>, ApiJson(req): ApiJson<RenderRequest>) -> ApiResult<Json<RenderResponse>> {
    let camera = match (req.frame, req.camera) {
        (Some(i), None) => frame_camera(&st, i)?,
        (None, Some(c)) => {
            c.validate()?;
            c
        }
        _ => return Err(ApiError::invalid("give exactly one of `frame` or `camera`")),
    };
    let samples = req.samples.unwrap_or(st.inner.config.samples);
    if samples == 0 {
        return Err(ApiError::invalid("samples must be positive"));
    }
    let want_depth = req.channels.contains(&RenderChannel::Depth);
    let want_mask = req.channels.contains(&RenderChannel::Mask);
    let (field, stack, selection) = {
        let s = st.inner.session();
        let version = req.version.unwrap_or(s.active);
        let field = s
            .snapshots
            .get(&version)
            .cloned()
            .ok_or_else(|| ApiError::not_found("unknown_version", format!("snapshot {version} is not available")))?;
        (field, s.stack.clone(), s.selection.as_ref().map(|x| x.mask.clone()))
    };
    if (want_mask || req.deletion.is_some()) && selection.is_none() {
        return Err(ApiError::no_selection());
    }
    let workers = st.inner.config.workers;
    blocking(move || {
        let stack = (req.use_stack && !stack.is_empty()).then_some(&*stack);
        let sel = selection.as_ref();
        let opts = RenderOptions {
            samples,
            channels: Channels {
                features: false,
                coverage: want_mask,
            },
            stack,
            deletion: req.deletion.zip(sel).map(|(mode, selection)| Deletion { selection, mode }),
            coverage: if want_mask { sel } else { None },
            workers,
            ..RenderOptions::default()
        };
        let img = render_view(&camera, &field, &opts)?;
        let (w, h) = (img.width, img.height);
        let depth_png = if want_depth {
            Some(b64(encode_depth16(w, h, &img.depth, camera.near, camera.far)?))
        } else {
            None
        };
        let mask_png = if want_mask {
            let bits: Vec<bool> = img.coverage.iter().map(|c| *c >= PROJECTION_THRESHOLD).collect();
            Some(b64(encode_mask(w, h, &bits)?))
        } else {
            None
        };
        Ok(Json(RenderResponse {
            version: field.version,
            width: w,
            height: h,
            rgb_png: b64(encode_rgb8(w, h, &img.rgb)?),
            depth_png,
            mask_png,
            near: camera.near,
            far: camera.far,
        }))
    })
    .await
}

fn preview(camera: &Camera, selection: &SelectionMask, field: &TriPlaneField, samples: usize) -> ApiResult<(String, usize)> {
    let m = project_mask(camera, selection, field, samples)?;
    let on = m.bits.iter().filter(|b| **b).count();
    Ok((b64(encode_mask(m.width, m.height, &m.bits)?), on))
}

pub async fn select(State(st): State<AppState>, ApiJson(req): ApiJson<SelectRequest>) -> ApiResult<Json<SelectResponse>> {
    let camera = frame_camera(&st, req.frame)?;
    if req.patch.pixels(camera.width, camera.height)?.is_empty() {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "empty_patch",
            "the patch covers no pixels of the frame",
        ));
    }
    if let Some(thr) = req.thr {
        if !(thr >= 0.0 && thr.is_finite()) {
            return Err(ApiError::invalid(format!("thr must be finite and >= 0, got {thr}")));
        }
    }
    let field = st.active_field();
    let inner = st.inner.clone();
    blocking(move || {
        let samples = inner.config.samples;
        let f_bar = query_mean_feature(&camera, &req.patch, &field, samples)?;
        let thr = req.thr.unwrap_or_else(|| SelectionMask::calibrated_threshold(&f_bar));
        let mask = SelectionMask::new(f_bar, thr, field.version)?;
        let (mask_png, mask_pixels) = preview(&camera, &mask, &field, samples)?;
        let state = SelectionState {
            range: range_of(&field, &mask.f_bar, inner.config.percentile_probes),
            mask,
            frame: req.frame,
            patch: req.patch,
        };
        let selection = state.summary();
        inner.session().selection = Some(state);
        Ok(Json(SelectResponse {
            selection,
            width: camera.width,
            height: camera.height,
            mask_png,
            mask_pixels,
        }))
    })
    .await
}

pub async fn set_threshold(State(st): State<AppState>, ApiJson(req): ApiJson<ThresholdRequest>) -> ApiResult<Json<SelectResponse>> {
    if !(req.thr >= 0.0 && req.thr.is_finite()) {
        return Err(ApiError::invalid(format!("thr must be finite and >= 0, got {}", req.thr)));
    }
    let (field, current) = {
        let s = st.inner.session();
        (s.active_field(), s.selection.clone().ok_or_else(ApiError::no_selection)?)
    };
    let camera = frame_camera(&st, current.frame)?;
    let inner = st.inner.clone();
    blocking(move || {
        let mask = current.mask.with_threshold(req.thr)?;
        let (mask_png, mask_pixels) = preview(&camera, &mask, &field, inner.config.samples)?;
        let state = SelectionState { mask, ..current };
        let selection = state.summary();
        inner.session().selection = Some(state);
        Ok(Json(SelectResponse {
            selection,
            width: camera.width,
            height: camera.height,
            mask_png,
            mask_pixels,
        }))
    })
    .await
}

pub async fn context_export(State(st): State<AppState>, ApiJson(req): ApiJson<ExportRequest>) -> ApiResult<Json<ExportResponse>> {
    let (field, selection) = {
        let s = st.inner.session();
        (
            s.active_field(),
            s.selection.as_ref().map(|x| x.mask.clone()).ok_or_else(ApiError::no_selection)?,
        )
    };
    let inner = st.inner.clone();
    blocking(move || {
        let cfg = &inner.config;
        let mut guard = inner.context();
        let fresh = req.restart || guard.is_none();
        if !fresh && guard.as_ref().is_some_and(|c| c.done) {
            return Err(ApiError::conflict(
                "context_done",
                "every epoch is edited; pass `restart` to begin again",
            ));
        }
        let grid = if fresh {
            let config = ContextConfig {
                epochs: req.epochs.unwrap_or(cfg.context.epochs),
                seed: req.seed.unwrap_or(cfg.context.seed),
                ..cfg.context.clone()
            };
            let ctx = guard.insert(ContextSession::new(cfg.session.clone(), inner.cameras.clone(), config)?);
            ctx.start(&field, &selection)?
        } else {
            let ctx = guard.as_mut().expect("checked above");
            match &ctx.current {
                Some(g) if g.provenance.field_version == field.version => ctx.current.as_ref().expect("checked"),
                Some(_) => ctx.refresh(&field, &selection)?,
                None => ctx.next_grid(&field, &selection)?,
            }
        };
        let m = grid.mosaic();
        let sc = grid.sidecar();
        let p = &grid.provenance;
        Ok(Json(ExportResponse {
            provenance: ProvenanceBody {
                session: p.session.clone(),
                field_version: p.field_version,
                epoch: p.epoch,
            },
            epoch: grid.epoch,
            epochs: guard.as_ref().map(|c| c.config.epochs).unwrap_or_default(),
            cameras: sc.cameras,
            roles: sc.roles.map(|r| r.name().to_string()),
            width: m.width,
            height: m.height,
            rgb_png: b64(encode_rgb8(m.width, m.height, &m.rgb)?),
            mask_png: b64(encode_mask(m.width, m.height, &m.mask)?),
            depth_png: b64(encode_depth16(m.width, m.height, &m.depth, sc.near, sc.far)?),
            sidecar: sc.to_text(),
        }))
    })
    .await
}

pub async fn context_import(State(st): State<AppState>, ApiJson(req): ApiJson<ImportRequest>) -> ApiResult<Json<ImportResponse>> {
    let png = B64
        .decode(req.mosaic_png.as_bytes())
        .map_err(|e| ApiError::invalid(format!("mosaic_png is not base64: {e}")))?;
    let live = st.active_version();
    let inner = st.inner.clone();
    blocking(move || {
        let mut guard = inner.context();
        let ctx = guard
            .as_mut()
            .ok_or_else(|| ApiError::conflict("context_state", "no context grid exported yet"))?;
        let (w, h, rgb) = decode_rgb8(&png)?;
        let found = Provenance {
            session: req.provenance.session,
            field_version: req.provenance.field_version,
            epoch: req.provenance.epoch,
        };
        if let Some(grid) = &ctx.current {
            grid.provenance.check(&found)?;
            let (ew, eh) = grid.mosaic_size();
            if (w, h) != (ew, eh) {
                return Err(ApiError::invalid(format!("edited mosaic is {w}x{h}, expected {ew}x{eh}")));
            }
        } else {
            return Err(ApiError::new(
                StatusCode::GONE,
                "stale_provenance",
                format!("mosaic from `{found}` was already imported or superseded"),
            ));
        }
        let views = ctx.import(&found, live, &rgb)?;
        Ok(Json(ImportResponse {
            recorded: views.iter().map(|v| v.camera_id).collect(),
            edited_views: ctx.history.len(),
            epoch: found.epoch,
            next: if ctx.done { NextStep::Finetune } else { NextStep::NextEpoch },
        }))
    })
    .await
}

/// Lays `over` onto `base`, descending into objects. Keys `base` lacks are rejected.
fn merge(base: &mut Value, over: Value, path: &str) -> ApiResult<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b
                    .get_mut(&k)
                    .ok_or_else(|| ApiError::invalid(format!("unknown config field `{here}`")))?;
                if slot.is_object() && v.is_object() {
                    merge(slot, v, &here)?;
                } else {
                    *slot = v;
                }
            }
            Ok(())
        }
        (_, _) => Err(ApiError::invalid(format!(
            "`{}` must be an object",
            if path.is_empty() { "config" } else { path }
        ))),
    }
}

fn overlay<T: serde::Serialize + serde::de::DeserializeOwned>(base: &T, over: Option<Value>, what: &str) -> ApiResult<T> {
    let mut v = serde_json::to_value(base).expect("config serializes");
    if let Some(o) = over {
        merge(&mut v, o, "")?;
    }
    serde_json::from_value(v).map_err(|e| ApiError::invalid(format!("{what}: {e}")))
}

fn train_config(regime: Regime, over: Option<Value>, workers: Option<usize>) -> ApiResult<TrainConfig> {
    if over.as_ref().and_then(|o| o.get("regime")).is_some() {
        return Err(ApiError::invalid("the regime follows the job kind and cannot be overridden"));
    }
    let mut config = overlay(&TrainConfig::for_regime(regime), over, "config")?;
    if config.workers.is_none() {
        config.workers = workers;
    }
    Ok(config)
}

fn edited_views(st: &AppState) -> ApiResult<triplane_edit::context::EditHistory> {
    let history = st.inner.context().as_ref().map(|c| c.history.clone()).unwrap_or_default();
    if history.is_empty() {
        return Err(ApiError::conflict("no_edited_views", "import an edited context mosaic first"));
    }
    Ok(history)
}

pub async fn create_job(State(st): State<AppState>, ApiJson(req): ApiJson<JobRequest>) -> ApiResult<(StatusCode, Json<JobCreated>)> {
    if req.field.is_some() && req.kind != JobKind::Pretrain {
        return Err(ApiError::invalid("`field` applies to pretrain jobs only"));
    }
    if req.resolution.is_some() && req.kind != JobKind::BakeMask {
        return Err(ApiError::invalid("`resolution` applies to bake_mask jobs only"));
    }
    if (req.label.is_some() || req.edit_kind.is_some()) && req.kind != JobKind::EditResidual {
        return Err(ApiError::invalid("`label` and `edit_kind` apply to edit_residual jobs only"));
    }
    if req.config.is_some() && req.kind == JobKind::BakeMask {
        return Err(ApiError::invalid("bake_mask takes no training config"));
    }
    let inner = &st.inner;
    let workers = inner.config.workers;
    let (active, selection, latest) = {
        let s = inner.session();
        if req.kind.trains() {
            if let Some(id) = s.training_job_running() {
                return Err(ApiError::conflict("job_running", format!("training job {id} is still running")));
            }
        }
        (s.active_field(), s.selection.as_ref().map(|x| x.mask.clone()), s.latest_version())
    };
    let need_selection = || selection.clone().ok_or_else(ApiError::no_selection);
    let plan = match req.kind {
        JobKind::Pretrain => {
            let mut config = train_config(Regime::Pretrain, req.config, workers)?;
            if inner.dataset.feature_dim.is_none() {
                config.feature_weight = 0.0;
            }
            config.validate()?;
            let field = match req.field {
                Some(over) => {
                    let base = field_config_for(&inner.dataset, &FieldConfig::default());
                    let fc = overlay(&base, Some(over), "field")?;
                    let fc = field_config_for(&inner.dataset, &fc);
                    let mut f = TriPlaneField::new(&fc)?;
                    f.version = latest;
                    f
                }
                None => (*active).clone(),
            };
            Plan::Pretrain {
                field,
                views: inner.dataset.train_views(),
                config,
            }
        }
        JobKind::EditResidual => {
            let selection = need_selection()?;
            let history = edited_views(&st)?;
            let mut config = train_config(Regime::EditResidual, req.config, workers)?;
            if let Some(k) = req.edit_kind {
                config.edit_kind = k;
            }
            config.validate()?;
            let views = history
                .views
                .iter()
                .map(|v| TrainView::new(inner.cameras[v.camera_id], v.rgb.clone()))
                .collect();
            Plan::Edit {
                field: active,
                views,
                selection,
                config,
                label: req.label.unwrap_or_else(|| "edit".to_string()),
            }
        }
        JobKind::Finetune => {
            let selection = need_selection()?;
            let history = edited_views(&st)?;
            let explicit = req.config.as_ref().and_then(|c| c.get("iterations")).is_some();
            let mut config = train_config(Regime::Finetune, req.config, workers)?;
            if !explicit {
                config.iterations = 1;
            }
            config.validate()?;
            if !explicit {
                config.iterations = 0;
            }
            Plan::Finetune {
                field: (*active).clone(),
                history,
                selection,
                config,
            }
        }
        JobKind::BakeMask => {
            let resolution = req.resolution.unwrap_or(64);
            if resolution == 0 || resolution > 512 {
                return Err(ApiError::invalid("bake resolution must lie in 1..=512"));
            }
            Plan::Bake {
                field: active,
                selection: need_selection()?,
                resolution,
            }
        }
    };
    let job = {
        let mut s = inner.session();
        if req.kind.trains() {
            if let Some(id) = s.training_job_running() {
                return Err(ApiError::conflict("job_running", format!("training job {id} is still running")));
            }
        }
        let id = s.next_job;
        s.next_job += 1;
        let job = Arc::new(Job::new(id, req.kind));
        s.jobs.insert(id, job.clone());
        job
    };
    let id = job.id;
    jobs::spawn(inner.clone(), job, plan);
    Ok((StatusCode::ACCEPTED, Json(JobCreated { id })))
}

fn job(st: &AppState, raw: &str) -> ApiResult<Arc<Job>> {
    let id = parse_id(raw, "job")?;
    st.inner
        .session()
        .jobs
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError::not_found("unknown_job", format!("no job {id}")))
}

pub async fn get_job(State(st): State<AppState>, Path(raw): Path<String>) -> ApiResult<Json<JobStatus>> {
    Ok(Json(job(&st, &raw)?.status()))
}

pub async fn cancel_job(State(st): State<AppState>, Path(raw): Path<String>) -> ApiResult<Json<JobStatus>> {
    let job = job(&st, &raw)?;
    job.request_cancel();
    Ok(Json(job.status()))
}

fn layer_list(stack: &triplane_edit::EditStack) -> ApiResult<Vec<LayerSummary>> {
    stack
        .tokens
        .iter()
        .map(|t| {
            Ok(LayerSummary {
                id: t.id,
                kind: t.kind,
                label: t.label.clone(),
                enabled: t.enabled,
                bytes: t.to_bytes()?.len(),
                created_at: t.created_at,
            })
        })
        .collect()
}

pub async fn layers(State(st): State<AppState>) -> ApiResult<Json<Vec<LayerSummary>>> {
    Ok(Json(layer_list(&st.stack())?))
}

/// Applies `f` to a copy of the stack and swaps it in, so renders in flight keep the
/// stack they started with.
fn edit_stack<T>(st: &AppState, f: impl FnOnce(&mut triplane_edit::EditStack) -> ApiResult<T>) -> ApiResult<(T, Vec<LayerSummary>)> {
    let mut s = st.inner.session();
    let mut stack = (*s.stack).clone();
    let out = f(&mut stack)?;
    let list = layer_list(&stack)?;
    s.stack = Arc::new(stack);
    Ok((out, list))
}

fn known_layer(stack: &triplane_edit::EditStack, id: u64) -> ApiResult<()> {
    match stack.get(id) {
        Some(_) => Ok(()),
        None => Err(ApiError::not_found("unknown_layer", format!("no layer {id}"))),
    }
}

pub async fn toggle_layer(State(st): State<AppState>, Path(raw): Path<String>) -> ApiResult<Json<ToggleResponse>> {
    let id = parse_id(&raw, "layer")?;
    let (enabled, _) = edit_stack(&st, |stack| {
        known_layer(stack, id)?;
        Ok(stack.toggle(id)?)
    })?;
    Ok(Json(ToggleResponse { id, enabled }))
}

pub async fn reorder_layers(State(st): State<AppState>, ApiJson(req): ApiJson<ReorderRequest>) -> ApiResult<Json<Vec<LayerSummary>>> {
    let ((), list) = edit_stack(&st, |stack| Ok(stack.reorder(&req.order)?))?;
    Ok(Json(list))
}

pub async fn delete_layer(State(st): State<AppState>, Path(raw): Path<String>) -> ApiResult<Json<Vec<LayerSummary>>> {
    let id = parse_id(&raw, "layer")?;
    let (_, list) = edit_stack(&st, |stack| {
        known_layer(stack, id)?;
        Ok(stack.delete(id)?)
    })?;
    Ok(Json(list))
}

pub async fn checkpoint(State(st): State<AppState>, Path(raw): Path<String>) -> ApiResult<Response> {
    let version = parse_id(&raw, "snapshot")?;
    let (field, metrics) = {
        let s = st.inner.session();
        let field = s
            .snapshots
            .get(&version)
            .cloned()
            .ok_or_else(|| ApiError::not_found("unknown_version", format!("snapshot {version} is not available")))?;
        (field, s.metrics.get(&version).cloned().unwrap_or_else(BTreeMap::new))
    };
    let bytes = blocking(move || Ok(write_checkpoint(&field, &metrics)?)).await?;
    Ok((
        [
            (header::CONTENT_TYPE, "application/octet-stream".to_string()),
            (header::CONTENT_DISPOSITION, format!("attachment; filename=\"v{version}.pnck\"")),
        ],
        Bytes::from(bytes),
    )
        .into_response())
}
