use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::{Arc, Mutex, MutexGuard};

use triplane_edit::context::{ContextConfig, ContextSession};
use triplane_edit::io::Dataset;
use triplane_edit::select::BakedMask;
use triplane_edit::{Camera, EditStack, Patch, Result, SelectionMask, TriPlaneField};

use crate::api::SelectionSummary;
use crate::jobs::Job;

#[derive(Clone, Debug, PartialEq)]
pub struct ServiceConfig {
    /// Session id stamped into context provenance.
    pub session: String,
    /// Default samples per ray for renders, selection previews and context grids.
    pub samples: usize,
    pub context: ContextConfig,
    /// Probes behind the threshold slider range.
    pub percentile_probes: usize,
    /// Allowed browser origin; any origin when `None`.
    pub cors_origin: Option<String>,
    /// Published snapshots kept for rendering and download.
    pub max_snapshots: usize,
    /// Render worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            session: "session".into(),
            samples: 128,
            context: ContextConfig::default(),
            percentile_probes: 4096,
            cors_origin: None,
            max_snapshots: 8,
            workers: None,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct SelectionState {
    pub mask: SelectionMask,
    pub frame: usize,
    pub patch: Patch,
    pub range: Option<[f64; 2]>,
}

impl SelectionState {
    pub fn summary(&self) -> SelectionSummary {
        SelectionSummary {
            frame: self.frame,
            patch: self.patch.clone(),
            f_bar: self.mask.f_bar.clone(),
            thr: self.mask.thr,
            snapshot_version: self.mask.snapshot_version,
            f_distance_range: self.range,
            baked_version: self.mask.baked.as_ref().map(|b| b.version),
        }
    }
}

pub(crate) struct Session {
    pub snapshots: BTreeMap<u64, Arc<TriPlaneField>>,
    pub active: u64,
    pub selection: Option<SelectionState>,
    pub stack: Arc<EditStack>,
    /// Checkpoint metrics summary per snapshot version.
    pub metrics: BTreeMap<u64, BTreeMap<String, String>>,
    pub jobs: BTreeMap<u64, Arc<Job>>,
    pub next_job: u64,
}

impl Session {
    pub fn active_field(&self) -> Arc<TriPlaneField> {
        self.snapshots[&self.active].clone()
    }

    pub fn latest_version(&self) -> u64 {
        *self.snapshots.keys().next_back().expect("at least one snapshot")
    }

    pub fn training_job_running(&self) -> Option<u64> {
        self.jobs
            .values()
            .find(|j| j.kind.trains() && !j.status().state.is_terminal())
            .map(|j| j.id)
    }

    pub fn set_baked(&mut self, baked: BakedMask, from: &SelectionMask) -> bool {
        match &mut self.selection {
            Some(s) if s.mask.f_bar == from.f_bar && s.mask.thr == from.thr => {
                s.mask.baked = Some(Arc::new(baked));
                true
            }
            _ => false,
        }
    }
}

pub(crate) struct Cached {
    pub fingerprint: u64,
    pub status: axum::http::StatusCode,
    pub content_type: Option<axum::http::HeaderValue>,
    pub body: axum::body::Bytes,
}

pub(crate) const IDEMPOTENCY_CAPACITY: usize = 1024;

#[derive(Default)]
pub(crate) struct ReplayCache {
    pub entries: HashMap<String, Arc<Cached>>,
    pub order: VecDeque<String>,
}

impl ReplayCache {
    pub fn insert(&mut self, key: String, value: Cached) {
        if self.entries.insert(key.clone(), Arc::new(value)).is_none() {
            self.order.push_back(key);
        }
        while self.order.len() > IDEMPOTENCY_CAPACITY {
            if let Some(old) = self.order.pop_front() {
                self.entries.remove(&old);
            }
        }
    }
}

pub(crate) struct Inner {
    pub config: ServiceConfig,
    pub dataset: Dataset,
    /// Train-split cameras; context camera ids index this list.
    pub cameras: Vec<Camera>,
    pub session: Mutex<Session>,
    /// Context protocol state. Kept apart from the session so that building a grid
    /// does not hold up renders.
    pub context: Mutex<Option<ContextSession>>,
    pub replay: Mutex<ReplayCache>,
}

impl Inner {
    /// All session mutations go through this one lock, so they apply in a single order.
    pub fn session(&self) -> MutexGuard<'_, Session> {
        self.session.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn context(&self) -> MutexGuard<'_, Option<ContextSession>> {
        self.context.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Makes `field` the active snapshot. Versions only move forward; older snapshots
    /// beyond the retention limit are dropped.
    pub fn publish(&self, mut field: TriPlaneField) -> u64 {
        let mut s = self.session();
        let latest = s.latest_version();
        if field.version <= latest {
            field.version = latest + 1;
        }
        let v = field.version;
        s.snapshots.insert(v, Arc::new(field));
        s.active = v;
        while s.snapshots.len() > self.config.max_snapshots.max(1) {
            let oldest = *s.snapshots.keys().next().expect("non-empty");
            s.snapshots.remove(&oldest);
            s.metrics.remove(&oldest);
        }
        v
    }
}

/// Shared handle to the one scene this process serves.
#[derive(Clone)]
pub struct AppState {
    pub(crate) inner: Arc<Inner>,
}

impl AppState {
    pub fn new(
        dataset: Dataset,
        field: TriPlaneField,
        metrics: BTreeMap<String, String>,
        stack: EditStack,
        config: ServiceConfig,
    ) -> Result<Self> {
        field.validate()?;
        if config.samples == 0 {
            return Err(triplane_edit::Error::Config("render samples must be positive".into()));
        }
        let cameras = dataset.train().map(|f| f.camera).collect();
        let active = field.version;
        let session = Session {
            snapshots: BTreeMap::from([(active, Arc::new(field))]),
            active,
            selection: None,
            stack: Arc::new(stack),
            metrics: BTreeMap::from([(active, metrics)]),
            jobs: BTreeMap::new(),
            next_job: 1,
        };
        Ok(Self {
            inner: Arc::new(Inner {
                config,
                dataset,
                cameras,
                session: Mutex::new(session),
                context: Mutex::new(None),
                replay: Mutex::new(ReplayCache::default()),
            }),
        })
    }

    pub fn active_version(&self) -> u64 {
        self.inner.session().active
    }

    pub fn active_field(&self) -> Arc<TriPlaneField> {
        self.inner.session().active_field()
    }

    pub fn stack(&self) -> Arc<EditStack> {
        self.inner.session().stack.clone()
    }

    pub fn selection(&self) -> Option<SelectionMask> {
        self.inner.session().selection.as_ref().map(|s| s.mask.clone())
    }
}
