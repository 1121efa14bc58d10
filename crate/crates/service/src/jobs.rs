use std::ops::ControlFlow;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use serde_json::json;
use triplane_edit::context::EditHistory;
use triplane_edit::edit::{finetune_on_history, train_token};
use triplane_edit::pipeline::checkpoint_metrics;
use triplane_edit::select::bake_mask;
use triplane_edit::train::{run_training, IterationMetrics, ProgressSink, TrainConfig, TrainInputs, TrainOutcome, TrainView};
use triplane_edit::{Error, SelectionMask, TriPlaneField};

use crate::api::{JobKind, JobState, JobStatus};
use crate::error::ApiError;
use crate::state::Inner;

pub(crate) struct Job {
    pub id: u64,
    pub kind: JobKind,
    pub cancel: AtomicBool,
    status: Mutex<JobStatus>,
}

impl Job {
    pub fn new(id: u64, kind: JobKind) -> Self {
        Self {
            id,
            kind,
            cancel: AtomicBool::new(false),
            status: Mutex::new(JobStatus {
                id,
                kind,
                state: JobState::Queued,
                iteration: 0,
                total: 0,
                losses: None,
                result: None,
                error: None,
            }),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, JobStatus> {
        self.status.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn status(&self) -> JobStatus {
        self.lock().clone()
    }

    /// Moves to `to` unless the job already finished or `to` would move backwards.
    pub fn transition(&self, to: JobState) -> bool {
        let mut s = self.lock();
        let allowed = match (s.state, to) {
            (JobState::Queued, _) => to != JobState::Queued,
            (JobState::Running, t) => t.is_terminal(),
            _ => false,
        };
        if allowed {
            s.state = to;
        }
        allowed
    }

    fn progress(&self, m: &IterationMetrics, total: usize) {
        let mut s = self.lock();
        s.iteration = s.iteration.max(m.iteration + 1);
        s.total = total;
        s.losses = Some(*m);
    }

    fn finish(&self, result: Result<serde_json::Value, Error>) {
        let (state, value, error) = match result {
            Ok(v) => (JobState::Done, Some(v), None),
            Err(Error::Cancelled { .. }) => (JobState::Cancelled, None, None),
            Err(e) => (JobState::Failed, None, Some(ApiError::from(e).body)),
        };
        if self.transition(state) {
            let mut s = self.lock();
            s.result = value;
            s.error = error;
        }
    }

    pub fn request_cancel(&self) {
        self.cancel.store(true, Ordering::SeqCst);
        let mut s = self.lock();
        if s.state == JobState::Queued {
            s.state = JobState::Cancelled;
        }
    }
}

/// Everything a job needs, gathered under the session lock before it starts.
pub(crate) enum Plan {
    Pretrain {
        field: TriPlaneField,
        views: Vec<TrainView>,
        config: TrainConfig,
    },
    Edit {
        field: Arc<TriPlaneField>,
        views: Vec<TrainView>,
        selection: SelectionMask,
        config: TrainConfig,
        label: String,
    },
    Finetune {
        field: TriPlaneField,
        history: EditHistory,
        selection: SelectionMask,
        config: TrainConfig,
    },
    Bake {
        field: Arc<TriPlaneField>,
        selection: SelectionMask,
        resolution: usize,
    },
}

struct JobSink {
    job: Arc<Job>,
    publish: Option<Arc<Inner>>,
}

impl ProgressSink for JobSink {
    fn on_iteration(&mut self, m: &IterationMetrics, total: usize) -> ControlFlow<()> {
        self.job.progress(m, total);
        if self.job.cancel.load(Ordering::SeqCst) {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    }

    fn on_snapshot(&mut self, field: &TriPlaneField) {
        if let Some(inner) = &self.publish {
            inner.publish(field.clone());
        }
    }
}

/// Runs `plan` on a dedicated thread. Training jobs publish snapshots as they go;
/// edit jobs push their token onto the stack when done.
pub(crate) fn spawn(inner: Arc<Inner>, job: Arc<Job>, plan: Plan) {
    std::thread::spawn(move || {
        if !job.transition(JobState::Running) {
            return;
        }
        let result = run(&inner, &job, plan);
        job.finish(result);
    });
}

fn run(inner: &Arc<Inner>, job: &Arc<Job>, plan: Plan) -> Result<serde_json::Value, Error> {
    let publishing = JobSink {
        job: job.clone(),
        publish: Some(inner.clone()),
    };
    match plan {
        Plan::Pretrain { mut field, views, config } => {
            let mut sink = publishing;
            let inputs = TrainInputs {
                views: &views,
                selection: None,
            };
            let out = run_training(&mut field, &inputs, &config, &mut sink)?;
            Ok(finished(inner, &config, &out))
        }
        Plan::Finetune {
            mut field,
            history,
            selection,
            config,
        } => {
            let mut sink = publishing;
            let out = finetune_on_history(&mut field, &inner.cameras, &history, &selection, &config, &mut sink)?;
            Ok(finished(inner, &config, &out))
        }
        Plan::Edit {
            field,
            views,
            selection,
            config,
            label,
        } => {
            let mut sink = JobSink {
                job: job.clone(),
                publish: None,
            };
            let (mut token, out) = train_token(&field, &views, &selection, &config, 0, &label, &mut sink)?;
            let bytes = token.to_bytes()?.len();
            let mut s = inner.session();
            let mut stack = (*s.stack).clone();
            token.id = stack.next_id();
            let id = token.id;
            stack.push(token);
            s.stack = Arc::new(stack);
            Ok(json!({ "layer": id, "bytes": bytes, "iterations": out.metrics.len(), "final_loss": out.final_loss() }))
        }
        Plan::Bake {
            field,
            selection,
            resolution,
        } => {
            let baked = bake_mask(&selection, resolution, &field)?;
            let (version, occupied) = (baked.version, baked.count());
            let applied = inner.session().set_baked(baked, &selection);
            Ok(json!({ "version": version, "occupied": occupied, "applied": applied }))
        }
    }
}

/// Records the metrics summary of the snapshot a training run published last.
fn finished(inner: &Inner, config: &TrainConfig, out: &TrainOutcome) -> serde_json::Value {
    let mut s = inner.session();
    let version = s.active;
    s.metrics.insert(version, checkpoint_metrics(config.regime, out));
    json!({ "version": version, "iterations": out.metrics.len(), "final_loss": out.final_loss() })
}
