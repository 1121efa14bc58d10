use std::io::Write;
use std::ops::ControlFlow;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::grad::{evaluate, Batch, BatchRay, BlockSet, DensityProbe, DepthTarget, LossBreakdown, Objective};
use super::loss::LossWeights;
use crate::error::{Error, Result};
use crate::field::{BlockId, EditKind, PointTrace, TriPlaneField};
use crate::render::{render_view, sample_ray, with_workers, Camera, RenderOptions};
use crate::select::{stratified_points, SelectionMask};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Photometric plus feature distillation from scratch.
    #[default]
    Pretrain,
    /// Only the residual edit head learns; everything else is frozen.
    EditResidual,
    /// Every block learns, with depth and density-preservation terms.
    Finetune,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Pretrain => "pretrain",
            Regime::EditResidual => "edit_residual",
            Regime::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Cosine decay from the base rate to zero over the run.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub iterations: usize,
    pub rays_per_batch: usize,
    pub samples_per_ray: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub feature_weight: f64,
    pub seed: u64,
    /// Blocks held fixed in addition to whatever the regime freezes.
    pub frozen: Vec<BlockId>,
    pub workers: Option<usize>,
    /// Publish a snapshot every this many iterations (0 = only at the end).
    pub checkpoint_interval: usize,
    pub density_probes: usize,
    pub edit_kind: EditKind,
    /// Edit head hidden width; `None` picks the token default for the kind.
    pub edit_hidden: Option<usize>,
    pub background: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            regime: Regime::Pretrain,
            iterations: 40_000,
            rays_per_batch: 192,
            samples_per_ray: 64,
            learning_rate: 1e-2,
            schedule: Schedule::Constant,
            adam: AdamConfig::default(),
            weights: LossWeights {
                lambda3: 0.0,
                lambda4: 0.0,
                ..LossWeights::default()
            },
            feature_weight: 1.0,
            seed: 0,
            frozen: Vec::new(),
            workers: None,
            checkpoint_interval: 0,
            density_probes: 0,
            edit_kind: EditKind::Feature,
            edit_hidden: None,
            background: [0.0; 3],
        }
    }

    pub fn edit_residual() -> Self {
        Self {
            regime: Regime::EditResidual,
            iterations: 500,
            rays_per_batch: 1024,
            learning_rate: 1e-3,
            weights: LossWeights::ZERO,
            feature_weight: 0.0,
            ..Self::pretrain()
        }
    }

    /// One pass over a 2x2 context of 128x128 cells; see [`TrainConfig::iterations_per_pass`].
    pub fn finetune() -> Self {
        Self {
            regime: Regime::Finetune,
            iterations: 128,
            rays_per_batch: 512,
            learning_rate: 2e-4,
            weights: LossWeights::default(),
            feature_weight: 0.0,
            density_probes: 4096,
            ..Self::pretrain()
        }
    }

    pub fn for_regime(regime: Regime) -> Self {
        match regime {
            Regime::Pretrain => Self::pretrain(),
            Regime::EditResidual => Self::edit_residual(),
            Regime::Finetune => Self::finetune(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be > 0".into()));
        }
        if self.rays_per_batch == 0 || self.samples_per_ray == 0 {
            return Err(Error::Config("rays_per_batch and samples_per_ray must be > 0".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.feature_weight >= 0.0 && self.feature_weight.is_finite()) {
            return Err(Error::Config("feature weight must be finite and >= 0".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and epsilon > 0".into()));
        }
        self.weights.validate()?;
        if self.regime == Regime::EditResidual && self.frozen.contains(&BlockId::Edit) {
            return Err(Error::Config("edit_residual cannot freeze the edit head".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        Ok(())
    }

    /// Iterations that draw, on average, every pixel of `views` once.
    pub fn iterations_per_pass(&self, views: &[TrainView]) -> usize {
        let pixels: usize = views.iter().map(|v| v.pixels()).sum();
        pixels.div_ceil(self.rays_per_batch.max(1)).max(1)
    }

    /// Blocks that receive updates.
    pub fn trainable(&self) -> BlockSet {
        let base = match self.regime {
            Regime::EditResidual => BlockSet::only(BlockId::Edit),
            Regime::Pretrain | Regime::Finetune => BlockSet::field(),
        };
        self.frozen.iter().fold(base, |s, b| s.without(*b))
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let x = iteration as f64 / self.iterations as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * x).cos())
            }
        }
    }
}

/// One supervised view. Per-pixel planes are row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainView {
    pub camera: Camera,
    pub rgb: Vec<f32>,
    /// `sem_dim` channels per pixel.
    pub feature: Option<Vec<f32>>,
    /// Target depth inside the edit mask (fine-tuning).
    pub depth: Option<Vec<f32>>,
    /// Projected selection (fine-tuning depth split).
    pub mask: Option<Vec<bool>>,
}

impl TrainView {
    pub fn new(camera: Camera, rgb: Vec<f32>) -> Self {
        Self {
            camera,
            rgb,
            feature: None,
            depth: None,
            mask: None,
        }
    }

    fn pixels(&self) -> usize {
        self.camera.pixel_count()
    }

    fn validate(&self, sem_dim: usize) -> Result<()> {
        self.camera.validate()?;
        let n = self.pixels();
        let check = |what: &'static str, expected: usize, got: usize| {
            if expected == got {
                Ok(())
            } else {
                Err(Error::DimMismatch { what, expected, got })
            }
        };
        check("view rgb", 3 * n, self.rgb.len())?;
        if let Some(f) = &self.feature {
            check("view features", sem_dim * n, f.len())?;
        }
        if let Some(d) = &self.depth {
            check("view depth", n, d.len())?;
        }
        if let Some(m) = &self.mask {
            check("view mask", n, m.len())?;
        }
        Ok(())
    }
}

/// Everything a run reads besides the field itself.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainInputs<'a> {
    pub views: &'a [TrainView],
    /// Selection gating the edit head (edit_residual) and density preservation (finetune).
    pub selection: Option<&'a SelectionMask>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub photometric: f64,
    pub feature: f64,
    pub l1: f64,
    pub tv: f64,
    pub depth: f64,
    pub density: f64,
    pub total: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

impl IterationMetrics {
    fn new(iteration: usize, l: &LossBreakdown, lr: f64, wall_ms: f64) -> Self {
        Self {
            iteration,
            photometric: l.photometric,
            feature: l.feature,
            l1: l.l1,
            tv: l.tv,
            depth: l.depth,
            density: l.density,
            total: l.total,
            lr,
            wall_ms,
        }
    }
}

/// Receives progress while a run is in flight.
pub trait ProgressSink {
    /// Called after each iteration; returning `Break` cancels the run.
    fn on_iteration(&mut self, _metrics: &IterationMetrics, _total: usize) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }

    /// Called whenever a snapshot is published.
    fn on_snapshot(&mut self, _field: &TriPlaneField) {}
}

impl ProgressSink for () {}

/// Writes one JSON record per iteration.
pub struct MetricsLog<W: Write> {
    out: W,
    pub error: Option<std::io::Error>,
}

impl<W: Write> MetricsLog<W> {
    pub fn new(out: W) -> Self {
        Self { out, error: None }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> ProgressSink for MetricsLog<W> {
    fn on_iteration(&mut self, metrics: &IterationMetrics, _total: usize) -> ControlFlow<()> {
        if self.error.is_none() {
            let line = serde_json::to_string(metrics).expect("metrics serialize");
            if let Err(e) = writeln!(self.out, "{line}") {
                self.error = Some(e);
            }
        }
        ControlFlow::Continue(())
    }
}

/// Forwards to two sinks; cancels if either does.
pub struct Tee<'a, A: ProgressSink, B: ProgressSink>(pub &'a mut A, pub &'a mut B);

impl<A: ProgressSink, B: ProgressSink> ProgressSink for Tee<'_, A, B> {
    fn on_iteration(&mut self, m: &IterationMetrics, total: usize) -> ControlFlow<()> {
        let a = self.0.on_iteration(m, total);
        let b = self.1.on_iteration(m, total);
        if a.is_break() || b.is_break() {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    }

    fn on_snapshot(&mut self, field: &TriPlaneField) {
        self.0.on_snapshot(field);
        self.1.on_snapshot(field);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub metrics: Vec<IterationMetrics>,
    pub snapshots: usize,
    pub elapsed_ms: f64,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.total)
    }
}

/// Trains `field` in place.
///
/// The run is a pure function of the field, the inputs and the config, including the
/// worker count's absence: batches are drawn serially from a seeded generator and
/// gradient reduction happens in a fixed order. On divergence the field is restored
/// to the last published snapshot and `Error::Diverged` is returned; on cancellation
/// the field is left at the last completed iteration and `Error::Cancelled` returned.
pub fn run_training(
    field: &mut TriPlaneField,
    inputs: &TrainInputs<'_>,
    config: &TrainConfig,
    sink: &mut (dyn ProgressSink + Send),
) -> Result<TrainOutcome> {
    config.validate()?;
    field.validate()?;
    if inputs.views.is_empty() {
        return Err(Error::Empty("training views"));
    }
    for v in inputs.views {
        v.validate(field.sem_dim())?;
    }
    match config.regime {
        Regime::Pretrain => {}
        Regime::EditResidual => {
            if inputs.selection.is_none() {
                return Err(Error::Config("edit_residual needs a selection".into()));
            }
            let hidden = config.edit_hidden.unwrap_or(match config.edit_kind {
                EditKind::Feature => crate::stack::FEATURE_TOKEN_HIDDEN,
                EditKind::Color => crate::stack::COLOR_TOKEN_HIDDEN,
            });
            field.reset_edit_head(config.edit_kind, hidden, config.seed ^ 0x5EED)?;
        }
        Regime::Finetune => {
            if config.weights.lambda3 > 0.0 && inputs.views.iter().any(|v| v.depth.is_none() || v.mask.is_none()) {
                return Err(Error::Config("depth loss needs target depth and mask for every view".into()));
            }
        }
    }
    if config.feature_weight > 0.0 && inputs.views.iter().any(|v| v.feature.is_none()) {
        return Err(Error::Config("feature loss needs feature images for every view".into()));
    }
    with_workers(config.workers, || train_loop(field, inputs, config, sink))
}

fn train_loop(
    field: &mut TriPlaneField,
    inputs: &TrainInputs<'_>,
    config: &TrainConfig,
    sink: &mut (dyn ProgressSink + Send),
) -> Result<TrainOutcome> {
    let start = Instant::now();
    let trainable = config.trainable();
    let objective = Objective {
        weights: config.weights,
        feature_weight: config.feature_weight,
        edit: config.regime == Regime::EditResidual,
    };
    let finetune = (config.regime == Regime::Finetune).then(|| FinetuneRefs::new(field, inputs, config));
    let finetune = finetune.transpose()?;
    let mut states: Vec<(BlockId, AdamState)> = trainable.iter().map(|b| (b, AdamState::new(field.block(b).len()))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut last_good = field.clone();
    let mut outcome = TrainOutcome {
        metrics: Vec::with_capacity(config.iterations),
        snapshots: 0,
        elapsed_ms: 0.0,
    };
    let edit_selection = if config.regime == Regime::EditResidual {
        inputs.selection
    } else {
        None
    };

    for it in 0..config.iterations {
        let batch = draw_batch(field, inputs, config, finetune.as_ref(), edit_selection, &mut rng);
        let result = evaluate(field, &batch, &objective, trainable);
        let (losses, grads) = match result {
            Ok(r) if r.0.total.is_finite() => r,
            Ok(_) | Err(Error::NonFiniteGradient(_)) => {
                *field = last_good;
                return Err(Error::Diverged { iteration: it });
            }
            Err(e) => return Err(e),
        };
        let lr = config.lr_at(it);
        for (block, state) in &mut states {
            let g = grads.get(*block).expect("gradient for trainable block");
            adam_step(field.block_mut(*block), g, state, lr, &config.adam)?;
        }
        if !field.all_finite() {
            *field = last_good;
            return Err(Error::Diverged { iteration: it });
        }
        let metrics = IterationMetrics::new(it, &losses, lr, start.elapsed().as_secs_f64() * 1e3);
        outcome.metrics.push(metrics);
        let last = it + 1 == config.iterations;
        if last || (config.checkpoint_interval > 0 && (it + 1) % config.checkpoint_interval == 0) {
            field.version += 1;
            last_good = field.clone();
            outcome.snapshots += 1;
            sink.on_snapshot(field);
        }
        if sink.on_iteration(&metrics, config.iterations).is_break() && !last {
            return Err(Error::Cancelled { iteration: it + 1 });
        }
    }
    outcome.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(outcome)
}

/// Frozen pre-edit references used by the fine-tuning terms.
struct FinetuneRefs {
    original: TriPlaneField,
    /// Depth of the pre-edit field per view, the unmasked depth target.
    depth: Vec<Vec<f32>>,
}

impl FinetuneRefs {
    fn new(field: &TriPlaneField, inputs: &TrainInputs<'_>, config: &TrainConfig) -> Result<Self> {
        let original = field.clone();
        let mut depth = Vec::with_capacity(inputs.views.len());
        for v in inputs.views {
            if config.weights.lambda3 > 0.0 {
                let opts = RenderOptions {
                    samples: config.samples_per_ray,
                    ..RenderOptions::default()
                };
                depth.push(render_view(&v.camera, &original, &opts)?.depth);
            } else {
                depth.push(Vec::new());
            }
        }
        Ok(Self { original, depth })
    }
}

fn draw_batch(
    field: &TriPlaneField,
    inputs: &TrainInputs<'_>,
    config: &TrainConfig,
    refs: Option<&FinetuneRefs>,
    edit_selection: Option<&SelectionMask>,
    rng: &mut ChaCha8Rng,
) -> Batch {
    let total: usize = inputs.views.iter().map(|v| v.pixels()).sum();
    let mut rays = Vec::with_capacity(config.rays_per_batch);
    for _ in 0..config.rays_per_batch {
        let mut k = rng.random_range(0..total);
        let mut vi = 0;
        while k >= inputs.views[vi].pixels() {
            k -= inputs.views[vi].pixels();
            vi += 1;
        }
        let view = &inputs.views[vi];
        let cam = &view.camera;
        let (u, v) = ((k % cam.width as usize) as u32, (k / cam.width as usize) as u32);
        let ray = cam.ray_unchecked(u as f64 + 0.5, v as f64 + 0.5);
        let s = sample_ray(&ray, cam.near, cam.far, config.samples_per_ray, Some(&mut *rng)).expect("validated camera range");
        let d = field.sem_dim();
        let depth = match (refs, &view.depth, &view.mask) {
            (Some(refs), Some(e), Some(m)) if config.weights.lambda3 > 0.0 => Some(DepthTarget {
                masked: m[k],
                value: if m[k] { e[k] as f64 } else { refs.depth[vi][k] as f64 },
            }),
            _ => None,
        };
        rays.push(BatchRay {
            origin: s.origin,
            direction: s.direction,
            t: s.t,
            delta: s.delta,
            edit_mask: Vec::new(),
            rgb: Some([view.rgb[3 * k] as f64, view.rgb[3 * k + 1] as f64, view.rgb[3 * k + 2] as f64]),
            feature: match &view.feature {
                Some(f) if config.feature_weight > 0.0 => Some(f[k * d..(k + 1) * d].iter().map(|x| *x as f64).collect()),
                _ => None,
            },
            depth,
        });
    }
    let mut probes = Vec::new();
    if let (Some(refs), true) = (refs, config.weights.lambda4 > 0.0 && config.density_probes > 0) {
        let seed = rng.random::<u64>();
        let mut trace = PointTrace::new(&refs.original);
        for p in stratified_points(&refs.original.bounds, config.density_probes, seed) {
            if !refs.original.trace_point(p, &mut trace) {
                continue;
            }
            let inside = inputs.selection.is_some_and(|sel| sel.hit(p, trace.f_sem(), refs.original.version));
            if !inside {
                probes.push(DensityProbe { p, sigma: trace.sigma() });
            }
        }
    }
    Batch {
        rays,
        probes,
        background: config.background,
        selection: edit_selection.cloned(),
    }
}
