use std::fs::File;
use std::io::BufWriter;
use std::net::SocketAddr;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use triplane_edit::context::{export_mosaic, ContextConfig, ContextSession, Provenance, Sidecar, DEFAULT_EPOCHS, SIDECAR_FILE};
use triplane_edit::edit::{finetune_on_history, train_token};
use triplane_edit::io::{
    atomic_write, generate_synthetic, load_checkpoint, load_dataset, load_mask, load_rgb8, save_checkpoint, save_depth16, save_mask,
    save_rgb8, Dataset, SyntheticSpec,
};
use triplane_edit::pipeline::{checkpoint_metrics, holdout_psnr, pretrain};
use triplane_edit::render::{render_view, Channels};
use triplane_edit::select::{feature_distances, percentile_range, project_mask, query_mean_feature, Deletion, PROJECTION_THRESHOLD};
use triplane_edit::stack::{STACK_MAGIC, TOKEN_MAGIC};
use triplane_edit::train::{IterationMetrics, MetricsLog, ProgressSink, Regime, TrainConfig, TrainView};
use triplane_edit::{Camera, EditStack, EditToken, Error, FieldConfig, Patch, RenderOptions, SelectionMask, TriPlaneField};
use triplane_service::{AppState, ServiceConfig};

use crate::config::{overlay, record_path_for, write_record, ConfigFile, Recorder, RenderSection};
use crate::context_dir::ContextState;
use crate::{usage, Cli, Command, ContextCommand, LayersCommand, TrainFlags};

const MANIFEST_FILE: &str = "scene.toml";
const SLIDER_PROBES: usize = 4096;

pub fn run(cli: Cli) -> Result<()> {
    let record = cli.record;
    match cli.command {
        Command::Synth(a) => synth(a, record),
        Command::Pretrain(a) => pretrain_cmd(a, record),
        Command::Render(a) => render(a, record),
        Command::Select(a) => select(a, record),
        Command::Context(ContextCommand::Export(a)) => context_export(a, record),
        Command::Context(ContextCommand::Import(a)) => context_import(a),
        Command::Edit(a) => edit(a, record),
        Command::Finetune(a) => finetune(a, record),
        Command::Layers(c) => layers(c),
        Command::Serve(a) => serve(a),
    }
}

fn finish(rec: Recorder, explicit: Option<PathBuf>, out: &Path) -> Result<()> {
    let path = explicit.unwrap_or_else(|| record_path_for(out));
    write_record(&path, &rec.finish())
}

/// A manifest path, or a directory holding `scene.toml`.
fn load_data(path: &Path) -> Result<Dataset> {
    let manifest = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    load_dataset(&manifest).with_context(|| format!("loading dataset {}", manifest.display()))
}

fn load_field(path: &Path) -> Result<TriPlaneField> {
    let (field, _) = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(field)
}

fn load_selection(path: &Path) -> Result<SelectionMask> {
    SelectionMask::load(path).with_context(|| format!("loading selection {}", path.display()))
}

fn frame_camera(data: &Dataset, index: usize) -> Result<Camera> {
    data.frames
        .iter()
        .find(|f| f.index == index)
        .map(|f| f.camera)
        .ok_or_else(|| usage(format!("dataset has no frame {index} (it has {})", data.frames.len())))
}

/// Context and edit camera ids index the train split.
fn train_cameras(data: &Dataset) -> Vec<Camera> {
    data.train().map(|f| f.camera).collect()
}

fn positive(name: &str, v: Option<usize>) -> Result<Option<usize>> {
    match v {
        Some(0) => Err(usage(format!("--{name} must be positive"))),
        v => Ok(v),
    }
}

fn render_section(file: &ConfigFile, samples: Option<usize>) -> Result<RenderSection> {
    let mut r = overlay(&RenderSection::default(), file.render.as_ref(), "render")?;
    if let Some(s) = positive("samples", samples)? {
        r.samples = s;
    }
    if r.samples == 0 {
        return Err(usage("render samples must be positive"));
    }
    Ok(r)
}

/// Regime preset, then the `[train]` table, then the flags.
fn train_config(regime: Regime, file: &ConfigFile, flags: &TrainFlags) -> Result<TrainConfig> {
    if file.train.as_ref().is_some_and(|t| t.contains_key("regime")) {
        return Err(usage("the regime follows the command and cannot be set in [train]"));
    }
    let mut c = overlay(&TrainConfig::for_regime(regime), file.train.as_ref(), "train")?;
    if let Some(v) = flags.iters {
        c.iterations = v;
    }
    if let Some(v) = flags.rays {
        c.rays_per_batch = v;
    }
    if let Some(v) = flags.samples {
        c.samples_per_ray = v;
    }
    if let Some(v) = flags.lr {
        c.learning_rate = v;
    }
    if let Some(v) = flags.seed {
        c.seed = v;
    }
    if flags.workers.is_some() {
        c.workers = flags.workers;
    }
    Ok(c)
}

/// Progress on stderr every tenth of the run, plus optional JSON-lines metrics.
struct CliSink {
    log: Option<MetricsLog<BufWriter<File>>>,
    quiet: bool,
}

impl CliSink {
    fn new(metrics: Option<&Path>) -> Result<Self> {
        let log = match metrics {
            Some(p) => {
                let f = File::create(p).with_context(|| format!("creating metrics file {}", p.display()))?;
                Some(MetricsLog::new(BufWriter::new(f)))
            }
            None => None,
        };
        Ok(Self { log, quiet: false })
    }

    fn close(self) -> Result<()> {
        if let Some(log) = self.log {
            if let Some(e) = log.error {
                return Err(Error::Io(e)).context("writing metrics");
            }
            use std::io::Write;
            log.into_inner().flush().context("writing metrics")?;
        }
        Ok(())
    }
}

impl ProgressSink for CliSink {
    fn on_iteration(&mut self, m: &IterationMetrics, total: usize) -> ControlFlow<()> {
        if let Some(log) = &mut self.log {
            let _ = log.on_iteration(m, total);
        }
        let step = (total / 10).max(1);
        if !self.quiet && ((m.iteration + 1).is_multiple_of(step) || m.iteration + 1 == total) {
            eprintln!("iteration {}/{total}: loss {:.5}", m.iteration + 1, m.total);
        }
        ControlFlow::Continue(())
    }
}

fn synth(a: crate::SynthArgs, record: Option<PathBuf>) -> Result<()> {
    let mut rec = Recorder::new("synth");
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading scene spec {}", p.display()))?;
            SyntheticSpec::parse(&text)?
        }
        None => SyntheticSpec::two_objects(a.width.unwrap_or(128), a.height.unwrap_or(128)),
    };
    if let Some(w) = a.width {
        spec.width = w;
    }
    if let Some(h) = a.height {
        spec.height = h;
    }
    if let Some(n) = a.train {
        spec.rig.train = n;
    }
    if let Some(n) = a.holdout {
        spec.rig.holdout = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    rec.seed = Some(spec.seed);
    rec.config("scene", &spec)?;
    let (manifest, _) = generate_synthetic(&spec, &a.out)?;
    println!(
        "wrote {} ({} train, {} holdout views at {}x{})",
        manifest.display(),
        spec.rig.train,
        spec.rig.holdout,
        spec.width,
        spec.height
    );
    rec.output("manifest", &manifest);
    finish(rec, record, &a.out)
}

fn pretrain_cmd(a: crate::PretrainArgs, record: Option<PathBuf>) -> Result<()> {
    let mut rec = Recorder::new("pretrain");
    let file = ConfigFile::load(a.train.config.as_deref())?;
    let data = load_data(&a.data)?;
    let mut fc = overlay(&FieldConfig::default(), file.field.as_ref(), "field")?;
    if let Some(v) = a.resolution {
        fc.resolution = v;
    }
    if let Some(v) = a.feature_dim {
        fc.feature_dim = v;
    }
    if let Some(v) = a.hidden {
        fc.hidden_width = v;
    }
    if let Some(v) = a.geom_dim {
        fc.geom_dim = v;
    }
    if let Some(v) = a.train.seed {
        fc.seed = v;
    }
    let mut config = train_config(Regime::Pretrain, &file, &a.train)?;
    if let Some(v) = a.lambda1 {
        config.weights.lambda1 = v;
    }
    if let Some(v) = a.lambda2 {
        config.weights.lambda2 = v;
    }
    if let Some(v) = a.checkpoint_interval {
        config.checkpoint_interval = v;
    }
    config.validate()?;
    let render = render_section(&file, a.eval_samples.or(Some(config.samples_per_ray)))?;
    rec.seed = Some(config.seed);
    rec.config("field", &fc)?;
    rec.config("train", &config)?;
    rec.config("render", &render)?;

    let mut sink = CliSink::new(a.train.metrics.as_deref())?;
    let (field, outcome) = pretrain(&data, &fc, &config, &mut sink)?;
    sink.close()?;
    save_checkpoint(&a.out, &field, &checkpoint_metrics(Regime::Pretrain, &outcome))?;
    rec.output("checkpoint", &a.out);
    if let Some(m) = &a.train.metrics {
        rec.output("metrics", m);
    }
    if let Some(loss) = outcome.final_loss() {
        rec.results.insert("final_loss".into(), loss);
    }
    let opts = RenderOptions {
        samples: render.samples,
        background: render.background,
        workers: config.workers,
        ..RenderOptions::default()
    };
    let scores = holdout_psnr(&field, &data, &opts)?;
    for (i, db) in &scores {
        println!("holdout frame {i}: {db:.2} dB");
    }
    if !scores.is_empty() {
        let mean = scores.iter().map(|s| s.1).sum::<f64>() / scores.len() as f64;
        println!("mean holdout PSNR: {mean:.2} dB");
        rec.results.insert("mean_holdout_psnr_db".into(), mean);
    }
    println!("wrote {} (version {})", a.out.display(), field.version);
    finish(rec, record, &a.out)
}

/// Stacks and tokens, in order, as one stack. Ids that collide with an earlier layer
/// are reassigned.
pub fn load_layers(paths: &[PathBuf]) -> Result<EditStack> {
    let mut stack = EditStack::new();
    for p in paths {
        let bytes = std::fs::read(p).with_context(|| format!("reading layer file {}", p.display()))?;
        let tokens = match bytes.get(..4) {
            Some(m) if m == STACK_MAGIC => EditStack::from_bytes(&bytes)?.tokens,
            Some(m) if m == TOKEN_MAGIC => vec![EditToken::from_bytes(&bytes)?],
            _ => {
                return Err(Error::Corrupt {
                    format: "layer file",
                    reason: format!("{} is neither an edit stack nor an edit token", p.display()),
                })
                .with_context(|| format!("reading layer file {}", p.display()))
            }
        };
        for mut t in tokens {
            if stack.get(t.id).is_some() {
                t.id = stack.next_id();
            }
            stack.push(t);
        }
    }
    Ok(stack)
}

fn render(a: crate::RenderArgs, record: Option<PathBuf>) -> Result<()> {
    let mut rec = Recorder::new("render");
    let file = ConfigFile::load(a.config.as_deref())?;
    let r = render_section(&file, a.samples)?;
    let field = load_field(&a.ckpt)?;
    let camera = match (&a.camera, a.frame, &a.data) {
        (Some(p), _, _) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading camera {}", p.display()))?;
            let c: Camera = toml::from_str(&text).map_err(|e| usage(format!("camera {}: {}", p.display(), e.message())))?;
            c.validate()?;
            c
        }
        (None, Some(i), Some(d)) => frame_camera(&load_data(d)?, i)?,
        _ => return Err(usage("give --camera, or --frame with --data")),
    };
    let stack = load_layers(&a.layers)?;
    let selection = a.sel.as_deref().map(load_selection).transpose()?;
    let want_mask = a.mask.is_some();
    let opts = RenderOptions {
        samples: r.samples,
        background: r.background,
        channels: Channels {
            features: false,
            coverage: want_mask,
        },
        // An empty stack renders like no stack at all.
        stack: (!stack.is_empty()).then_some(&stack),
        deletion: a.delete.zip(selection.as_ref()).map(|(mode, selection)| Deletion {
            selection,
            mode: mode.into(),
        }),
        coverage: if want_mask { selection.as_ref() } else { None },
        workers: positive("workers", a.workers)?,
    };
    rec.config("render", &r)?;
    rec.config("camera", &camera)?;
    rec.config(
        "layers",
        &stack.tokens.iter().map(|t| (t.id, t.enabled, t.label.clone())).collect::<Vec<_>>(),
    )?;
    let img = render_view(&camera, &field, &opts)?;
    save_rgb8(&a.out, img.width, img.height, &img.rgb)?;
    rec.output("rgb", &a.out);
    if let Some(p) = &a.depth {
        save_depth16(p, img.width, img.height, &img.depth, camera.near, camera.far)?;
        rec.output("depth", p);
    }
    if let Some(p) = &a.mask {
        let bits: Vec<bool> = img.coverage.iter().map(|c| *c >= PROJECTION_THRESHOLD).collect();
        save_mask(p, img.width, img.height, &bits)?;
        rec.output("mask", p);
    }
    println!(
        "wrote {} ({}x{}, field version {})",
        a.out.display(),
        img.width,
        img.height,
        field.version
    );
    finish(rec, record, &a.out)
}

fn select(a: crate::SelectArgs, record: Option<PathBuf>) -> Result<()> {
    let mut rec = Recorder::new("select");
    let file = ConfigFile::load(a.config.as_deref())?;
    let r = render_section(&file, a.samples)?;
    let field = load_field(&a.ckpt)?;
    let data = load_data(&a.data)?;
    let camera = frame_camera(&data, a.frame)?;
    let patch = match (a.rect, &a.bitmap) {
        (Some(r), None) => Patch::Rect {
            x: r.x,
            y: r.y,
            w: r.w,
            h: r.h,
        },
        (None, Some(p)) => {
            let (width, height, bits) = load_mask(p)?;
            Patch::Bitmap { width, height, bits }
        }
        _ => return Err(usage("give exactly one of --rect or --bitmap")),
    };
    if let Some(thr) = a.thr {
        if !(thr >= 0.0 && thr.is_finite()) {
            return Err(usage(format!("--thr must be finite and >= 0, got {thr}")));
        }
    }
    let f_bar = query_mean_feature(&camera, &patch, &field, r.samples)?;
    let thr = a.thr.unwrap_or_else(|| SelectionMask::calibrated_threshold(&f_bar));
    let sel = SelectionMask::new(f_bar, thr, field.version)?;
    sel.save(&a.out)?;
    rec.config("render", &r)?;
    rec.config("frame", &a.frame)?;
    rec.results.insert("thr".into(), thr as f64);
    rec.output("selection", &a.out);
    println!("threshold {thr:.6} over {} feature channels", sel.f_bar.len());
    if let Some((lo, hi)) = percentile_range(&feature_distances(&field, &sel.f_bar, SLIDER_PROBES, 0), 1.0, 99.0) {
        println!("feature distance 1st-99th percentile: {lo:.6} .. {hi:.6}");
    }
    if let Some(p) = &a.mask {
        let m = project_mask(&camera, &sel, &field, r.samples)?;
        save_mask(p, m.width, m.height, &m.bits)?;
        rec.output("mask", p);
        rec.results.insert("mask_pixels".into(), m.count() as f64);
        println!("projected mask: {} of {} pixels", m.count(), m.bits.len());
    }
    println!("wrote {}", a.out.display());
    finish(rec, record, &a.out)
}

fn context_export(a: crate::ExportArgs, record: Option<PathBuf>) -> Result<()> {
    let mut rec = Recorder::new("context export");
    let file = ConfigFile::load(a.config.as_deref())?;
    let base = overlay(&ContextConfig::default(), file.context.as_ref(), "context")?;
    let render = render_section(&file, None)?;
    let field = load_field(&a.ckpt)?;
    let data = load_data(&a.data)?;
    let sel = load_selection(&a.sel)?;
    let cameras = train_cameras(&data);
    positive("epochs", a.epochs)?;
    positive("samples", a.samples)?;

    let mut state = if a.restart || !ContextState::exists(&a.dir) {
        if a.restart {
            std::fs::remove_dir_all(a.dir.join("views")).ok();
        }
        ContextState {
            session: a.session.clone().unwrap_or_else(|| "session".into()),
            seed: a.seed.unwrap_or(base.seed),
            epochs: a
                .epochs
                .unwrap_or(if file.context.is_some() { base.epochs } else { DEFAULT_EPOCHS }),
            samples: a
                .samples
                .unwrap_or(if file.context.as_ref().is_some_and(|c| c.contains_key("samples")) {
                    base.samples
                } else {
                    render.samples
                }),
            next_epoch: 0,
            pending: None,
            views: Vec::new(),
        }
    } else {
        let s = ContextState::load(&a.dir)?;
        let differs = a.session.as_ref().is_some_and(|v| *v != s.session)
            || a.seed.is_some_and(|v| v != s.seed)
            || a.epochs.is_some_and(|v| v != s.epochs)
            || a.samples.is_some_and(|v| v != s.samples);
        if differs {
            return Err(usage(format!(
                "{} holds a session with other settings; pass --restart to start over",
                a.dir.display()
            )));
        }
        s
    };
    if state.done() {
        return Err(Error::Context(format!("all {} epochs already edited; pass --restart to start over", state.epochs)).into());
    }
    let history = state.history(&a.dir, &cameras)?;
    let config = ContextConfig {
        epochs: state.epochs,
        seed: state.seed,
        samples: state.samples,
        background: render.background,
    };
    rec.seed = Some(state.seed);
    rec.config("context", &config)?;
    let mut session = ContextSession::resume(state.session.clone(), cameras, config, history, state.next_epoch)?;
    let grid = session.next_grid(&field, &sel)?;
    let rgb = export_mosaic(grid, &a.dir)?;
    state.pending = Some(grid.provenance.clone());
    state.save(&a.dir)?;
    let (w, h) = grid.mosaic_size();
    println!("epoch {} of {}: wrote {} ({w}x{h})", grid.epoch + 1, state.epochs, rgb.display());
    for c in &grid.cells {
        println!("  train camera {:3}: {}", c.camera_id, c.role.name());
    }
    println!("edit the masked cells, then run `tpedit context import --dir {}`", a.dir.display());
    rec.output("mosaic", &rgb);
    rec.output("sidecar", &a.dir.join(SIDECAR_FILE));
    finish(rec, record, &rgb)
}

fn context_import(a: crate::ImportArgs) -> Result<()> {
    let mut state = ContextState::load(&a.dir)?;
    let sidecar_path = a.sidecar.clone().unwrap_or_else(|| a.dir.join(SIDECAR_FILE));
    let text = std::fs::read_to_string(&sidecar_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(sidecar_path.clone()),
        _ => Error::Io(e),
    })?;
    let side = Sidecar::parse(&text)?;
    let field = load_field(&a.ckpt)?;
    let pending = state
        .pending
        .clone()
        .ok_or_else(|| Error::Context("no exported grid is waiting for an edit; run `tpedit context export`".into()))?;
    pending.check(&side.provenance)?;
    Provenance {
        field_version: field.version,
        ..pending
    }
    .check(&side.provenance)?;
    let (w, h, rgb) = load_rgb8(&a.mosaic).with_context(|| format!("loading edited mosaic {}", a.mosaic.display()))?;
    if (w, h) != (2 * side.cell_width, 2 * side.cell_height) {
        return Err(Error::Context(format!(
            "edited mosaic is {w}x{h}, expected {}x{}",
            2 * side.cell_width,
            2 * side.cell_height
        ))
        .into());
    }
    let views = side.editable_views(&rgb)?;
    for v in &views {
        state.store(&a.dir, side.cell_width, side.cell_height, v)?;
    }
    state.next_epoch = side.provenance.epoch + 1;
    state.pending = None;
    state.save(&a.dir)?;
    let ids: Vec<String> = views.iter().map(|v| v.camera_id.to_string()).collect();
    println!(
        "recorded {} edited views (train cameras {}); {} stored in total",
        views.len(),
        ids.join(", "),
        state.views.len()
    );
    if state.done() {
        println!(
            "all {} epochs edited; train with `tpedit edit` or `tpedit finetune` on this directory",
            state.epochs
        );
    } else {
        println!(
            "next: optionally `tpedit finetune`, then `tpedit context export` for epoch {} of {}",
            state.next_epoch + 1,
            state.epochs
        );
    }
    Ok(())
}

fn stale(expected: u64, found: u64) -> Error {
    Error::StaleProvenance {
        expected: format!("field version {expected}"),
        found: format!("field version {found}"),
    }
}

/// Training views from a context directory's stored edits, or from an edited mosaic
/// and its sidecar.
fn edited_views(context: &Path, sidecar: Option<&Path>, field: &TriPlaneField, cameras: &[Camera]) -> Result<Vec<TrainView>> {
    let (ids_rgb, what): (Vec<(usize, Vec<f32>)>, _) = if context.is_dir() {
        let state = ContextState::load(context)?;
        let h = state.history(context, cameras)?;
        (h.views.into_iter().map(|v| (v.camera_id, v.rgb)).collect(), "context directory")
    } else {
        let sc = sidecar
            .map(Path::to_path_buf)
            .unwrap_or_else(|| context.with_file_name(SIDECAR_FILE));
        let text = std::fs::read_to_string(&sc).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(sc.clone()),
            _ => Error::Io(e),
        })?;
        let side = Sidecar::parse(&text)?;
        if side.provenance.field_version != field.version {
            return Err(stale(field.version, side.provenance.field_version).into());
        }
        let (w, h, rgb) = load_rgb8(context)?;
        if (w, h) != (2 * side.cell_width, 2 * side.cell_height) {
            return Err(Error::Context(format!(
                "edited mosaic is {w}x{h}, sidecar describes {}x{} cells",
                side.cell_width, side.cell_height
            ))
            .into());
        }
        (
            side.editable_views(&rgb)?.into_iter().map(|v| (v.camera_id, v.rgb)).collect(),
            "mosaic",
        )
    };
    if ids_rgb.is_empty() {
        return Err(Error::Context(format!("{what} {} holds no edited views", context.display())).into());
    }
    ids_rgb
        .into_iter()
        .map(|(id, rgb)| {
            let camera = *cameras
                .get(id)
                .ok_or_else(|| Error::Context(format!("edited view names train camera {id} of {}", cameras.len())))?;
            if rgb.len() != 3 * (camera.width as usize) * (camera.height as usize) {
                return Err(Error::DimMismatch {
                    what: "edited view",
                    expected: 3 * (camera.width as usize) * (camera.height as usize),
                    got: rgb.len(),
                }
                .into());
            }
            Ok(TrainView::new(camera, rgb))
        })
        .collect()
}

fn edit(a: crate::EditArgs, record: Option<PathBuf>) -> Result<()> {
    let mut rec = Recorder::new("edit");
    let file = ConfigFile::load(a.train.config.as_deref())?;
    let field = load_field(&a.ckpt)?;
    let data = load_data(&a.data)?;
    let sel = load_selection(&a.sel)?;
    let mut config = train_config(Regime::EditResidual, &file, &a.train)?;
    config.edit_kind = a.kind.into();
    config.validate()?;
    let views = edited_views(&a.context, a.sidecar.as_deref(), &field, &train_cameras(&data))?;
    rec.seed = Some(config.seed);
    rec.config("train", &config)?;
    let label = a.label.clone().unwrap_or_else(|| "edit".into());
    let mut sink = CliSink::new(a.train.metrics.as_deref())?;
    let (token, outcome) = train_token(&field, &views, &sel, &config, 1, &label, &mut sink)?;
    sink.close()?;
    let bytes = token.to_bytes()?;
    atomic_write(&a.out, &bytes)?;
    rec.output("token", &a.out);
    rec.results.insert("token_bytes".into(), bytes.len() as f64);
    if let Some(loss) = outcome.final_loss() {
        rec.results.insert("final_loss".into(), loss);
    }
    println!(
        "trained {} iterations on {} edited views; wrote {} ({} bytes)",
        outcome.metrics.len(),
        views.len(),
        a.out.display(),
        bytes.len()
    );
    finish(rec, record, &a.out)
}

fn finetune(a: crate::FinetuneArgs, record: Option<PathBuf>) -> Result<()> {
    let mut rec = Recorder::new("finetune");
    let file = ConfigFile::load(a.train.config.as_deref())?;
    let mut field = load_field(&a.ckpt)?;
    let data = load_data(&a.data)?;
    let sel = load_selection(&a.sel)?;
    let cameras = train_cameras(&data);
    if !a.context.is_dir() {
        return Err(usage("--context must be a context directory"));
    }
    let state = ContextState::load(&a.context)?;
    let history = state.history(&a.context, &cameras)?;
    if history.is_empty() {
        return Err(Error::Context(format!(
            "{} holds no edited views; import an edited mosaic first",
            a.context.display()
        ))
        .into());
    }
    let mut config = train_config(Regime::Finetune, &file, &a.train)?;
    if a.train.iters.is_none() {
        let passes = positive("epochs", a.epochs)?.unwrap_or(1);
        let pixels: usize = history.views.iter().map(|v| v.rgb.len() / 3).sum();
        config.iterations = passes * pixels.div_ceil(config.rays_per_batch.max(1)).max(1);
    }
    config.validate()?;
    rec.seed = Some(config.seed);
    rec.config("train", &config)?;
    let mut sink = CliSink::new(a.train.metrics.as_deref())?;
    let outcome = finetune_on_history(&mut field, &cameras, &history, &sel, &config, &mut sink)?;
    sink.close()?;
    save_checkpoint(&a.out, &field, &checkpoint_metrics(Regime::Finetune, &outcome))?;
    rec.output("checkpoint", &a.out);
    if let Some(loss) = outcome.final_loss() {
        rec.results.insert("final_loss".into(), loss);
    }
    println!(
        "fine-tuned {} iterations on {} edited views; wrote {} (version {})",
        outcome.metrics.len(),
        history.len(),
        a.out.display(),
        field.version
    );
    finish(rec, record, &a.out)
}

fn load_stack_file(path: &Path) -> Result<EditStack> {
    let bytes = std::fs::read(path).with_context(|| format!("reading stack {}", path.display()))?;
    if bytes.get(..4) != Some(&STACK_MAGIC[..]) {
        return Err(usage(format!(
            "{} is not an edit stack; combine tokens into one with `tpedit layers merge`",
            path.display()
        )));
    }
    Ok(EditStack::from_bytes(&bytes)?)
}

fn save_stack(path: &Path, stack: &EditStack) -> Result<()> {
    atomic_write(path, &stack.to_bytes()?)?;
    Ok(())
}

fn print_stack(stack: &EditStack) {
    for t in &stack.tokens {
        println!(
            "{:4}  {:7}  {:8}  thr {:<10.4}  {}",
            t.id,
            if t.enabled { "on" } else { "off" },
            format!("{:?}", t.kind).to_lowercase(),
            t.selection.thr,
            t.label
        );
    }
}

fn missing_layer(id: u64) -> anyhow::Error {
    usage(format!("no layer with id {id}"))
}

fn layers(c: LayersCommand) -> Result<()> {
    match c {
        LayersCommand::List { files } => {
            for f in &files {
                let stack = load_layers(std::slice::from_ref(f))?;
                println!("{} ({} layers)", f.display(), stack.len());
                print_stack(&stack);
            }
        }
        LayersCommand::Toggle { stack: path, id, enabled } => {
            let mut stack = load_stack_file(&path)?;
            let on = match enabled {
                Some(v) => {
                    stack.set_enabled(id, v).map_err(|_| missing_layer(id))?;
                    v
                }
                None => stack.toggle(id).map_err(|_| missing_layer(id))?,
            };
            save_stack(&path, &stack)?;
            println!("layer {id} {}", if on { "enabled" } else { "disabled" });
        }
        LayersCommand::Merge { out, files } => {
            let stack = load_layers(&files)?;
            save_stack(&out, &stack)?;
            println!("wrote {} ({} layers)", out.display(), stack.len());
            print_stack(&stack);
        }
        LayersCommand::Delete { stack: path, id } => {
            let mut stack = load_stack_file(&path)?;
            let t = stack.delete(id).map_err(|_| missing_layer(id))?;
            save_stack(&path, &stack)?;
            println!("deleted layer {id} ({}); {} left", t.label, stack.len());
        }
        LayersCommand::Reorder { stack: path, order } => {
            let mut stack = load_stack_file(&path)?;
            stack.reorder(&order).map_err(|e| usage(e.to_string()))?;
            save_stack(&path, &stack)?;
            print_stack(&stack);
        }
    }
    Ok(())
}

fn serve(a: crate::ServeArgs) -> Result<()> {
    let file = ConfigFile::load(a.config.as_deref())?;
    let render = render_section(&file, a.samples)?;
    let context = overlay(&ContextConfig::default(), file.context.as_ref(), "context")?;
    let (field, metrics) = load_checkpoint(&a.ckpt).with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    let data = load_data(&a.data)?;
    let stack = load_layers(&a.layers)?;
    let config = ServiceConfig {
        session: a.session.clone(),
        samples: render.samples,
        context,
        cors_origin: a.cors_origin.clone(),
        workers: positive("workers", a.workers)?,
        ..ServiceConfig::default()
    };
    let state = AppState::new(data, field, metrics, stack, config)?;
    let addr = SocketAddr::new(a.bind, a.port);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting runtime")?;
    println!("serving on http://{addr}");
    rt.block_on(triplane_service::serve(state, addr))
        .with_context(|| format!("serving on {addr}"))?;
    Ok(())
}
