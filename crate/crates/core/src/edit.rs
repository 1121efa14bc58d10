//! Edit workflows shared by the command line and the service: training a residual
//! token from edited views, fine-tuning on an edit history, and the image metrics
//! used to judge an edit.

use crate::context::EditHistory;
use crate::error::{Error, Result};
use crate::field::TriPlaneField;
use crate::render::{render_view, Camera, Channels, RenderOptions};
use crate::select::{SelectionMask, PROJECTION_THRESHOLD};
use crate::stack::EditToken;
use crate::train::{psnr, run_training, ProgressSink, Regime, TrainConfig, TrainInputs, TrainOutcome, TrainView};

/// Largest selected weight a pixel may carry and still count as untouched by an edit.
pub const UNMASKED_COVERAGE: f32 = 1.0 / 255.0;

fn check_mask(rgb: &[f32], mask: &[bool]) -> Result<()> {
    if rgb.len() != 3 * mask.len() {
        return Err(Error::DimMismatch {
            what: "rgb vs mask",
            expected: 3 * mask.len(),
            got: rgb.len(),
        });
    }
    Ok(())
}

/// Rotates the color channels, `(r, g, b) -> (g, b, r)`, inside the mask. A pure hue
/// rotation by 120 degrees that keeps every value in range.
pub fn permute_channels(rgb: &mut [f32], mask: &[bool]) -> Result<()> {
    check_mask(rgb, mask)?;
    for (px, m) in rgb.chunks_mut(3).zip(mask) {
        if *m {
            let (r, g, b) = (px[0], px[1], px[2]);
            px.copy_from_slice(&[g, b, r]);
        }
    }
    Ok(())
}

/// PSNR over the pixels where `mask` is set.
pub fn masked_psnr(a: &[f32], b: &[f32], mask: &[bool]) -> Result<f64> {
    check_mask(a, mask)?;
    check_mask(b, mask)?;
    let (mut s, mut n) = (0.0f64, 0usize);
    for (i, m) in mask.iter().enumerate() {
        if *m {
            for c in 0..3 {
                let d = a[3 * i + c] as f64 - b[3 * i + c] as f64;
                s += d * d;
            }
            n += 3;
        }
    }
    if n == 0 {
        return Err(Error::Empty("masked region"));
    }
    Ok(psnr(s / n as f64))
}

/// Largest per-channel difference over the pixels where `mask` is set.
pub fn max_deviation(a: &[f32], b: &[f32], mask: &[bool]) -> Result<f32> {
    check_mask(a, mask)?;
    check_mask(b, mask)?;
    Ok(mask
        .iter()
        .enumerate()
        .filter(|(_, m)| **m)
        .flat_map(|(i, _)| (0..3).map(move |c| (a[3 * i + c] - b[3 * i + c]).abs()))
        .fold(0.0, f32::max))
}

/// Pixels an edit confined to the selection cannot visibly change: the selected
/// samples carry at most [`UNMASKED_COVERAGE`] of the composited weight.
pub fn unmasked_pixels(coverage: &[f32]) -> Vec<bool> {
    coverage.iter().map(|c| *c <= UNMASKED_COVERAGE).collect()
}

/// Color, depth, projected mask and selection coverage of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRender {
    pub rgb: Vec<f32>,
    pub depth: Vec<f32>,
    pub mask: Vec<bool>,
    pub coverage: Vec<f32>,
}

pub fn render_with_coverage(
    camera: &Camera,
    field: &TriPlaneField,
    selection: &SelectionMask,
    options: &RenderOptions<'_>,
) -> Result<ViewRender> {
    let opts = RenderOptions {
        channels: Channels {
            coverage: true,
            ..options.channels
        },
        coverage: Some(selection),
        ..options.clone()
    };
    let img = render_view(camera, field, &opts)?;
    Ok(ViewRender {
        mask: img.coverage.iter().map(|c| *c >= PROJECTION_THRESHOLD).collect(),
        rgb: img.rgb,
        depth: img.depth,
        coverage: img.coverage,
    })
}

/// Trains a residual head on `views` and returns it as a token. The field itself is
/// untouched; training runs on a copy.
pub fn train_token(
    field: &TriPlaneField,
    views: &[TrainView],
    selection: &SelectionMask,
    config: &TrainConfig,
    id: u64,
    label: &str,
    sink: &mut (dyn ProgressSink + Send),
) -> Result<(EditToken, TrainOutcome)> {
    if config.regime != Regime::EditResidual {
        return Err(Error::Config(format!(
            "token training needs the edit_residual regime, got {}",
            config.regime.name()
        )));
    }
    let mut work = field.clone();
    let inputs = TrainInputs {
        views,
        selection: Some(selection),
    };
    let outcome = run_training(&mut work, &inputs, config, sink)?;
    let token = EditToken::new(id, work.edit_kind, work.edit, selection.clone(), label)?;
    Ok((token, outcome))
}

/// Training views for every edited view in `history`: the edited color, plus the
/// current field's depth and projected selection for the depth term.
pub fn history_views(
    field: &TriPlaneField,
    cameras: &[Camera],
    history: &EditHistory,
    selection: &SelectionMask,
    samples: usize,
) -> Result<Vec<TrainView>> {
    let opts = RenderOptions {
        samples,
        ..RenderOptions::default()
    };
    history
        .views
        .iter()
        .map(|v| {
            let camera = *cameras
                .get(v.camera_id)
                .ok_or_else(|| Error::Context(format!("camera {} not in dataset", v.camera_id)))?;
            let r = render_with_coverage(&camera, field, selection, &opts)?;
            let mut view = TrainView::new(camera, v.rgb.clone());
            view.depth = Some(r.depth);
            view.mask = Some(r.mask);
            Ok(view)
        })
        .collect()
}

/// Fine-tunes every field block on the edited views of `history`. With
/// `config.iterations == 0` the run makes one pass over those views.
pub fn finetune_on_history(
    field: &mut TriPlaneField,
    cameras: &[Camera],
    history: &EditHistory,
    selection: &SelectionMask,
    config: &TrainConfig,
    sink: &mut (dyn ProgressSink + Send),
) -> Result<TrainOutcome> {
    if config.regime != Regime::Finetune {
        return Err(Error::Config(format!(
            "history fine-tuning needs the finetune regime, got {}",
            config.regime.name()
        )));
    }
    let views = history_views(field, cameras, history, selection, config.samples_per_ray)?;
    let mut config = config.clone();
    if config.iterations == 0 {
        config.iterations = config.iterations_per_pass(&views);
    }
    let inputs = TrainInputs {
        views: &views,
        selection: Some(selection),
    };
    run_training(field, &inputs, &config, sink)
}
