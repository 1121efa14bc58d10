//! Iterative context protocol against single-view fine-tuning on the same hue edit.
//!
//! Three context epochs edit 4 + 2 + 2 views, each followed by a fine-tune pass over
//! every view edited so far. The ablation edits one view and fine-tunes for the same
//! total number of iterations. Both are scored on the holdout views.
//!
//! Run `reconstruct` first; it leaves a checkpoint in the temp directory.

use triplane_edit::context::{CellRole, ContextConfig, ContextSession, EditHistory, EditedView, Step};
use triplane_edit::edit::{finetune_on_history, permute_channels, render_with_coverage};
use triplane_edit::io::{load_checkpoint, SceneOracle, Split, SyntheticSpec};
use triplane_edit::render::{render_view, Camera, RenderOptions};
use triplane_edit::select::query_mean_feature;
use triplane_edit::train::{image_psnr, TrainConfig};
use triplane_edit::{Patch, SelectionMask, TriPlaneField};

fn main() -> triplane_edit::Result<()> {
    let (field, _) = load_checkpoint(&std::env::temp_dir().join("reconstruct.pnck"))?;
    let spec = SyntheticSpec::two_objects(128, 128);
    let oracle = SceneOracle::new(spec.clone())?;
    let all = spec.cameras();
    let train: Vec<Camera> = all.iter().filter(|(_, s)| *s == Split::Train).map(|(c, _)| *c).collect();
    let holdout: Vec<Camera> = all.iter().filter(|(_, s)| *s == Split::Holdout).map(|(c, _)| *c).collect();

    let sil = oracle.visible_silhouette(&train[0], 0)?;
    let on: Vec<usize> = (0..sil.len()).filter(|i| sil[*i]).collect();
    let cx = on.iter().map(|i| i % 128).sum::<usize>() / on.len();
    let cy = on.iter().map(|i| i / 128).sum::<usize>() / on.len();
    let patch = Patch::Rect {
        x: cx as u32 - 3,
        y: cy as u32 - 3,
        w: 7,
        h: 7,
    };
    let f_bar = query_mean_feature(&train[0], &patch, &field, 64)?;
    let sel = SelectionMask::new(f_bar.clone(), SelectionMask::calibrated_threshold(&f_bar), field.version)?;
    let opts = RenderOptions {
        samples: 64,
        ..RenderOptions::default()
    };

    // Targets: the rotation applied to each pre-edit holdout render inside its mask.
    let mut targets = Vec::new();
    for cam in &holdout {
        let r = render_with_coverage(cam, &field, &sel, &opts)?;
        let mut t = r.rgb;
        permute_channels(&mut t, &r.mask)?;
        targets.push(t);
    }
    let score = |f: &TriPlaneField| -> triplane_edit::Result<f64> {
        let mut sum = 0.0;
        for (cam, t) in holdout.iter().zip(&targets) {
            sum += image_psnr(&render_view(cam, f, &opts)?.rgb, t)?;
        }
        Ok(sum / holdout.len() as f64)
    };
    println!("before editing: holdout PSNR vs target {:.2} dB", score(&field)?);

    let config = TrainConfig {
        iterations: 0,
        samples_per_ray: 64,
        ..TrainConfig::finetune()
    };

    let mut iterative = field.clone();
    let mut session = ContextSession::new(
        "iterative",
        train.clone(),
        ContextConfig {
            samples: 64,
            ..ContextConfig::default()
        },
    )?;
    // The editor is consistent across views: a fresh cell gets the rotation of that
    // view's pre-edit appearance, not of what the partly fine-tuned field shows now.
    let edit_of = |id: usize| -> triplane_edit::Result<Vec<f32>> {
        let r = render_with_coverage(&train[id], &field, &sel, &opts)?;
        let mut rgb = r.rgb;
        permute_channels(&mut rgb, &r.mask)?;
        Ok(rgb)
    };
    let mut grid = session.start(&iterative, &sel)?.clone();
    let mut total_iterations = 0;
    loop {
        for cell in grid.cells.iter_mut().filter(|c| c.role == CellRole::EditableMasked) {
            cell.rgb = edit_of(cell.camera_id)?;
        }
        let edited = grid.mosaic().rgb;
        let step = session.advance_epoch(&edited, &mut iterative, &sel, &mut |f, history| {
            let out = finetune_on_history(f, &train, history, &sel, &config, &mut ())?;
            total_iterations += out.metrics.len();
            println!("  epoch over {} edited views: {} iterations", history.len(), out.metrics.len());
            Ok(())
        })?;
        match step {
            Step::Next(g) => grid = *g,
            Step::Done => break,
        }
    }
    println!("iterative 2x2 protocol: holdout PSNR vs target {:.2} dB", score(&iterative)?);

    let mut single = field.clone();
    let first = session.history.views[0].camera_id;
    let history = EditHistory {
        views: vec![EditedView {
            camera_id: first,
            epoch: 0,
            rgb: edit_of(first)?,
        }],
    };
    let single_config = TrainConfig {
        iterations: total_iterations,
        ..config
    };
    finetune_on_history(&mut single, &train, &history, &sel, &single_config, &mut ())?;
    println!(
        "single-view fine-tune ({total_iterations} iterations): holdout PSNR vs target {:.2} dB",
        score(&single)?
    );
    Ok(())
}
