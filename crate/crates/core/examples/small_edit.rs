//! Small appearance edit: select the sphere, export a 2x2 context, rotate its hue
//! inside the mask, train a residual token and check unseen views.
//!
//! Run `reconstruct` first; it leaves a checkpoint in the temp directory. An optional
//! argument overrides the learning rate.

use std::time::Instant;

use triplane_edit::context::{compose_grid, pick_context_cameras, EditHistory};
use triplane_edit::edit::{masked_psnr, max_deviation, permute_channels, render_with_coverage, train_token, unmasked_pixels};
use triplane_edit::io::{load_checkpoint, SceneOracle, Split, SyntheticSpec};
use triplane_edit::render::{render_view, Camera, RenderOptions};
use triplane_edit::select::query_mean_feature;
use triplane_edit::train::{TrainConfig, TrainView};
use triplane_edit::{EditStack, Patch, SelectionMask};

fn main() -> triplane_edit::Result<()> {
    let (field, _) = load_checkpoint(&std::env::temp_dir().join("reconstruct.pnck"))?;
    let spec = SyntheticSpec::two_objects(128, 128);
    let oracle = SceneOracle::new(spec.clone())?;
    let all = spec.cameras();
    let train: Vec<Camera> = all.iter().filter(|(_, s)| *s == Split::Train).map(|(c, _)| *c).collect();
    let holdout: Vec<Camera> = all.iter().filter(|(_, s)| *s == Split::Holdout).map(|(c, _)| *c).collect();

    // Query the sphere from the first training view.
    let sil = oracle.visible_silhouette(&train[0], 0)?;
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for (i, on) in sil.iter().enumerate() {
        if *on {
            sx += (i % 128) as f64;
            sy += (i / 128) as f64;
            n += 1.0;
        }
    }
    let patch = Patch::Rect {
        x: (sx / n) as u32 - 3,
        y: (sy / n) as u32 - 3,
        w: 7,
        h: 7,
    };
    let f_bar = query_mean_feature(&train[0], &patch, &field, 64)?;
    let sel = SelectionMask::new(f_bar.clone(), SelectionMask::calibrated_threshold(&f_bar), field.version)?;

    let opts = RenderOptions {
        samples: 64,
        ..RenderOptions::default()
    };
    let ids = pick_context_cameras(&train, 0, 0, &EditHistory::default())?;
    let grid = compose_grid(ids, &train, 0, &field, &sel, &EditHistory::default(), &opts, "example")?;
    let mosaic = grid.mosaic();
    let mut edited = mosaic.rgb.clone();
    permute_channels(&mut edited, &mosaic.mask)?;
    let views: Vec<TrainView> = grid
        .slice(&edited)?
        .into_iter()
        .map(|v| TrainView::new(train[v.camera_id], v.rgb))
        .collect();

    let config = TrainConfig {
        samples_per_ray: 64,
        learning_rate: std::env::args()
            .nth(1)
            .and_then(|a| a.parse().ok())
            .unwrap_or(TrainConfig::edit_residual().learning_rate),
        ..TrainConfig::edit_residual()
    };
    let start = Instant::now();
    let (token, outcome) = train_token(&field, &views, &sel, &config, 1, "hue", &mut ())?;
    println!(
        "trained {} iterations in {:.1} s, final loss {:.5}",
        outcome.metrics.len(),
        start.elapsed().as_secs_f64(),
        outcome.final_loss().unwrap_or(f64::NAN)
    );
    let bytes = token.to_bytes()?.len();
    let mut stack = EditStack::new();
    stack.push(token);

    for (k, cam) in holdout.iter().enumerate() {
        let before = render_with_coverage(cam, &field, &sel, &opts)?;
        let mut target = before.rgb.clone();
        permute_channels(&mut target, &before.mask)?;
        let after = render_view(
            cam,
            &field,
            &RenderOptions {
                stack: Some(&stack),
                ..opts.clone()
            },
        )?;
        let outside = unmasked_pixels(&before.coverage);
        println!(
            "holdout {k}: masked PSNR {:.2} dB over {} px, unmasked max deviation {:.4} ({:.2}/255) over {} px",
            masked_psnr(&after.rgb, &target, &before.mask)?,
            before.mask.iter().filter(|m| **m).count(),
            max_deviation(&after.rgb, &before.rgb, &outside)?,
            255.0 * max_deviation(&after.rgb, &before.rgb, &outside)?,
            outside.iter().filter(|m| **m).count()
        );
    }
    println!("token {bytes} bytes");
    Ok(())
}
