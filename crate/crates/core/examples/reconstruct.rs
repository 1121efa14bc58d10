//! Trains a field on a synthetic two-object scene and reports holdout PSNR.
//!
//! `cargo run --release -p triplane-edit --example reconstruct -- [iterations] [resolution]`

use std::time::Instant;

use triplane_edit::io::{SceneOracle, Split, SyntheticSpec};
use triplane_edit::render::{render_view, RenderOptions};
use triplane_edit::train::{image_psnr, run_training, TrainConfig, TrainInputs, TrainView};
use triplane_edit::{FieldConfig, TriPlaneField};

fn main() -> triplane_edit::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iterations = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let resolution = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(64);
    let rays = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(192);
    let lr = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-2);
    let l1: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let l2: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let spec = SyntheticSpec::two_objects(128, 128);
    let oracle = SceneOracle::new(spec.clone())?;
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for (camera, split) in spec.cameras() {
        let img = oracle.render(&camera)?;
        match split {
            Split::Train => train.push(TrainView {
                feature: Some(img.feature),
                ..TrainView::new(camera, img.rgb)
            }),
            Split::Holdout => holdout.push((camera, img.rgb)),
        }
    }

    let mut field = TriPlaneField::new(&FieldConfig {
        resolution,
        feature_dim: 8,
        hidden_width: 32,
        geom_dim: 16,
        sem_dim: spec.feature_dim,
        bounds: spec.bounds(),
        seed: 1,
        ..FieldConfig::default()
    })?;
    let config = TrainConfig {
        iterations,
        rays_per_batch: rays,
        samples_per_ray: 64,
        learning_rate: lr,
        ..TrainConfig::pretrain()
    };
    let mut config = config;
    config.weights.lambda1 = l1;
    config.weights.lambda2 = l2;
    let start = Instant::now();
    let outcome = run_training(
        &mut field,
        &TrainInputs {
            views: &train,
            selection: None,
        },
        &config,
        &mut (),
    )?;
    println!(
        "trained {iterations} iterations in {:.1}s, final loss {:.5}",
        start.elapsed().as_secs_f64(),
        outcome.final_loss().unwrap_or(f64::NAN)
    );
    println!("{:?}", outcome.metrics.last());
    let opts = RenderOptions {
        samples: 64,
        ..RenderOptions::default()
    };
    for (camera, target) in &holdout {
        let img = render_view(camera, &field, &opts)?;
        println!("holdout psnr {:.2} dB", image_psnr(&img.rgb, target)?);
    }
    let out = std::env::temp_dir().join("reconstruct.pnck");
    triplane_edit::io::save_checkpoint(&out, &field, &Default::default())?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}
