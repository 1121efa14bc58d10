//! Selects an object by feature distance on a trained synthetic scene and scores the
//! 3D predicate, its 2D projection and deletion against the analytic oracle.
//!
//! Run `reconstruct` first; it leaves a checkpoint in the temp directory.

use triplane_edit::io::{load_checkpoint, SceneOracle, Split, SyntheticSpec};
use triplane_edit::math::Vec3;
use triplane_edit::render::{render_view, RenderOptions};
use triplane_edit::select::{apply_deletion, iou, mask_predicate, project_mask, query_mean_feature, DeletionMode};
use triplane_edit::train::image_psnr;
use triplane_edit::{Patch, SelectionMask};

fn main() -> triplane_edit::Result<()> {
    let ckpt = std::env::temp_dir().join("reconstruct.pnck");
    let (field, _) = load_checkpoint(&ckpt)?;
    let spec = SyntheticSpec::two_objects(128, 128);
    let oracle = SceneOracle::new(spec.clone())?;
    let cameras = spec.cameras();
    let (camera, _) = cameras.iter().find(|(_, s)| *s == Split::Holdout).copied().expect("holdout view");

    for target in [0usize, 1] {
        // Query patch: a small square around the visible silhouette's centroid.
        let sil = oracle.visible_silhouette(&camera, target)?;
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for (i, on) in sil.iter().enumerate() {
            if *on {
                sx += (i % camera.width as usize) as f64;
                sy += (i / camera.width as usize) as f64;
                n += 1.0;
            }
        }
        let (cx, cy) = ((sx / n) as u32, (sy / n) as u32);
        let patch = Patch::Rect {
            x: cx - 3,
            y: cy - 3,
            w: 7,
            h: 7,
        };
        let f_bar = query_mean_feature(&camera, &patch, &field, 64)?;
        let thr = SelectionMask::calibrated_threshold(&f_bar);
        let sel = SelectionMask::new(f_bar.clone(), thr, field.version)?;

        let r = 32;
        let (mut pred, mut truth) = (Vec::new(), Vec::new());
        for k in 0..r {
            for j in 0..r {
                for i in 0..r {
                    let s = Vec3::new(
                        (i as f64 + 0.5) / r as f64,
                        (j as f64 + 0.5) / r as f64,
                        (k as f64 + 0.5) / r as f64,
                    );
                    let p = field.bounds.lerp(s);
                    pred.push(mask_predicate(p, &sel, &field)?);
                    truth.push(oracle.member(p, target));
                }
            }
        }
        let mask = project_mask(&camera, &sel, &field, 64)?;
        let deleted = render_view(
            &camera,
            &field,
            &RenderOptions {
                samples: 64,
                deletion: apply_deletion(&sel, true, DeletionMode::Selected),
                ..RenderOptions::default()
            },
        )?;
        let without = oracle.without(target).render(&camera)?;
        println!(
            "object {target}: f_bar {:?}\n  3D IoU {:.3}  2D IoU {:.3}  deletion PSNR {:.2} dB",
            f_bar.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
            iou(&pred, &truth),
            iou(&mask.bits, &sil),
            image_psnr(&deleted.rgb, &without.rgb)?
        );
    }
    Ok(())
}
