//! Dataset-level steps shared by the command line and the service.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::field::{FieldConfig, TriPlaneField};
use crate::io::Dataset;
use crate::render::{render_view, RenderOptions};
use crate::train::{image_psnr, run_training, ProgressSink, Regime, TrainConfig, TrainInputs, TrainOutcome};

/// `base` with the scene box and semantic width taken from the dataset. Datasets
/// without feature images keep `base.sem_dim`.
pub fn field_config_for(dataset: &Dataset, base: &FieldConfig) -> FieldConfig {
    FieldConfig {
        bounds: dataset.bounds(),
        sem_dim: dataset.feature_dim.unwrap_or(base.sem_dim),
        ..base.clone()
    }
}

/// Builds a fresh field for `dataset` and pretrains it on the train split. The feature
/// term is dropped when the dataset has no feature images.
pub fn pretrain(
    dataset: &Dataset,
    field_config: &FieldConfig,
    config: &TrainConfig,
    sink: &mut (dyn ProgressSink + Send),
) -> Result<(TriPlaneField, TrainOutcome)> {
    let views = dataset.train_views();
    if views.is_empty() {
        return Err(Error::Empty("train split"));
    }
    let mut config = config.clone();
    if dataset.feature_dim.is_none() {
        config.feature_weight = 0.0;
    }
    let mut field = TriPlaneField::new(&field_config_for(dataset, field_config))?;
    let outcome = run_training(
        &mut field,
        &TrainInputs {
            views: &views,
            selection: None,
        },
        &config,
        sink,
    )?;
    Ok((field, outcome))
}

/// Checkpoint metrics summary of a finished run. Only deterministic quantities go in,
/// so equal runs write byte-equal checkpoints.
pub fn checkpoint_metrics(regime: Regime, outcome: &TrainOutcome) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("regime".to_string(), regime.name().to_string());
    m.insert("iterations".to_string(), outcome.metrics.len().to_string());
    if let Some(loss) = outcome.final_loss() {
        m.insert("final_loss".to_string(), format!("{loss:e}"));
    }
    m
}

/// PSNR of every holdout frame, as `(frame index, dB)`.
pub fn holdout_psnr(field: &TriPlaneField, dataset: &Dataset, options: &RenderOptions<'_>) -> Result<Vec<(usize, f64)>> {
    dataset
        .holdout()
        .map(|f| Ok((f.index, image_psnr(&render_view(&f.camera, field, options)?.rgb, &f.rgb)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{generate_synthetic, load_dataset, SyntheticSpec};

    #[test]
    fn short_pretrain_improves_on_the_initial_field() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = SyntheticSpec::two_objects(16, 16);
        spec.rig.train = 4;
        spec.rig.holdout = 1;
        let (manifest, _) = generate_synthetic(&spec, dir.path()).unwrap();
        let data = load_dataset(&manifest).unwrap();
        let base = FieldConfig {
            resolution: 16,
            feature_dim: 4,
            hidden_width: 16,
            geom_dim: 8,
            ..FieldConfig::default()
        };
        let opts = RenderOptions {
            samples: 32,
            ..RenderOptions::default()
        };
        let untrained = TriPlaneField::new(&field_config_for(&data, &base)).unwrap();
        let before = holdout_psnr(&untrained, &data, &opts).unwrap();
        let config = TrainConfig {
            iterations: 150,
            rays_per_batch: 64,
            samples_per_ray: 32,
            ..TrainConfig::pretrain()
        };
        let (field, outcome) = pretrain(&data, &base, &config, &mut ()).unwrap();
        assert_eq!(field.sem_dim(), 8);
        assert_eq!(outcome.metrics.len(), 150);
        let after = holdout_psnr(&field, &data, &opts).unwrap();
        assert_eq!(after.len(), 1);
        assert!(after[0].1 > before[0].1 + 3.0, "before {before:?} after {after:?}");
    }
}
