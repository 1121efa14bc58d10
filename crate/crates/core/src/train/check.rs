//! Central finite-difference check of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::grad::{evaluate, smoothness_signature, Batch, BatchRay, BlockSet, DensityProbe, DepthTarget, Objective};
use super::loss::LossWeights;
use crate::error::Result;
use crate::field::{BlockId, EditKind, FeaturePlane, FieldConfig, TriPlaneField};
use crate::math::Vec3;

/// Outcome of a gradient check.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Parameters for which no step size kept every kink on one side.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst: Option<(BlockId, usize)>,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients against central differences for every parameter of
/// the `trainable` blocks.
///
/// Parameters are stored in single precision, so the step actually taken is the
/// difference of the rounded perturbed values. A parameter whose perturbation moves
/// the batch across a non-smooth point (rectifier sign, clamp, box boundary, sign of
/// a plane entry under L1) is retried with smaller steps; if every step crosses one,
/// it is counted in `skipped` instead of compared.
pub fn gradient_check(
    field: &TriPlaneField,
    batch: &Batch,
    objective: &Objective,
    trainable: BlockSet,
    steps: &[f64],
) -> Result<GradCheckReport> {
    let (_, grads) = evaluate(field, batch, objective, trainable)?;
    let base_sig = signature(field, batch, objective);
    let mut work = field.clone();
    let mut report = GradCheckReport::default();
    for id in trainable.iter() {
        let analytic = grads.get(id).expect("trainable block has a gradient");
        for i in 0..analytic.len() {
            let theta = field.block(id)[i];
            let mut done = false;
            for &h in steps {
                let plus = (theta as f64 + h) as f32;
                let minus = (theta as f64 - h) as f32;
                let step = plus as f64 - minus as f64;
                if step == 0.0 {
                    continue;
                }
                work.block_mut(id)[i] = plus;
                let sig_p = signature(&work, batch, objective);
                let lp = evaluate(&work, batch, objective, BlockSet::none())?.0.total;
                work.block_mut(id)[i] = minus;
                let sig_m = signature(&work, batch, objective);
                let lm = evaluate(&work, batch, objective, BlockSet::none())?.0.total;
                work.block_mut(id)[i] = theta;
                if sig_p != base_sig || sig_m != base_sig {
                    continue;
                }
                let numeric = (lp - lm) / step;
                let rel = relative_error(analytic[i], numeric, 1e-6);
                if rel > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = rel;
                    report.worst = Some((id, i));
                }
                report.checked += 1;
                done = true;
                break;
            }
            if !done {
                report.skipped += 1;
            }
        }
    }
    Ok(report)
}

fn signature(field: &TriPlaneField, batch: &Batch, objective: &Objective) -> Vec<bool> {
    let mut sig = smoothness_signature(field, batch, objective);
    if objective.weights.lambda1 > 0.0 {
        for p in &field.planes {
            sig.extend(p.data().iter().map(|v| *v > 0.0));
        }
    }
    sig
}

/// Shape of a randomized gradient-check problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckProblem {
    pub resolution: usize,
    pub feature_dim: usize,
    pub sem_dim: usize,
    pub hidden: usize,
    pub rays: usize,
    pub samples: usize,
    pub probes: usize,
    /// Route masked samples through an edit head of this kind.
    pub edit: Option<EditKind>,
}

impl Default for CheckProblem {
    fn default() -> Self {
        Self {
            resolution: 8,
            feature_dim: 4,
            sem_dim: 8,
            hidden: 8,
            rays: 4,
            samples: 8,
            probes: 16,
            edit: Some(EditKind::Feature),
        }
    }
}

/// Builds a random field, batch and objective exercising every loss term. Plane
/// entries are drawn from U(-0.5, 0.5) and every network (including the edit head)
/// gets random weights and biases, so no gradient is trivially zero.
pub fn random_check_problem(shape: &CheckProblem, seed: u64) -> Result<(TriPlaneField, Batch, Objective)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = FieldConfig {
        resolution: shape.resolution,
        feature_dim: shape.feature_dim,
        hidden_width: shape.hidden,
        geom_dim: shape.feature_dim,
        sem_dim: shape.sem_dim,
        edit_hidden: shape.hidden,
        seed,
        ..FieldConfig::default()
    };
    let mut field = TriPlaneField::new(&config)?;
    for k in 0..3 {
        field.planes[k] = FeaturePlane::uniform(shape.resolution, shape.feature_dim, 0.5, &mut rng)?;
    }
    field.reset_edit_head(shape.edit.unwrap_or(EditKind::Feature), shape.hidden, seed)?;
    for mlp in [&mut field.geom, &mut field.sem, &mut field.color, &mut field.edit] {
        for l in 0..mlp.num_layers() {
            let (w, b) = mlp.layer_ranges(l);
            let scale = (3.0 / mlp.dims()[l] as f32).sqrt();
            for v in &mut mlp.params_mut()[w] {
                *v = rng.random_range(-scale..scale);
            }
            for v in &mut mlp.params_mut()[b] {
                *v = rng.random_range(-0.2..0.2);
            }
        }
    }
    // Bias the density output upward so most samples are inside the rectifier's linear part.
    let (_, b) = field.geom.layer_ranges(1);
    field.geom.params_mut()[b.start] += 0.5;

    let mut rays = Vec::with_capacity(shape.rays);
    for r in 0..shape.rays {
        let origin = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 2.5);
        let target = Vec3::new(
            rng.random_range(-0.6..0.6),
            rng.random_range(-0.6..0.6),
            rng.random_range(-0.6..0.6),
        );
        let direction = (target - origin).normalized();
        let (near, far) = (1.2, 3.6);
        let bin = (far - near) / shape.samples as f64;
        let t: Vec<f64> = (0..shape.samples)
            .map(|i| near + bin * (i as f64 + rng.random_range(0.05..0.95)))
            .collect();
        let delta = crate::render::spacing(&t, far);
        let edit_mask = if shape.edit.is_some() {
            (0..shape.samples).map(|_| rng.random_bool(0.6)).collect()
        } else {
            Vec::new()
        };
        rays.push(BatchRay {
            origin,
            direction,
            t,
            delta,
            edit_mask,
            rgb: Some([rng.random(), rng.random(), rng.random()]),
            feature: Some((0..shape.sem_dim).map(|_| rng.random_range(-1.0..1.0)).collect()),
            depth: Some(DepthTarget {
                masked: r % 2 == 0,
                value: rng.random_range(1.5..3.0),
            }),
        });
    }
    let probes = (0..shape.probes)
        .map(|_| DensityProbe {
            p: Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
            sigma: rng.random_range(0.0..2.0),
        })
        .collect();
    let batch = Batch {
        rays,
        probes,
        background: [rng.random(), rng.random(), rng.random()],
        selection: None,
    };
    let objective = Objective {
        weights: LossWeights {
            lambda1: 1e-3,
            lambda2: 1e-2,
            lambda3: 0.05,
            lambda4: 0.1,
        },
        feature_weight: 0.5,
        edit: shape.edit.is_some(),
    };
    Ok((field, batch, objective))
}
