use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::camera::Ray;
use crate::error::{Error, Result};
use crate::math::Vec3;

/// Sample depths along one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t: Vec<f64>,
    /// `delta[i] = t[i + 1] - t[i]`; the last entry spans to `far`.
    pub delta: Vec<f64>,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn position(&self, i: usize) -> Vec3 {
        self.origin + self.direction * self.t[i]
    }
}

/// Stratified samples over `[near, far]`: bin midpoints, or one uniform draw per bin
/// when a jitter source is given.
pub fn sample_ray(ray: &Ray, near: f64, far: f64, n_samples: usize, jitter: Option<&mut ChaCha8Rng>) -> Result<RaySamples> {
    if !(near < far) || !near.is_finite() || !far.is_finite() {
        return Err(Error::InvalidRange { near, far });
    }
    if n_samples == 0 {
        return Err(Error::Empty("sample count"));
    }
    let width = (far - near) / n_samples as f64;
    let t: Vec<f64> = match jitter {
        None => (0..n_samples).map(|i| near + (i as f64 + 0.5) * width).collect(),
        Some(rng) => (0..n_samples)
            .map(|i| {
                let u: f64 = rng.random();
                near + (i as f64 + u) * width
            })
            .collect(),
    };
    let delta = spacing(&t, far);
    Ok(RaySamples {
        origin: ray.origin,
        direction: ray.direction,
        t,
        delta,
    })
}

/// Sample spacings: `t[i+1] - t[i]`, and `far - t[last]` for the last sample.
pub fn spacing(t: &[f64], far: f64) -> Vec<f64> {
    let n = t.len();
    (0..n).map(|i| if i + 1 < n { t[i + 1] - t[i] } else { far - t[i] }).collect()
}
