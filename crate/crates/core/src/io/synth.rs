//! Analytic scenes of constant-density primitives, rendered by dense ray marching.
//! They provide ground truth for density, color, feature and object membership at any
//! point, and the datasets used by the end-to-end checks.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::codec::{save_depth16, save_features, save_rgb8};
use super::manifest::{BoundsRecord, DatasetManifest, FrameRecord, Intrinsics, Split};
use crate::error::{Error, Result};
use crate::math::{Aabb, RigidTransform, Vec3};
use crate::render::{sample_ray, Camera, Ray};

/// Samples per ray for oracle renders.
pub const ORACLE_SAMPLES: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extent: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub center: [f64; 3],
    pub color: [f64; 3],
    /// Index of the one-hot feature channel this object lights up.
    pub feature_id: usize,
    pub density: f64,
}

impl Primitive {
    pub fn contains(&self, p: Vec3) -> bool {
        let d = p - Vec3::from_array(self.center);
        match self.shape {
            Shape::Sphere { radius } => d.dot(d) <= radius * radius,
            Shape::Box { half_extent: h } => d.x.abs() <= h[0] && d.y.abs() <= h[1] && d.z.abs() <= h[2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRig {
    pub train: usize,
    pub holdout: usize,
    pub radius: f64,
    pub look_at: [f64; 3],
    /// Elevation range in degrees above the horizontal plane.
    pub elevation: [f64; 2],
    pub fov_y: f64,
    pub near: f64,
    pub far: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub name: String,
    pub width: u32,
    pub height: u32,
    pub feature_dim: usize,
    #[serde(default)]
    pub background: [f64; 3],
    pub seed: u64,
    pub bounds: BoundsRecord,
    pub rig: CameraRig,
    #[serde(default)]
    pub primitives: Vec<Primitive>,
}

impl SyntheticSpec {
    /// Two objects side by side: a red sphere and a blue box.
    pub fn two_objects(width: u32, height: u32) -> Self {
        Self {
            name: "two_objects".into(),
            width,
            height,
            feature_dim: 8,
            background: [0.0; 3],
            seed: 7,
            bounds: BoundsRecord {
                min: [-1.0; 3],
                max: [1.0; 3],
            },
            rig: CameraRig {
                train: 16,
                holdout: 4,
                radius: 3.2,
                look_at: [0.0; 3],
                elevation: [20.0, 50.0],
                fov_y: 40.0,
                near: 1.4,
                far: 5.0,
            },
            primitives: vec![
                Primitive {
                    shape: Shape::Sphere { radius: 0.38 },
                    center: [-0.42, 0.0, -0.05],
                    color: [0.85, 0.25, 0.2],
                    feature_id: 0,
                    density: 40.0,
                },
                Primitive {
                    shape: Shape::Box {
                        half_extent: [0.24, 0.3, 0.24],
                    },
                    center: [0.45, -0.05, 0.1],
                    color: [0.2, 0.45, 0.85],
                    feature_id: 1,
                    density: 40.0,
                },
            ],
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::manifest("synthetic spec", e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::manifest("width/height", "must be > 0"));
        }
        let bounds = Aabb::new(Vec3::from_array(self.bounds.min), Vec3::from_array(self.bounds.max));
        if !bounds.is_valid() {
            return Err(Error::manifest("bounds", "min must be below max"));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if !(p.density >= 0.0 && p.density.is_finite()) {
                return Err(Error::manifest(format!("primitives[{i}].density"), "must be finite and >= 0"));
            }
            if p.feature_id >= self.feature_dim {
                return Err(Error::manifest(
                    format!("primitives[{i}].feature_id"),
                    format!("must be below feature_dim {}", self.feature_dim),
                ));
            }
            if self.primitives[..i].iter().any(|q| q.feature_id == p.feature_id) {
                return Err(Error::manifest(
                    format!("primitives[{i}].feature_id"),
                    "one-hot ids must be distinct",
                ));
            }
        }
        let r = &self.rig;
        if r.train < 4 {
            return Err(Error::manifest("rig.train", "need at least 4 train views"));
        }
        if !(0.0 < r.near && r.near < r.far) || !(r.fov_y > 0.0 && r.fov_y < 180.0) || !(r.radius > 0.0) {
            return Err(Error::manifest("rig", "need 0 < near < far, 0 < fov_y < 180 and radius > 0"));
        }
        Ok(())
    }

    pub fn bounds(&self) -> Aabb {
        Aabb::new(Vec3::from_array(self.bounds.min), Vec3::from_array(self.bounds.max))
    }

    /// Train cameras followed by holdout cameras.
    pub fn cameras(&self) -> Vec<(Camera, Split)> {
        let r = &self.rig;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let target = Vec3::from_array(r.look_at);
        let (lo, hi) = (r.elevation[0], r.elevation[1]);
        let golden = 0.618_033_988_749_895;
        let mut cams = Vec::with_capacity(r.train + r.holdout);
        let mut place = |az: f64, el: f64, split: Split| {
            let (az, el) = (az.to_radians(), el.to_radians());
            let eye = target + Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()) * r.radius;
            let pose = RigidTransform::look_at(eye, target, Vec3::new(0.0, 1.0, 0.0));
            cams.push((Camera::with_fov(self.width, self.height, r.fov_y, pose, r.near, r.far), split));
        };
        for k in 0..r.train {
            let az = 360.0 * k as f64 / r.train as f64 + rng.random_range(-4.0..4.0);
            let el = lo + (hi - lo) * ((k as f64 * golden) % 1.0);
            place(az, el, Split::Train);
        }
        for k in 0..r.holdout {
            let az = 360.0 * (k as f64 + 0.5) / r.holdout.max(1) as f64 + 11.0;
            let el = lo + (hi - lo) * ((k as f64 + 0.5) / r.holdout.max(1) as f64);
            place(az, el, Split::Holdout);
        }
        cams
    }
}

/// Color, feature, depth and opacity of one oracle ray.
type Marched = ([f64; 3], Vec<f64>, f64, f64);

/// Point queries and ground-truth renders of an analytic scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneOracle {
    pub spec: SyntheticSpec,
}

/// Ground-truth planes of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleImage {
    pub rgb: Vec<f32>,
    pub feature: Vec<f32>,
    pub depth: Vec<f32>,
    pub alpha: Vec<f32>,
}

impl SceneOracle {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    /// The same scene with the primitive carrying `feature_id` removed.
    pub fn without(&self, feature_id: usize) -> Self {
        let mut spec = self.spec.clone();
        spec.primitives.retain(|p| p.feature_id != feature_id);
        Self { spec }
    }

    pub fn density(&self, p: Vec3) -> f64 {
        self.spec.primitives.iter().filter(|q| q.contains(p)).map(|q| q.density).sum()
    }

    /// Density-weighted mean color; zero in empty space.
    pub fn color(&self, p: Vec3) -> [f64; 3] {
        let mut c = [0.0; 3];
        let mut total = 0.0;
        for q in self.spec.primitives.iter().filter(|q| q.contains(p)) {
            for k in 0..3 {
                c[k] += q.density * q.color[k];
            }
            total += q.density;
        }
        if total > 0.0 {
            c.iter_mut().for_each(|v| *v /= total);
        }
        c
    }

    /// Density-weighted mean of the one-hot features; zero in empty space.
    pub fn feature(&self, p: Vec3) -> Vec<f64> {
        let mut f = vec![0.0; self.spec.feature_dim];
        let mut total = 0.0;
        for q in self.spec.primitives.iter().filter(|q| q.contains(p)) {
            f[q.feature_id] += q.density;
            total += q.density;
        }
        if total > 0.0 {
            f.iter_mut().for_each(|v| *v /= total);
        }
        f
    }

    /// Whether `p` lies inside the object with this feature id.
    pub fn member(&self, p: Vec3, feature_id: usize) -> bool {
        self.spec.primitives.iter().any(|q| q.feature_id == feature_id && q.contains(p))
    }

    fn march(&self, ray: &Ray, near: f64, far: f64) -> Marched {
        let s = sample_ray(ray, near, far, ORACLE_SAMPLES, None).expect("validated range");
        let d = self.spec.feature_dim;
        let (mut c, mut f, mut depth, mut acc) = ([0.0; 3], vec![0.0; d], 0.0, 0.0);
        let mut trans = 1.0;
        for i in 0..s.len() {
            let p = s.position(i);
            let sigma = self.density(p);
            if sigma == 0.0 {
                continue;
            }
            let a = 1.0 - (-sigma * s.delta[i]).exp();
            let w = trans * a;
            let col = self.color(p);
            for k in 0..3 {
                c[k] += w * col[k];
            }
            for (o, v) in f.iter_mut().zip(self.feature(p)) {
                *o += w * v;
            }
            depth += w * s.t[i];
            acc += w;
            trans *= 1.0 - a;
        }
        for k in 0..3 {
            c[k] += (1.0 - acc) * self.spec.background[k];
        }
        (c, f, depth, acc)
    }

    pub fn render(&self, camera: &Camera) -> Result<OracleImage> {
        camera.validate()?;
        let (w, h) = (camera.width as usize, camera.height as usize);
        let rows: Vec<Vec<Marched>> = (0..h)
            .into_par_iter()
            .map(|v| {
                (0..w)
                    .map(|u| self.march(&camera.ray_unchecked(u as f64 + 0.5, v as f64 + 0.5), camera.near, camera.far))
                    .collect()
            })
            .collect();
        let mut img = OracleImage {
            rgb: Vec::with_capacity(3 * w * h),
            feature: Vec::with_capacity(self.spec.feature_dim * w * h),
            depth: Vec::with_capacity(w * h),
            alpha: Vec::with_capacity(w * h),
        };
        for (c, f, d, a) in rows.into_iter().flatten() {
            img.rgb.extend(c.iter().map(|v| *v as f32));
            img.feature.extend(f.iter().map(|v| *v as f32));
            img.depth.push(d as f32);
            img.alpha.push(a as f32);
        }
        Ok(img)
    }

    /// Pixels where the object with this feature id carries at least half of the
    /// composited weight, so parts hidden behind other objects are excluded.
    pub fn visible_silhouette(&self, camera: &Camera, feature_id: usize) -> Result<Vec<bool>> {
        let img = self.render(camera)?;
        let d = self.spec.feature_dim;
        Ok(img.feature.chunks(d).map(|f| f[feature_id] >= 0.5).collect())
    }

    /// Pixels whose center ray passes through the object with this feature id.
    pub fn silhouette(&self, camera: &Camera, feature_id: usize) -> Vec<bool> {
        let solo = SceneOracle {
            spec: SyntheticSpec {
                primitives: self
                    .spec
                    .primitives
                    .iter()
                    .filter(|p| p.feature_id == feature_id)
                    .cloned()
                    .collect(),
                ..self.spec.clone()
            },
        };
        let s = ORACLE_SAMPLES;
        (0..camera.height)
            .flat_map(|v| (0..camera.width).map(move |u| (u, v)))
            .map(|(u, v)| {
                let ray = camera.ray_unchecked(u as f64 + 0.5, v as f64 + 0.5);
                let samples = sample_ray(&ray, camera.near, camera.far, s, None).expect("validated range");
                (0..samples.len()).any(|i| solo.density(samples.position(i)) > 0.0)
            })
            .collect()
    }
}

/// Writes images, feature files, depth files and `scene.toml` for every camera of the
/// spec into `out`. Returns the manifest path and the oracle.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<(PathBuf, SceneOracle)> {
    let oracle = SceneOracle::new(spec.clone())?;
    let mut frames = Vec::new();
    let mut counters = [0usize; 2];
    for (camera, split) in spec.cameras() {
        let img = oracle.render(&camera)?;
        let (tag, n) = match split {
            Split::Train => ("train", &mut counters[0]),
            Split::Holdout => ("holdout", &mut counters[1]),
        };
        let stem = format!("{tag}_{:03}", *n);
        *n += 1;
        let image = PathBuf::from(format!("images/{stem}.png"));
        let feature = PathBuf::from(format!("features/{stem}.pnf"));
        let depth = PathBuf::from(format!("depth/{stem}.png"));
        save_rgb8(&out.join(&image), camera.width, camera.height, &img.rgb)?;
        save_features(&out.join(&feature), camera.width, camera.height, spec.feature_dim, &img.feature)?;
        save_depth16(&out.join(&depth), camera.width, camera.height, &img.depth, camera.near, camera.far)?;
        frames.push(FrameRecord {
            image,
            feature: Some(feature),
            depth: Some(depth),
            split,
            camera_to_world: camera.camera_to_world.0.to_vec(),
            intrinsics: Intrinsics {
                fx: camera.fx,
                fy: camera.fy,
                cx: camera.cx,
                cy: camera.cy,
                width: camera.width,
                height: camera.height,
            },
        });
    }
    let manifest = DatasetManifest {
        scene: spec.name.clone(),
        near: spec.rig.near,
        far: spec.rig.far,
        bounds: spec.bounds.clone(),
        frames,
    };
    let path = out.join("scene.toml");
    manifest.save(&path)?;
    Ok((path, oracle))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_sphere(r: f64) -> SyntheticSpec {
        let mut spec = SyntheticSpec::two_objects(64, 64);
        spec.primitives = vec![Primitive {
            shape: Shape::Sphere { radius: r },
            center: [0.0; 3],
            color: [1.0, 1.0, 1.0],
            feature_id: 0,
            density: 200.0,
        }];
        spec
    }

    #[test]
    fn empty_scene_renders_background() {
        let mut spec = SyntheticSpec::two_objects(8, 8);
        spec.primitives.clear();
        spec.background = [0.1, 0.2, 0.3];
        let oracle = SceneOracle::new(spec.clone()).unwrap();
        let img = oracle.render(&spec.cameras()[0].0).unwrap();
        assert!(img.alpha.iter().all(|a| *a == 0.0));
        assert!(img.depth.iter().all(|d| *d == 0.0));
        assert!(img.rgb.chunks(3).all(|c| c == [0.1, 0.2, 0.3]));
    }

    #[test]
    fn sphere_silhouette_area_matches_projection() {
        // A sphere of radius r at distance D subtends a cone of half-angle asin(r / D);
        // its image is a disk of radius f * tan(asin(r / D)) around the principal point.
        let r = 0.5;
        let spec = single_sphere(r);
        let oracle = SceneOracle::new(spec.clone()).unwrap();
        let cam = spec.cameras()[0].0;
        let dist = spec.rig.radius;
        let disk = cam.fx * (r / dist).asin().tan();
        let expected = std::f64::consts::PI * disk * disk;
        let img = oracle.render(&cam).unwrap();
        let area = img.alpha.iter().filter(|a| **a > 0.5).count() as f64;
        assert!((area - expected).abs() / expected < 0.02, "area {area} vs {expected}");
    }

    #[test]
    fn features_are_one_hot_where_opaque() {
        let spec = SyntheticSpec::two_objects(32, 32);
        let oracle = SceneOracle::new(spec.clone()).unwrap();
        let img = oracle.render(&spec.cameras()[1].0).unwrap();
        let d = spec.feature_dim;
        let mut opaque = 0;
        for (i, a) in img.alpha.iter().enumerate() {
            if *a > 1.0 - 1e-6 {
                opaque += 1;
                let f = &img.feature[i * d..(i + 1) * d];
                let hot = f.iter().filter(|v| (**v - 1.0).abs() < 1e-5).count();
                let cold = f.iter().filter(|v| v.abs() < 1e-5).count();
                assert_eq!((hot, cold), (1, d - 1), "{f:?}");
            }
        }
        assert!(opaque > 50);
    }

    #[test]
    fn cameras_are_deterministic_and_valid() {
        let spec = SyntheticSpec::two_objects(16, 16);
        let a = spec.cameras();
        assert_eq!(a, spec.cameras());
        assert_eq!(a.len(), 20);
        assert!(a.iter().all(|(c, _)| c.validate().is_ok()));
    }

    #[test]
    fn spec_toml_round_trip() {
        let spec = SyntheticSpec::two_objects(16, 16);
        assert_eq!(SyntheticSpec::parse(&spec.to_toml()).unwrap(), spec);
    }
}
