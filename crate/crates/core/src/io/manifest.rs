//! Dataset manifests (TOML).
//!
//! ```toml
//! scene = "two_objects"
//! near = 1.2
//! far = 4.8
//! bounds = { min = [-1.0, -1.0, -1.0], max = [1.0, 1.0, 1.0] }
//!
//! [[frames]]
//! image = "images/train_000.png"
//! feature = "features/train_000.pnf"   # optional
//! depth = "depth/train_000.png"        # optional, 16-bit, normalized by near/far
//! split = "train"                      # or "holdout"
//! camera_to_world = [1.0, 0.0, 0.0, 0.0,  0.0, 1.0, 0.0, 0.0,  0.0, 0.0, 1.0, 3.0,  0.0, 0.0, 0.0, 1.0]
//! intrinsics = { fx = 175.8, fy = 175.8, cx = 64.0, cy = 64.0, width = 128, height = 128 }
//! ```
//!
//! Paths are relative to the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::atomic_write;
use super::codec::{load_depth16, load_features, load_rgb8};
use crate::error::{Error, Result};
use crate::math::{Aabb, RigidTransform, Vec3};
use crate::render::Camera;
use crate::train::TrainView;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Holdout,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsRecord {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<PathBuf>,
    pub split: Split,
    pub camera_to_world: Vec<f64>,
    pub intrinsics: Intrinsics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub scene: String,
    pub near: f64,
    pub far: f64,
    pub bounds: BoundsRecord,
    pub frames: Vec<FrameRecord>,
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let span = e.span().map(|s| format!(" (bytes {}..{})", s.start, s.end)).unwrap_or_default();
            Error::manifest("syntax", format!("{}{span}", e.message()))
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_toml().as_bytes())
    }

    pub fn bounds(&self) -> Aabb {
        Aabb::new(Vec3::from_array(self.bounds.min), Vec3::from_array(self.bounds.max))
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        if self.scene.trim().is_empty() {
            return Err(Error::manifest("scene", "must be non-empty"));
        }
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(Error::manifest(
                "near/far",
                format!("need 0 < near < far, got {} and {}", self.near, self.far),
            ));
        }
        if !self.bounds().is_valid() {
            return Err(Error::manifest("bounds", "min must be below max on every axis"));
        }
        for (i, f) in self.frames.iter().enumerate() {
            let at = |k: &str| format!("frames[{i}].{k}");
            let k = &f.intrinsics;
            for (name, v) in [("fx", k.fx), ("fy", k.fy)] {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::manifest(at(&format!("intrinsics.{name}")), format!("must be > 0, got {v}")));
                }
            }
            if !(k.cx.is_finite() && k.cy.is_finite()) {
                return Err(Error::manifest(at("intrinsics"), "principal point must be finite"));
            }
            if k.width == 0 || k.height == 0 {
                return Err(Error::manifest(at("intrinsics"), "width and height must be > 0"));
            }
            if f.camera_to_world.len() != 16 {
                return Err(Error::manifest(
                    at("camera_to_world"),
                    format!("needs 16 values, got {}", f.camera_to_world.len()),
                ));
            }
            self.camera(i)
                .validate()
                .map_err(|e| Error::manifest(at("camera_to_world"), e.to_string()))?;
        }
        let train = self.frames.iter().filter(|f| f.split == Split::Train).count();
        if train < 4 {
            return Err(Error::manifest("frames", format!("need at least 4 train frames, got {train}")));
        }
        Ok(())
    }

    pub fn camera(&self, i: usize) -> Camera {
        let f = &self.frames[i];
        let mut m = [0.0; 16];
        m.copy_from_slice(&f.camera_to_world[..16]);
        Camera {
            fx: f.intrinsics.fx,
            fy: f.intrinsics.fy,
            cx: f.intrinsics.cx,
            cy: f.intrinsics.cy,
            width: f.intrinsics.width,
            height: f.intrinsics.height,
            camera_to_world: RigidTransform(m),
            near: self.near,
            far: self.far,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub split: Split,
    pub camera: Camera,
    pub rgb: Vec<f32>,
    pub feature: Option<Vec<f32>>,
    pub depth: Option<Vec<f32>>,
}

/// A decoded, validated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    pub frames: Vec<Frame>,
    /// Channels of the feature images, when any frame has one.
    pub feature_dim: Option<usize>,
}

impl Dataset {
    pub fn name(&self) -> &str {
        &self.manifest.scene
    }

    pub fn bounds(&self) -> Aabb {
        self.manifest.bounds()
    }

    pub fn train(&self) -> impl Iterator<Item = &Frame> {
        self.frames.iter().filter(|f| f.split == Split::Train)
    }

    pub fn holdout(&self) -> impl Iterator<Item = &Frame> {
        self.frames.iter().filter(|f| f.split == Split::Holdout)
    }

    /// Train frames as supervision (RGB plus features when present).
    pub fn train_views(&self) -> Vec<TrainView> {
        self.train()
            .map(|f| TrainView {
                feature: f.feature.clone(),
                ..TrainView::new(f.camera, f.rgb.clone())
            })
            .collect()
    }
}

/// Loads and strictly validates a manifest and every file it references.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let manifest = DatasetManifest::parse(&text)?;
    manifest.validate()?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut frames = Vec::with_capacity(manifest.frames.len());
    let mut feature_dim = None;
    for (i, rec) in manifest.frames.iter().enumerate() {
        let at = |k: &str| format!("frames[{i}].{k}");
        let camera = manifest.camera(i);
        let (w, h) = (camera.width, camera.height);
        let size_err = |k: &str, gw: u32, gh: u32| Error::manifest(at(k), format!("is {gw}x{gh}, intrinsics say {w}x{h}"));
        let file = |p: &Path| root.join(p);
        let (iw, ih, rgb) = load_rgb8(&file(&rec.image)).map_err(|e| wrap(e, at("image")))?;
        if (iw, ih) != (w, h) {
            return Err(size_err("image", iw, ih));
        }
        let feature = match &rec.feature {
            Some(p) => {
                let (fw, fh, ch, data) = load_features(&file(p)).map_err(|e| wrap(e, at("feature")))?;
                if (fw, fh) != (w, h) {
                    return Err(size_err("feature", fw, fh));
                }
                match feature_dim {
                    None => feature_dim = Some(ch),
                    Some(d) if d != ch => {
                        return Err(Error::manifest(
                            at("feature"),
                            format!("has {ch} channels, earlier frames have {d}"),
                        ))
                    }
                    _ => {}
                }
                Some(data)
            }
            None => None,
        };
        let depth = match &rec.depth {
            Some(p) => {
                let (dw, dh, d) = load_depth16(&file(p), manifest.near, manifest.far).map_err(|e| wrap(e, at("depth")))?;
                if (dw, dh) != (w, h) {
                    return Err(size_err("depth", dw, dh));
                }
                Some(d)
            }
            None => None,
        };
        frames.push(Frame {
            index: i,
            split: rec.split,
            camera,
            rgb,
            feature,
            depth,
        });
    }
    Ok(Dataset {
        manifest,
        root,
        frames,
        feature_dim,
    })
}

fn wrap(e: Error, field: String) -> Error {
    match e {
        Error::MissingFile(p) => Error::manifest(field, format!("file {} does not exist", p.display())),
        other => Error::manifest(field, other.to_string()),
    }
}
