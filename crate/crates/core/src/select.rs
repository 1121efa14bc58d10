//! Semantic selection: a query patch's mean distilled feature plus a squared-distance
//! threshold define a 3D predicate over the field.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{PointTrace, TriPlaneField};
use crate::math::{Aabb, Vec3};
use crate::render::{render_pixels, Camera, Channels, RenderOptions};

/// Region of a view used as a selection query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Patch {
    Rect { x: u32, y: u32, w: u32, h: u32 },
    Bitmap { width: u32, height: u32, bits: Vec<bool> },
}

impl Patch {
    /// Pixels of the patch that fall inside a `width x height` view.
    pub fn pixels(&self, width: u32, height: u32) -> Result<Vec<(u32, u32)>> {
        let px: Vec<(u32, u32)> = match self {
            Patch::Rect { x, y, w, h } => {
                let x1 = x.saturating_add(*w).min(width);
                let y1 = y.saturating_add(*h).min(height);
                (*y..y1).flat_map(|v| (*x..x1).map(move |u| (u, v))).collect()
            }
            Patch::Bitmap {
                width: bw,
                height: bh,
                bits,
            } => {
                if bits.len() != (*bw as usize) * (*bh as usize) {
                    return Err(Error::DimMismatch {
                        what: "patch bitmap",
                        expected: (*bw as usize) * (*bh as usize),
                        got: bits.len(),
                    });
                }
                if *bw != width || *bh != height {
                    return Err(Error::DimMismatch {
                        what: "patch bitmap width",
                        expected: width as usize,
                        got: *bw as usize,
                    });
                }
                bits.iter()
                    .enumerate()
                    .filter(|(_, b)| **b)
                    .map(|(i, _)| ((i % *bw as usize) as u32, (i / *bw as usize) as u32))
                    .collect()
            }
        };
        if px.is_empty() {
            return Err(Error::Empty("selection patch"));
        }
        Ok(px)
    }
}

/// Occupancy grid caching the predicate at voxel centers for one snapshot version.
#[derive(Clone, Debug, PartialEq)]
pub struct BakedMask {
    pub resolution: usize,
    pub bounds: Aabb,
    pub version: u64,
    pub occupancy: Vec<bool>,
}

impl BakedMask {
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let r = self.resolution as f64;
        self.bounds
            .lerp(Vec3::new((i as f64 + 0.5) / r, (j as f64 + 0.5) / r, (k as f64 + 0.5) / r))
    }

    /// Nearest-voxel lookup; false outside the box.
    pub fn lookup(&self, p: Vec3) -> bool {
        if !self.bounds.contains(p) {
            return false;
        }
        let s = self.bounds.normalize(p);
        let r = self.resolution;
        let idx = |v: f64| ((v * r as f64) as usize).min(r - 1);
        let (i, j, k) = (idx(s.x), idx(s.y), idx(s.z));
        self.occupancy[(k * r + j) * r + i]
    }

    pub fn count(&self) -> usize {
        self.occupancy.iter().filter(|b| **b).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionMask {
    pub f_bar: Vec<f32>,
    /// Squared feature-distance threshold; the predicate is strict (`d < thr`).
    pub thr: f32,
    pub snapshot_version: u64,
    pub baked: Option<Arc<BakedMask>>,
}

impl SelectionMask {
    pub fn new(f_bar: Vec<f32>, thr: f32, snapshot_version: u64) -> Result<Self> {
        if !(thr >= 0.0) {
            return Err(Error::Config(format!("selection threshold must be >= 0, got {thr}")));
        }
        if f_bar.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mean query feature"));
        }
        Ok(Self {
            f_bar,
            thr,
            snapshot_version,
            baked: None,
        })
    }

    /// Threshold at half the squared norm of the query feature: points whose feature is
    /// closer to the query than to the zero feature are kept.
    pub fn calibrated_threshold(f_bar: &[f32]) -> f32 {
        0.5 * f_bar.iter().map(|v| v * v).sum::<f32>()
    }

    pub fn distance(&self, f_sem: &[f64]) -> f64 {
        self.f_bar
            .iter()
            .zip(f_sem)
            .map(|(a, b)| {
                let d = *a as f64 - b;
                d * d
            })
            .sum()
    }

    pub fn matches_feature(&self, f_sem: &[f64]) -> bool {
        self.distance(f_sem) < self.thr as f64
    }

    /// Per-sample predicate used while rendering: the baked cache when it was built
    /// for `version`, else the live feature test.
    pub fn hit(&self, p: Vec3, f_sem: &[f64], version: u64) -> bool {
        match &self.baked {
            Some(b) if b.version == version => b.lookup(p),
            _ => self.matches_feature(f_sem),
        }
    }

    pub fn with_threshold(&self, thr: f32) -> Result<Self> {
        let mut s = Self::new(self.f_bar.clone(), thr, self.snapshot_version)?;
        s.baked = None;
        Ok(s)
    }

    /// Sidecar text, one `key=value` per line. Floats print in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let f: Vec<String> = self.f_bar.iter().map(|v| v.to_string()).collect();
        format!(
            "f_bar={}\nthr={}\nsnapshot_version={}\n",
            f.join(","),
            self.thr,
            self.snapshot_version
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |r: String| Error::corrupt("selection sidecar", r);
        let (mut f_bar, mut thr, mut version) = (None, None, None);
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key=value", n + 1)))?;
            let v = v.trim();
            match k.trim() {
                "f_bar" => {
                    let parsed: std::result::Result<Vec<f32>, _> = v.split(',').map(|x| x.trim().parse::<f32>()).collect();
                    f_bar = Some(parsed.map_err(|_| bad(format!("f_bar is not a float list: {v}")))?);
                }
                "thr" => thr = Some(v.parse::<f32>().map_err(|_| bad(format!("thr is not a float: {v}")))?),
                "snapshot_version" => {
                    version = Some(
                        v.parse::<u64>()
                            .map_err(|_| bad(format!("snapshot_version is not an integer: {v}")))?,
                    )
                }
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        Self::new(
            f_bar.ok_or_else(|| bad("missing f_bar".into()))?,
            thr.ok_or_else(|| bad("missing thr".into()))?,
            version.ok_or_else(|| bad("missing snapshot_version".into()))?,
        )
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::io::atomic_write(path, self.to_text().as_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::parse(&text)
    }
}

/// Mean rendered feature over the patch pixels of one view.
pub fn query_mean_feature(camera: &Camera, patch: &Patch, field: &TriPlaneField, samples: usize) -> Result<Vec<f32>> {
    camera.validate()?;
    let pixels = patch.pixels(camera.width, camera.height)?;
    let opts = RenderOptions {
        samples,
        channels: Channels::FEATURES,
        ..RenderOptions::default()
    };
    let out = render_pixels(camera, field, &pixels, &opts)?;
    let d = field.sem_dim();
    let mut mean = vec![0.0f64; d];
    for px in out.feature.chunks(d) {
        for (m, v) in mean.iter_mut().zip(px) {
            *m += *v as f64;
        }
    }
    let n = pixels.len() as f64;
    Ok(mean.into_iter().map(|m| (m / n) as f32).collect())
}

/// Live predicate at one world point: `||f_bar - f_sem(p)||^2 < thr`. Points outside the
/// box are never selected.
pub fn mask_predicate(p: Vec3, selection: &SelectionMask, field: &TriPlaneField) -> Result<bool> {
    if !p.is_finite() {
        return Err(Error::NonFinite("query point"));
    }
    let mut trace = PointTrace::new(field);
    if !field.trace_point(p, &mut trace) {
        return Ok(false);
    }
    Ok(selection.matches_feature(trace.f_sem()))
}

pub fn bake_mask(selection: &SelectionMask, resolution: usize, field: &TriPlaneField) -> Result<BakedMask> {
    if resolution == 0 {
        return Err(Error::Config("bake resolution must be positive".into()));
    }
    let r = resolution;
    let mut grid = BakedMask {
        resolution: r,
        bounds: field.bounds,
        version: field.version,
        occupancy: Vec::new(),
    };
    let occupancy: Vec<bool> = (0..r * r)
        .into_par_iter()
        .flat_map_iter(|kj| {
            let (k, j) = (kj / r, kj % r);
            let mut trace = PointTrace::new(field);
            let grid = &grid;
            (0..r)
                .map(move |i| {
                    let p = grid.voxel_center(i, j, k);
                    field.trace_point(p, &mut trace) && selection.matches_feature(trace.f_sem())
                })
                .collect::<Vec<_>>()
        })
        .collect();
    grid.occupancy = occupancy;
    Ok(grid)
}

/// Binary 2D mask plus the per-pixel selected weight it was thresholded from.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask2D {
    pub width: u32,
    pub height: u32,
    pub coverage: Vec<f32>,
    pub bits: Vec<bool>,
}

impl Mask2D {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn iou(&self, other: &[bool]) -> f64 {
        iou(&self.bits, other)
    }
}

pub const PROJECTION_THRESHOLD: f32 = 0.5;

/// Projects the selection into a view: per pixel the composited weight of selected
/// samples, thresholded at 0.5.
pub fn project_mask(camera: &Camera, selection: &SelectionMask, field: &TriPlaneField, samples: usize) -> Result<Mask2D> {
    let opts = RenderOptions {
        samples,
        channels: Channels::COVERAGE,
        coverage: Some(selection),
        ..RenderOptions::default()
    };
    let img = crate::render::render_view(camera, field, &opts)?;
    let bits = img.coverage.iter().map(|c| *c >= PROJECTION_THRESHOLD).collect();
    Ok(Mask2D {
        width: camera.width,
        height: camera.height,
        coverage: img.coverage,
        bits,
    })
}

/// Which side of the predicate loses its density.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeletionMode {
    #[default]
    Selected,
    Unselected,
}

#[derive(Clone, Copy, Debug)]
pub struct Deletion<'a> {
    pub selection: &'a SelectionMask,
    pub mode: DeletionMode,
}

impl Deletion<'_> {
    pub fn removes(&self, hit: bool) -> bool {
        match self.mode {
            DeletionMode::Selected => hit,
            DeletionMode::Unselected => !hit,
        }
    }
}

/// Render flag produced by toggling deletion on or off.
pub fn apply_deletion(selection: &SelectionMask, on: bool, mode: DeletionMode) -> Option<Deletion<'_>> {
    on.then_some(Deletion { selection, mode })
}

/// Distances `||f_bar - f_sem(p)||^2` over stratified random probes where the field has
/// positive density. Used to calibrate the threshold slider.
pub fn feature_distances(field: &TriPlaneField, f_bar: &[f32], probes: usize, seed: u64) -> Vec<f64> {
    let sel = SelectionMask {
        f_bar: f_bar.to_vec(),
        thr: 0.0,
        snapshot_version: field.version,
        baked: None,
    };
    let points = stratified_points(&field.bounds, probes, seed);
    let mut trace = PointTrace::new(field);
    let mut d = Vec::new();
    for p in points {
        if field.trace_point(p, &mut trace) && trace.sigma() > 0.0 {
            d.push(sel.distance(trace.f_sem()));
        }
    }
    d
}

/// The `(lo, hi)` percentiles of a sample, by nearest rank.
pub fn percentile_range(values: &[f64], lo: f64, hi: f64) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pick = |q: f64| v[(((q / 100.0) * (v.len() - 1) as f64).round() as usize).min(v.len() - 1)];
    Some((pick(lo), pick(hi)))
}

/// Stratified random points: one per cell of the smallest cube grid holding `n` cells.
pub fn stratified_points(bounds: &Aabb, n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = (n as f64).cbrt().ceil().max(1.0) as usize;
    let cells = side * side * side;
    let mut out = Vec::with_capacity(n);
    // take n cells spread evenly over the grid
    for c in 0..n {
        let idx = c * cells / n.max(1);
        let (i, j, k) = (idx % side, (idx / side) % side, idx / (side * side));
        let s = Vec3::new(
            (i as f64 + rng.random::<f64>()) / side as f64,
            (j as f64 + rng.random::<f64>()) / side as f64,
            (k as f64 + rng.random::<f64>()) / side as f64,
        );
        out.push(bounds.lerp(s));
    }
    out
}

pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
