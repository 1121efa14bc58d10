//! The tri-plane scene model: three axis-aligned feature planes feeding a factored
//! chain of small networks (geometry -> semantics -> color) plus a residual edit head.
//!
//! A 3D point is projected orthographically onto the `xy`, `xz` and `yz` planes, each
//! plane is sampled bilinearly, and the three features are summed (or concatenated)
//! into `h(p)`. The geometry network maps `h(p)` to a raw density and geometric
//! features; the semantic network maps geometric features to distilled semantic
//! features; the color network maps semantic features to RGB. Color does not depend on
//! the viewing direction.

mod mlp;
mod plane;

pub use mlp::{param_count, sigmoid, Activation, Mlp, LEAKY_SLOPE};
pub use plane::{FeaturePlane, PlaneTap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Aabb, Vec3};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    #[default]
    Add,
    Concat,
}

/// What a residual edit network reads: distilled semantic features or the current color.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    #[default]
    Feature,
    Color,
}

impl EditKind {
    pub fn code(self) -> u8 {
        match self {
            EditKind::Feature => 0,
            EditKind::Color => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(EditKind::Feature),
            1 => Some(EditKind::Color),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EditKind::Feature => "feature",
            EditKind::Color => "color",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlaneAxis {
    Xy,
    Xz,
    Yz,
}

impl PlaneAxis {
    pub const ALL: [PlaneAxis; 3] = [PlaneAxis::Xy, PlaneAxis::Xz, PlaneAxis::Yz];

    /// Orthographic projection of box-normalized coordinates onto this plane.
    pub fn project(self, s: Vec3) -> (f64, f64) {
        match self {
            PlaneAxis::Xy => (s.x, s.y),
            PlaneAxis::Xz => (s.x, s.z),
            PlaneAxis::Yz => (s.y, s.z),
        }
    }
}

/// Parameter blocks of the model; the unit of freezing and of gradient bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockId {
    PlaneXy,
    PlaneXz,
    PlaneYz,
    Geom,
    Sem,
    Color,
    Edit,
}

impl BlockId {
    pub const ALL: [BlockId; 7] = [
        BlockId::PlaneXy,
        BlockId::PlaneXz,
        BlockId::PlaneYz,
        BlockId::Geom,
        BlockId::Sem,
        BlockId::Color,
        BlockId::Edit,
    ];

    pub const PLANES: [BlockId; 3] = [BlockId::PlaneXy, BlockId::PlaneXz, BlockId::PlaneYz];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            BlockId::PlaneXy => "plane_xy",
            BlockId::PlaneXz => "plane_xz",
            BlockId::PlaneYz => "plane_yz",
            BlockId::Geom => "mlp_geom",
            BlockId::Sem => "mlp_sem",
            BlockId::Color => "mlp_color",
            BlockId::Edit => "mlp_edit",
        }
    }

    pub fn is_plane(self) -> bool {
        self.index() < 3
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub resolution: usize,
    pub feature_dim: usize,
    pub hidden_width: usize,
    pub geom_dim: usize,
    pub sem_dim: usize,
    pub edit_hidden: usize,
    pub combine: CombineMode,
    pub bounds: Aabb,
    pub plane_init: f32,
    pub seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            resolution: 256,
            feature_dim: 32,
            hidden_width: 64,
            geom_dim: 64,
            sem_dim: 64,
            edit_hidden: 48,
            combine: CombineMode::Add,
            bounds: Aabb::unit(),
            plane_init: 1e-2,
            seed: 0,
        }
    }
}

impl FieldConfig {
    pub fn mlp_input_dim(&self) -> usize {
        match self.combine {
            CombineMode::Add => self.feature_dim,
            CombineMode::Concat => 3 * self.feature_dim,
        }
    }
}

/// How `eval_point` treats points outside the scene box.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ClampPolicy {
    #[default]
    Reject,
    Clamp,
}

/// Everything the field says about one 3D point.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceSample {
    pub sigma: f64,
    pub f_geom: Vec<f64>,
    pub f_sem: Vec<f64>,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriPlaneField {
    pub planes: [FeaturePlane; 3],
    pub combine: CombineMode,
    pub geom: Mlp,
    pub sem: Mlp,
    pub color: Mlp,
    pub edit: Mlp,
    pub edit_kind: EditKind,
    pub bounds: Aabb,
    /// Snapshot version; bumped whenever a trainer publishes new parameters.
    pub version: u64,
}

pub fn geom_layout(input: usize, hidden: usize, geom_dim: usize) -> (Vec<usize>, Vec<Activation>) {
    (vec![input, hidden, 1 + geom_dim], vec![Activation::Relu, Activation::Identity])
}

pub fn sem_layout(geom_dim: usize, sem_dim: usize) -> (Vec<usize>, Vec<Activation>) {
    (vec![geom_dim, sem_dim], vec![Activation::Identity])
}

pub fn color_layout(sem_dim: usize, hidden: usize) -> (Vec<usize>, Vec<Activation>) {
    (vec![sem_dim, hidden, 3], vec![Activation::Relu, Activation::Sigmoid])
}

/// Three-layer residual edit head: leaky-rectifier hidden layers and a linear output.
pub fn edit_layout(input: usize, hidden: usize) -> (Vec<usize>, Vec<Activation>) {
    (
        vec![input, hidden, hidden, 3],
        vec![Activation::LeakyRelu, Activation::LeakyRelu, Activation::Identity],
    )
}

impl TriPlaneField {
    pub fn new(config: &FieldConfig) -> Result<Self> {
        if !config.bounds.is_valid() {
            return Err(Error::Config("scene bounds must be a non-empty finite box".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let r = config.resolution;
        let f = config.feature_dim;
        let planes = [
            FeaturePlane::uniform(r, f, config.plane_init, &mut rng)?,
            FeaturePlane::uniform(r, f, config.plane_init, &mut rng)?,
            FeaturePlane::uniform(r, f, config.plane_init, &mut rng)?,
        ];
        let (d, a) = geom_layout(config.mlp_input_dim(), config.hidden_width, config.geom_dim);
        let geom = Mlp::init(&d, &a, &mut rng)?;
        let (d, a) = sem_layout(config.geom_dim, config.sem_dim);
        let sem = Mlp::init(&d, &a, &mut rng)?;
        let (d, a) = color_layout(config.sem_dim, config.hidden_width);
        let color = Mlp::init(&d, &a, &mut rng)?;
        let edit = new_edit_head(EditKind::Feature, config.sem_dim, config.edit_hidden, config.seed ^ 0xED17)?;
        Ok(Self {
            planes,
            combine: config.combine,
            geom,
            sem,
            color,
            edit,
            edit_kind: EditKind::Feature,
            bounds: config.bounds,
            version: 0,
        })
    }

    pub fn resolution(&self) -> usize {
        self.planes[0].res()
    }

    pub fn feature_dim(&self) -> usize {
        self.planes[0].dim()
    }

    pub fn sem_dim(&self) -> usize {
        self.sem.output_dim()
    }

    pub fn geom_dim(&self) -> usize {
        self.geom.output_dim() - 1
    }

    pub fn mlp_input_dim(&self) -> usize {
        match self.combine {
            CombineMode::Add => self.feature_dim(),
            CombineMode::Concat => 3 * self.feature_dim(),
        }
    }

    /// Checks the structural invariants tying planes and networks together.
    pub fn validate(&self) -> Result<()> {
        let (r, f) = (self.resolution(), self.feature_dim());
        if self.planes.iter().any(|p| p.res() != r || p.dim() != f) {
            return Err(Error::Config("all planes must share resolution and feature dim".into()));
        }
        let chain = [
            ("mlp_geom input", self.mlp_input_dim(), self.geom.input_dim()),
            ("mlp_sem input", self.geom_dim(), self.sem.input_dim()),
            ("mlp_color input", self.sem_dim(), self.color.input_dim()),
            ("mlp_color output", 3, self.color.output_dim()),
            ("mlp_edit output", 3, self.edit.output_dim()),
        ];
        for (what, expected, got) in chain {
            if expected != got {
                return Err(Error::DimMismatch { what, expected, got });
            }
        }
        let edit_in = match self.edit_kind {
            EditKind::Feature => self.sem_dim(),
            EditKind::Color => 3,
        };
        if self.edit.input_dim() != edit_in {
            return Err(Error::DimMismatch {
                what: "mlp_edit input",
                expected: edit_in,
                got: self.edit.input_dim(),
            });
        }
        if !self.all_finite() {
            return Err(Error::NonFinite("field parameters"));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.planes.iter().all(|p| p.data().iter().all(|v| v.is_finite()))
            && [&self.geom, &self.sem, &self.color, &self.edit].iter().all(|m| m.all_finite())
    }

    pub fn block(&self, id: BlockId) -> &[f32] {
        match id {
            BlockId::PlaneXy => self.planes[0].data(),
            BlockId::PlaneXz => self.planes[1].data(),
            BlockId::PlaneYz => self.planes[2].data(),
            BlockId::Geom => self.geom.params(),
            BlockId::Sem => self.sem.params(),
            BlockId::Color => self.color.params(),
            BlockId::Edit => self.edit.params(),
        }
    }

    pub fn block_mut(&mut self, id: BlockId) -> &mut [f32] {
        match id {
            BlockId::PlaneXy => self.planes[0].data_mut(),
            BlockId::PlaneXz => self.planes[1].data_mut(),
            BlockId::PlaneYz => self.planes[2].data_mut(),
            BlockId::Geom => self.geom.params_mut(),
            BlockId::Sem => self.sem.params_mut(),
            BlockId::Color => self.color.params_mut(),
            BlockId::Edit => self.edit.params_mut(),
        }
    }

    /// Replaces the edit head with a fresh one of the given kind.
    pub fn reset_edit_head(&mut self, kind: EditKind, hidden: usize, seed: u64) -> Result<()> {
        self.edit = new_edit_head(kind, self.sem_dim(), hidden, seed)?;
        self.edit_kind = kind;
        Ok(())
    }

    fn check_point(&self, p: Vec3, policy: ClampPolicy) -> Result<Vec3> {
        if !p.is_finite() {
            return Err(Error::NonFinite("query point"));
        }
        let s = self.bounds.normalize(p);
        let inside = (0.0..=1.0).contains(&s.x) && (0.0..=1.0).contains(&s.y) && (0.0..=1.0).contains(&s.z);
        match (inside, policy) {
            (true, _) => Ok(s),
            (false, ClampPolicy::Clamp) => Ok(Vec3::new(s.x.clamp(0.0, 1.0), s.y.clamp(0.0, 1.0), s.z.clamp(0.0, 1.0))),
            (false, ClampPolicy::Reject) => Err(Error::OutOfBounds { x: p.x, y: p.y, z: p.z }),
        }
    }

    /// Tri-plane feature `h(p)`.
    pub fn interpolate_planes(&self, p: Vec3) -> Result<Vec<f64>> {
        let s = self.check_point(p, ClampPolicy::Reject)?;
        let mut h = vec![0.0; self.mlp_input_dim()];
        let taps = self.taps(s);
        self.gather(&taps, &mut h);
        Ok(h)
    }

    pub fn eval_point(&self, p: Vec3, policy: ClampPolicy) -> Result<RadianceSample> {
        let s = self.check_point(p, policy)?;
        let mut trace = PointTrace::new(self);
        self.trace_normalized(s, &mut trace);
        Ok(RadianceSample {
            sigma: trace.sigma(),
            f_geom: trace.f_geom().to_vec(),
            f_sem: trace.f_sem().to_vec(),
            color: trace.color(),
        })
    }

    /// Density only; returns 0 outside the box.
    pub fn density(&self, p: Vec3, trace: &mut PointTrace) -> f64 {
        if self.trace_point(p, trace) {
            trace.sigma()
        } else {
            0.0
        }
    }

    pub(crate) fn taps(&self, s: Vec3) -> [PlaneTap; 3] {
        let mut taps = [PlaneTap::default(); 3];
        for (k, axis) in PlaneAxis::ALL.iter().enumerate() {
            let (u, v) = axis.project(s);
            taps[k] = self.planes[k].tap(u, v);
        }
        taps
    }

    pub(crate) fn gather(&self, taps: &[PlaneTap; 3], h: &mut [f64]) {
        h.iter_mut().for_each(|v| *v = 0.0);
        let f = self.feature_dim();
        for k in 0..3 {
            let out = match self.combine {
                CombineMode::Add => &mut h[..],
                CombineMode::Concat => &mut h[k * f..(k + 1) * f],
            };
            self.planes[k].gather_add(&taps[k], out);
        }
    }

    /// Evaluates the model at world point `p`, recording everything needed for a
    /// reverse pass. Returns false (and leaves the trace marked empty) outside the box.
    pub fn trace_point(&self, p: Vec3, trace: &mut PointTrace) -> bool {
        if !self.bounds.contains(p) {
            trace.inside = false;
            return false;
        }
        let s = self.bounds.normalize(p);
        self.trace_normalized(s, trace);
        true
    }

    fn trace_normalized(&self, s: Vec3, trace: &mut PointTrace) {
        trace.inside = true;
        trace.taps = self.taps(s);
        let taps = trace.taps;
        self.gather(&taps, &mut trace.h);
        let geom_out = self.geom.forward_traced(&trace.h, &mut trace.geom);
        let f_sem = self.sem.forward_traced(&geom_out[1..], &mut trace.sem);
        self.color.forward_traced(f_sem, &mut trace.color);
    }

    /// Reverse pass through one traced point. Network gradients flow into every block
    /// whose buffer is present in `grads`; the gradient with respect to the tri-plane
    /// feature `h(p)` is written into `d_h`. Returns false when `d_h` is identically
    /// zero. `d_f_sem` is consumed as scratch.
    pub fn backward_point(
        &self,
        trace: &PointTrace,
        d_sigma: f64,
        d_f_sem: &mut [f64],
        d_color: [f64; 3],
        grads: &mut BlockGrads<'_>,
        d_h: &mut [f64],
    ) -> bool {
        debug_assert!(trace.inside);
        if d_color != [0.0; 3] {
            let mut d_sem_from_color = vec![0.0; self.sem_dim()];
            self.color
                .backward(&trace.color, &d_color, grads.color.as_deref_mut(), &mut d_sem_from_color);
            for (d, e) in d_f_sem.iter_mut().zip(&d_sem_from_color) {
                *d += e;
            }
        }
        let mut d_geom_out = vec![0.0; self.geom.output_dim()];
        if d_f_sem.iter().any(|v| *v != 0.0) {
            self.sem
                .backward(&trace.sem, d_f_sem, grads.sem.as_deref_mut(), &mut d_geom_out[1..]);
        }
        d_geom_out[0] = if trace.sigma_raw() > 0.0 { d_sigma } else { 0.0 };
        if d_geom_out.iter().all(|v| *v == 0.0) {
            return false;
        }
        self.geom.backward(&trace.geom, &d_geom_out, grads.geom.as_deref_mut(), d_h);
        true
    }

    /// Scatters a gradient with respect to `h(p)` onto plane gradient buffers.
    pub fn scatter_plane_grad(&self, taps: &[PlaneTap; 3], d_h: &[f64], planes: &mut [Option<&mut [f64]>; 3]) {
        let f = self.feature_dim();
        for k in 0..3 {
            if let Some(g) = planes[k].as_deref_mut() {
                let d = match self.combine {
                    CombineMode::Add => d_h,
                    CombineMode::Concat => &d_h[k * f..(k + 1) * f],
                };
                FeaturePlane::scatter_add(&taps[k], d, g);
            }
        }
    }
}

fn new_edit_head(kind: EditKind, sem_dim: usize, hidden: usize, seed: u64) -> Result<Mlp> {
    let input = match kind {
        EditKind::Feature => sem_dim,
        EditKind::Color => 3,
    };
    let (d, a) = edit_layout(input, hidden);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mlp = Mlp::init(&d, &a, &mut rng)?;
    // A fresh edit is the identity: zero output layer.
    let (w, b) = mlp.layer_ranges(2);
    mlp.params_mut()[w].iter_mut().for_each(|v| *v = 0.0);
    mlp.params_mut()[b].iter_mut().for_each(|v| *v = 0.0);
    Ok(mlp)
}

/// Borrowed network gradient buffers, one optional slot per block (absent = frozen).
#[derive(Default)]
pub struct BlockGrads<'a> {
    pub geom: Option<&'a mut [f64]>,
    pub sem: Option<&'a mut [f64]>,
    pub color: Option<&'a mut [f64]>,
}

/// Scratch record of one point evaluation.
#[derive(Clone, Debug)]
pub struct PointTrace {
    pub inside: bool,
    pub taps: [PlaneTap; 3],
    pub h: Vec<f64>,
    pub geom: Vec<f64>,
    pub sem: Vec<f64>,
    pub color: Vec<f64>,
    geom_out: usize,
    sem_out: usize,
}

impl PointTrace {
    pub fn new(field: &TriPlaneField) -> Self {
        Self {
            inside: false,
            taps: [PlaneTap::default(); 3],
            h: vec![0.0; field.mlp_input_dim()],
            geom: vec![0.0; field.geom.trace_len()],
            sem: vec![0.0; field.sem.trace_len()],
            color: vec![0.0; field.color.trace_len()],
            geom_out: field.geom.output_dim(),
            sem_out: field.sem_dim(),
        }
    }

    fn geom_out(&self) -> &[f64] {
        &self.geom[self.geom.len() - self.geom_out..]
    }

    pub fn sigma_raw(&self) -> f64 {
        self.geom_out()[0]
    }

    pub fn sigma(&self) -> f64 {
        self.sigma_raw().max(0.0)
    }

    pub fn f_geom(&self) -> &[f64] {
        &self.geom_out()[1..]
    }

    pub fn f_sem(&self) -> &[f64] {
        &self.sem[self.sem.len() - self.sem_out..]
    }

    pub fn color(&self) -> [f64; 3] {
        let n = self.color.len();
        [self.color[n - 3], self.color[n - 2], self.color[n - 1]]
    }
}
