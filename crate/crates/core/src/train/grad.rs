//! Forward and reverse passes of the full training objective over a batch of rays.
//!
//! The reverse pass is written out by hand: compositing, the clamp and residual edit
//! head, the color/semantic/geometry networks and finally the bilinear plane lookups.
//! For compositing, with per-sample loss sensitivities `v_i = dL/dw_i`,
//! `dL/dsigma_k = delta_k * (T_{k+1} v_k - sum_{i>k} v_i w_i)`, which follows from
//! `T_i = exp(-sum_{j<i} sigma_j delta_j)` and `alpha_k = 1 - exp(-sigma_k delta_k)`.
//!
//! Rays are processed in fixed-size chunks whose partial results are reduced in chunk
//! order, so results do not depend on the number of worker threads.

use rayon::prelude::*;

use super::loss::{l1_grad, loss_l1, loss_tv, tv_grad, LossWeights};
use crate::error::{Error, Result};
use crate::field::{BlockGrads, BlockId, ClampPolicy, EditKind, PlaneTap, PointTrace, TriPlaneField};
use crate::math::Vec3;
use crate::select::SelectionMask;

const CHUNK: usize = 16;

/// A set of parameter blocks, used for both "trainable" and "frozen".
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct BlockSet(u8);

impl BlockSet {
    pub const fn none() -> Self {
        Self(0)
    }

    pub const fn all() -> Self {
        Self(0x7f)
    }

    /// Every block of the scene model except the edit head.
    pub const fn field() -> Self {
        Self(0x3f)
    }

    pub fn only(id: BlockId) -> Self {
        Self(1 << id.index())
    }

    pub fn from_blocks(ids: &[BlockId]) -> Self {
        ids.iter().fold(Self::none(), |s, id| s.with(*id))
    }

    pub fn with(self, id: BlockId) -> Self {
        Self(self.0 | (1 << id.index()))
    }

    pub fn without(self, id: BlockId) -> Self {
        Self(self.0 & !(1 << id.index()))
    }

    pub fn contains(self, id: BlockId) -> bool {
        self.0 & (1 << id.index()) != 0
    }

    pub fn complement(self) -> Self {
        Self(!self.0 & 0x7f)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = BlockId> {
        BlockId::ALL.into_iter().filter(move |b| self.contains(*b))
    }

    fn any_field_network(self) -> bool {
        self.contains(BlockId::Geom) || self.contains(BlockId::Sem) || self.contains(BlockId::Color) || self.any_plane()
    }

    fn any_plane(self) -> bool {
        BlockId::PLANES.iter().any(|b| self.contains(*b))
    }
}

/// Dense gradients for the trainable blocks, shaped like the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientSet {
    blocks: [Option<Vec<f64>>; 7],
}

impl GradientSet {
    pub fn zeros(field: &TriPlaneField, blocks: BlockSet) -> Self {
        let mut g = Self::default();
        for id in blocks.iter() {
            g.blocks[id.index()] = Some(vec![0.0; field.block(id).len()]);
        }
        g
    }

    pub fn get(&self, id: BlockId) -> Option<&[f64]> {
        self.blocks[id.index()].as_deref()
    }

    pub fn get_mut(&mut self, id: BlockId) -> Option<&mut [f64]> {
        self.blocks[id.index()].as_deref_mut()
    }

    pub fn blocks(&self) -> BlockSet {
        BlockId::ALL
            .into_iter()
            .filter(|b| self.blocks[b.index()].is_some())
            .fold(BlockSet::none(), |s, b| s.with(b))
    }

    pub fn check_finite(&self) -> Result<()> {
        for id in BlockId::ALL {
            if let Some(g) = self.get(id) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(id.name().to_string()));
                }
            }
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks.iter().flatten().flat_map(|g| g.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }

    fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthTarget {
    /// True when the pixel lies in the projected selection (target is the edited depth).
    pub masked: bool,
    pub value: f64,
}

/// One training ray with its fixed sample depths and supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchRay {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    /// Per-sample selection bits for the residual edit path; empty disables it.
    pub edit_mask: Vec<bool>,
    pub rgb: Option<[f64; 3]>,
    pub feature: Option<Vec<f64>>,
    pub depth: Option<DepthTarget>,
}

/// Probe point outside the selection with the pre-edit density it should keep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityProbe {
    pub p: Vec3,
    pub sigma: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub rays: Vec<BatchRay>,
    pub probes: Vec<DensityProbe>,
    pub background: [f64; 3],
    /// Live selection deciding edit-path membership for rays without explicit bits.
    pub selection: Option<SelectionMask>,
}

/// Which terms make up the scalar objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub feature_weight: f64,
    /// Route masked samples through the field's edit head.
    pub edit: bool,
}

impl Objective {
    pub fn photometric_only() -> Self {
        Self {
            weights: LossWeights::ZERO,
            feature_weight: 0.0,
            edit: false,
        }
    }
}

/// Individual (unweighted) loss terms and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub photometric: f64,
    pub feature: f64,
    pub l1: f64,
    pub tv: f64,
    pub depth: f64,
    pub density: f64,
    pub total: f64,
}

#[derive(Clone, Copy)]
struct Scales {
    photo: f64,
    feature: f64,
    depth_masked: f64,
    depth_unmasked: f64,
    density: f64,
}

#[derive(Default)]
struct Sums {
    photo: f64,
    feature: f64,
    depth_masked: f64,
    depth_unmasked: f64,
    density: f64,
}

struct ChunkOut {
    sums: Sums,
    grads: GradientSet,
    taps: Vec<[PlaneTap; 3]>,
    d_h: Vec<f64>,
}

struct Workspace {
    traces: Vec<PointTrace>,
    edit_traces: Vec<Vec<f64>>,
    inside: Vec<bool>,
    edited: Vec<bool>,
    sigma: Vec<f64>,
    color: Vec<[f64; 3]>,
    pre_clamp: Vec<[f64; 3]>,
    out_color: Vec<[f64; 3]>,
    alpha: Vec<f64>,
    trans: Vec<f64>,
    w: Vec<f64>,
    v: Vec<f64>,
}

impl Workspace {
    fn new() -> Self {
        Self {
            traces: Vec::new(),
            edit_traces: Vec::new(),
            inside: Vec::new(),
            edited: Vec::new(),
            sigma: Vec::new(),
            color: Vec::new(),
            pre_clamp: Vec::new(),
            out_color: Vec::new(),
            alpha: Vec::new(),
            trans: Vec::new(),
            w: Vec::new(),
            v: Vec::new(),
        }
    }

    fn ensure(&mut self, field: &TriPlaneField, n: usize) {
        while self.traces.len() < n {
            self.traces.push(PointTrace::new(field));
            self.edit_traces.push(vec![0.0; field.edit.trace_len()]);
        }
        for v in [&mut self.inside, &mut self.edited] {
            v.clear();
            v.resize(n, false);
        }
        for v in [&mut self.sigma, &mut self.alpha, &mut self.trans, &mut self.w, &mut self.v] {
            v.clear();
            v.resize(n, 0.0);
        }
        for v in [&mut self.color, &mut self.pre_clamp, &mut self.out_color] {
            v.clear();
            v.resize(n, [0.0; 3]);
        }
    }
}

/// Evaluates the objective and, when `trainable` is non-empty, its gradient with
/// respect to those blocks.
pub fn evaluate(field: &TriPlaneField, batch: &Batch, objective: &Objective, trainable: BlockSet) -> Result<(LossBreakdown, GradientSet)> {
    objective.weights.validate()?;
    let d = field.sem_dim();
    let n_rgb = batch.rays.iter().filter(|r| r.rgb.is_some()).count();
    let n_feat = batch.rays.iter().filter(|r| r.feature.is_some()).count();
    let n_dm = batch.rays.iter().filter(|r| matches!(r.depth, Some(t) if t.masked)).count();
    let n_du = batch.rays.iter().filter(|r| matches!(r.depth, Some(t) if !t.masked)).count();
    for r in &batch.rays {
        if r.t.len() != r.delta.len() || (!r.edit_mask.is_empty() && r.edit_mask.len() != r.t.len()) {
            return Err(Error::DimMismatch {
                what: "batch ray samples",
                expected: r.t.len(),
                got: r.delta.len(),
            });
        }
        if let Some(f) = &r.feature {
            if f.len() != d {
                return Err(Error::DimMismatch {
                    what: "feature target",
                    expected: d,
                    got: f.len(),
                });
            }
        }
    }
    let inv = |n: usize| if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let w = objective.weights;
    let scales = Scales {
        photo: inv(3 * n_rgb),
        feature: inv(d * n_feat),
        depth_masked: inv(n_dm),
        depth_unmasked: inv(n_du),
        density: inv(batch.probes.len()),
    };
    let weighted = Scales {
        photo: scales.photo,
        feature: objective.feature_weight * scales.feature,
        depth_masked: w.lambda3 * scales.depth_masked,
        depth_unmasked: w.lambda3 * scales.depth_unmasked,
        density: w.lambda4 * scales.density,
    };
    let want_grad = !trainable.is_empty();

    let ray_chunks: Vec<ChunkOut> = batch
        .rays
        .par_chunks(CHUNK)
        .map(|rays| {
            let mut out = ChunkOut {
                sums: Sums::default(),
                grads: GradientSet::zeros(field, trainable_networks(trainable)),
                taps: Vec::new(),
                d_h: Vec::new(),
            };
            let mut ws = Workspace::new();
            for ray in rays {
                process_ray(field, ray, batch, objective, &weighted, trainable, want_grad, &mut ws, &mut out)?;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let probe_chunks: Vec<ChunkOut> = if w.lambda4 > 0.0 || !batch.probes.is_empty() {
        batch
            .probes
            .par_chunks(256)
            .map(|probes| {
                let mut out = ChunkOut {
                    sums: Sums::default(),
                    grads: GradientSet::zeros(field, trainable_networks(trainable)),
                    taps: Vec::new(),
                    d_h: Vec::new(),
                };
                let mut trace = PointTrace::new(field);
                let mut d_sem = vec![0.0; d];
                let mut d_h = vec![0.0; field.mlp_input_dim()];
                for probe in probes {
                    let sigma = if field.trace_point(probe.p, &mut trace) {
                        trace.sigma()
                    } else {
                        0.0
                    };
                    let e = sigma - probe.sigma;
                    out.sums.density += e * e;
                    if want_grad && trace.inside && weighted.density > 0.0 && trainable.any_field_network() {
                        d_sem.fill(0.0);
                        let mut g = network_grads(&mut out.grads);
                        if field.backward_point(&trace, 2.0 * e * weighted.density, &mut d_sem, [0.0; 3], &mut g, &mut d_h)
                            && trainable.any_plane()
                        {
                            out.taps.push(trace.taps);
                            out.d_h.extend_from_slice(&d_h);
                        }
                    }
                }
                out
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut grads = GradientSet::zeros(field, trainable);
    let mut sums = Sums::default();
    let hdim = field.mlp_input_dim();
    for chunk in ray_chunks.iter().chain(&probe_chunks) {
        sums.photo += chunk.sums.photo;
        sums.feature += chunk.sums.feature;
        sums.depth_masked += chunk.sums.depth_masked;
        sums.depth_unmasked += chunk.sums.depth_unmasked;
        sums.density += chunk.sums.density;
        grads.add_assign(&chunk.grads);
        if want_grad && trainable.any_plane() {
            let [xy, xz, yz, ..] = &mut grads.blocks;
            let mut planes = [xy.as_deref_mut(), xz.as_deref_mut(), yz.as_deref_mut()];
            for (k, taps) in chunk.taps.iter().enumerate() {
                field.scatter_plane_grad(taps, &chunk.d_h[k * hdim..(k + 1) * hdim], &mut planes);
            }
        }
    }

    let l1 = if w.lambda1 > 0.0 { loss_l1(&field.planes) } else { 0.0 };
    let tv = if w.lambda2 > 0.0 { loss_tv(&field.planes) } else { 0.0 };
    if want_grad {
        for (k, id) in BlockId::PLANES.iter().enumerate() {
            if let Some(g) = grads.get_mut(*id) {
                if w.lambda1 > 0.0 {
                    l1_grad(&field.planes[k], w.lambda1, g);
                }
                if w.lambda2 > 0.0 {
                    tv_grad(&field.planes[k], w.lambda2, g);
                }
            }
        }
    }

    let mut losses = LossBreakdown {
        photometric: sums.photo * scales.photo,
        feature: sums.feature * scales.feature,
        l1,
        tv,
        depth: sums.depth_masked * scales.depth_masked + sums.depth_unmasked * scales.depth_unmasked,
        density: sums.density * scales.density,
        total: 0.0,
    };
    losses.total = losses.photometric
        + objective.feature_weight * losses.feature
        + w.lambda1 * losses.l1
        + w.lambda2 * losses.tv
        + w.lambda3 * losses.depth
        + w.lambda4 * losses.density;
    if want_grad {
        grads.check_finite()?;
    }
    Ok((losses, grads))
}

/// Gradient of the objective with respect to every block not in `frozen`.
pub fn backward(field: &TriPlaneField, batch: &Batch, objective: &Objective, frozen: BlockSet) -> Result<GradientSet> {
    evaluate(field, batch, objective, frozen.complement()).map(|(_, g)| g)
}

fn trainable_networks(trainable: BlockSet) -> BlockSet {
    trainable
        .without(BlockId::PlaneXy)
        .without(BlockId::PlaneXz)
        .without(BlockId::PlaneYz)
}

fn network_grads(g: &mut GradientSet) -> BlockGrads<'_> {
    let [_, _, _, geom, sem, color, _] = &mut g.blocks;
    BlockGrads {
        geom: geom.as_deref_mut(),
        sem: sem.as_deref_mut(),
        color: color.as_deref_mut(),
    }
}

#[allow(clippy::too_many_arguments)]
fn process_ray(
    field: &TriPlaneField,
    ray: &BatchRay,
    batch: &Batch,
    objective: &Objective,
    scales: &Scales,
    trainable: BlockSet,
    want_grad: bool,
    ws: &mut Workspace,
    out: &mut ChunkOut,
) -> Result<()> {
    let n = ray.t.len();
    let d = field.sem_dim();
    ws.ensure(field, n);
    let background = batch.background;
    let use_edit = objective.edit && (!ray.edit_mask.is_empty() || batch.selection.is_some());

    // forward
    let mut t_run = 1.0;
    let mut color = [0.0; 3];
    let mut feature = vec![0.0; d];
    let mut depth = 0.0;
    let mut acc = 0.0;
    for i in 0..n {
        let p = ray.origin + ray.direction * ray.t[i];
        ws.trans[i] = t_run;
        if !field.trace_point(p, &mut ws.traces[i]) {
            continue;
        }
        ws.inside[i] = true;
        let tr = &ws.traces[i];
        ws.sigma[i] = tr.sigma();
        let mut c = tr.color();
        ws.color[i] = c;
        if use_edit && edit_bit(ray, batch, i, p, tr.f_sem(), field.version) {
            let x: Vec<f64> = match field.edit_kind {
                EditKind::Feature => tr.f_sem().to_vec(),
                EditKind::Color => c.to_vec(),
            };
            let r = field.edit.forward_traced(&x, &mut ws.edit_traces[i]);
            for k in 0..3 {
                ws.pre_clamp[i][k] = c[k] + r[k];
                c[k] = ws.pre_clamp[i][k].clamp(0.0, 1.0);
            }
            ws.edited[i] = true;
        }
        ws.out_color[i] = c;
        let a = 1.0 - (-ws.sigma[i] * ray.delta[i]).exp();
        let wi = t_run * a;
        ws.alpha[i] = a;
        ws.w[i] = wi;
        for k in 0..3 {
            color[k] += wi * c[k];
        }
        for (f, v) in feature.iter_mut().zip(ws.traces[i].f_sem()) {
            *f += wi * v;
        }
        depth += wi * ray.t[i];
        acc += wi;
        t_run *= 1.0 - a;
    }
    for k in 0..3 {
        color[k] += (1.0 - acc) * background[k];
    }

    // loss and output sensitivities
    let mut d_color = [0.0; 3];
    let mut d_feature = vec![0.0; d];
    let mut d_depth = 0.0;
    if let Some(target) = ray.rgb {
        for k in 0..3 {
            let e = color[k] - target[k];
            out.sums.photo += e * e;
            d_color[k] = 2.0 * e * scales.photo;
        }
    }
    if let Some(target) = &ray.feature {
        for k in 0..d {
            let e = feature[k] - target[k];
            out.sums.feature += e * e;
            d_feature[k] = 2.0 * e * scales.feature;
        }
    }
    if let Some(target) = ray.depth {
        let e = depth - target.value;
        if target.masked {
            out.sums.depth_masked += e * e;
            d_depth = 2.0 * e * scales.depth_masked;
        } else {
            out.sums.depth_unmasked += e * e;
            d_depth = 2.0 * e * scales.depth_unmasked;
        }
    }
    if !want_grad {
        return Ok(());
    }

    // compositing reverse pass
    for i in 0..n {
        if !ws.inside[i] {
            continue;
        }
        let c = ws.out_color[i];
        let mut v = d_depth * ray.t[i];
        for k in 0..3 {
            v += d_color[k] * (c[k] - background[k]);
        }
        for (df, f) in d_feature.iter().zip(ws.traces[i].f_sem()) {
            v += df * f;
        }
        ws.v[i] = v;
    }
    let field_trainable = trainable.any_field_network();
    let edit_trainable = trainable.contains(BlockId::Edit);
    let mut suffix = 0.0;
    let mut d_sem = vec![0.0; d];
    let mut d_h = vec![0.0; field.mlp_input_dim()];
    for i in (0..n).rev() {
        if !ws.inside[i] {
            continue;
        }
        let wi = ws.w[i];
        let d_sigma = ray.delta[i] * (ws.trans[i] * (1.0 - ws.alpha[i]) * ws.v[i] - suffix);
        suffix += ws.v[i] * wi;

        let mut d_c = [wi * d_color[0], wi * d_color[1], wi * d_color[2]];
        for (ds, df) in d_sem.iter_mut().zip(&d_feature) {
            *ds = wi * df;
        }
        if ws.edited[i] {
            for k in 0..3 {
                let pre = ws.pre_clamp[i][k];
                if !(0.0..=1.0).contains(&pre) {
                    d_c[k] = 0.0;
                }
            }
            let edit_in = field.edit.input_dim();
            let mut d_x = vec![0.0; edit_in];
            let g = if edit_trainable { out.grads.get_mut(BlockId::Edit) } else { None };
            if d_c != [0.0; 3] {
                field.edit.backward(&ws.edit_traces[i], &d_c, g, &mut d_x);
                match field.edit_kind {
                    EditKind::Feature => {
                        for (ds, dx) in d_sem.iter_mut().zip(&d_x) {
                            *ds += dx;
                        }
                    }
                    EditKind::Color => {
                        for k in 0..3 {
                            d_c[k] += d_x[k];
                        }
                    }
                }
            }
        }
        if !field_trainable {
            continue;
        }
        let mut g = network_grads(&mut out.grads);
        if field.backward_point(&ws.traces[i], d_sigma, &mut d_sem, d_c, &mut g, &mut d_h) && trainable.any_plane() {
            out.taps.push(ws.traces[i].taps);
            out.d_h.extend_from_slice(&d_h);
        }
    }
    Ok(())
}

fn edit_bit(ray: &BatchRay, batch: &Batch, i: usize, p: Vec3, f_sem: &[f64], version: u64) -> bool {
    if !ray.edit_mask.is_empty() {
        ray.edit_mask[i]
    } else {
        batch.selection.as_ref().is_some_and(|s| s.hit(p, f_sem, version))
    }
}

/// Signs of every non-smooth point of the objective along the batch: rectifier and
/// leaky-rectifier pre-activations, the density rectifier, edit clamps and box
/// membership. Two parameter settings with equal signatures lie on one smooth piece.
pub fn smoothness_signature(field: &TriPlaneField, batch: &Batch, objective: &Objective) -> Vec<bool> {
    let mut sig = Vec::new();
    let mut trace = PointTrace::new(field);
    let mut edit_trace = vec![0.0; field.edit.trace_len()];
    let mut visit = |p: Vec3, edit: bool, sig: &mut Vec<bool>| {
        let inside = field.trace_point(p, &mut trace);
        sig.push(inside);
        if !inside {
            return;
        }
        field.geom.activation_pattern(&trace.geom, sig);
        field.color.activation_pattern(&trace.color, sig);
        if edit {
            let c = trace.color();
            let x: Vec<f64> = match field.edit_kind {
                EditKind::Feature => trace.f_sem().to_vec(),
                EditKind::Color => c.to_vec(),
            };
            let r = field.edit.forward_traced(&x, &mut edit_trace).to_vec();
            field.edit.activation_pattern(&edit_trace, sig);
            for k in 0..3 {
                let pre = c[k] + r[k];
                sig.push(pre < 0.0);
                sig.push(pre > 1.0);
            }
        }
    };
    for ray in &batch.rays {
        for i in 0..ray.t.len() {
            let p = ray.origin + ray.direction * ray.t[i];
            let edit = objective.edit
                && (!ray.edit_mask.is_empty() || batch.selection.is_some())
                && edit_bit(
                    ray,
                    batch,
                    i,
                    p,
                    &field.eval_point(p, ClampPolicy::Clamp).map(|s| s.f_sem).unwrap_or_default(),
                    field.version,
                );
            sig.push(edit);
            visit(p, edit, &mut sig);
        }
    }
    for probe in &batch.probes {
        visit(probe.p, false, &mut sig);
    }
    sig
}
