use rand::Rng;

use crate::error::{Error, Result};

/// One axis-aligned feature grid of `res x res` nodes with `dim` channels each.
///
/// Nodes sit on the box faces: coordinate 0 maps to node 0 and coordinate 1 to node
/// `res - 1`. Storage is row-major over `(v, u)` with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePlane {
    res: usize,
    dim: usize,
    data: Vec<f32>,
}

/// The four corner nodes and bilinear weights for one lookup.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PlaneTap {
    /// Offsets of the corner feature vectors in the plane's data.
    pub offsets: [usize; 4],
    pub weights: [f64; 4],
}

impl FeaturePlane {
    pub fn zeros(res: usize, dim: usize) -> Result<Self> {
        if res < 2 || dim == 0 {
            return Err(Error::Config(format!(
                "plane needs resolution >= 2 and at least one channel, got {res}x{res}x{dim}"
            )));
        }
        Ok(Self {
            res,
            dim,
            data: vec![0.0; res * res * dim],
        })
    }

    pub fn uniform<R: Rng>(res: usize, dim: usize, half_width: f32, rng: &mut R) -> Result<Self> {
        let mut plane = Self::zeros(res, dim)?;
        for v in &mut plane.data {
            *v = rng.random_range(-half_width..=half_width);
        }
        Ok(plane)
    }

    pub fn from_data(res: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        let plane = Self::zeros(res, dim)?;
        if data.len() != plane.data.len() {
            return Err(Error::DimMismatch {
                what: "plane data",
                expected: plane.data.len(),
                got: data.len(),
            });
        }
        Ok(Self { data, ..plane })
    }

    pub fn res(&self) -> usize {
        self.res
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn node(&self, u: usize, v: usize) -> &[f32] {
        let o = (v * self.res + u) * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn node_mut(&mut self, u: usize, v: usize) -> &mut [f32] {
        let o = (v * self.res + u) * self.dim;
        &mut self.data[o..o + self.dim]
    }

    /// Bilinear lookup weights at normalized coordinates `(s, t)` in `[0, 1]^2`.
    pub fn tap(&self, s: f64, t: f64) -> PlaneTap {
        let last = (self.res - 1) as f64;
        let gu = s.clamp(0.0, 1.0) * last;
        let gv = t.clamp(0.0, 1.0) * last;
        let u0 = (gu.floor() as usize).min(self.res - 2);
        let v0 = (gv.floor() as usize).min(self.res - 2);
        let fu = gu - u0 as f64;
        let fv = gv - v0 as f64;
        let off = |u: usize, v: usize| (v * self.res + u) * self.dim;
        PlaneTap {
            offsets: [off(u0, v0), off(u0 + 1, v0), off(u0, v0 + 1), off(u0 + 1, v0 + 1)],
            weights: [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv],
        }
    }

    /// Accumulates the interpolated feature into `out`.
    pub fn gather_add(&self, tap: &PlaneTap, out: &mut [f64]) {
        for (off, w) in tap.offsets.iter().zip(tap.weights) {
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(&self.data[*off..*off + self.dim]) {
                *o += w * *v as f64;
            }
        }
    }

    /// Scatters `d_feature` back onto the tapped nodes of a gradient buffer shaped like `data`.
    pub fn scatter_add(tap: &PlaneTap, d_feature: &[f64], grad: &mut [f64]) {
        let dim = d_feature.len();
        for (off, w) in tap.offsets.iter().zip(tap.weights) {
            if w == 0.0 {
                continue;
            }
            for (g, d) in grad[*off..*off + dim].iter_mut().zip(d_feature) {
                *g += w * d;
            }
        }
    }
}
