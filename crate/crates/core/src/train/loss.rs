//! Loss terms. Every term accumulates in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FeaturePlane, PointTrace, TriPlaneField};
use crate::math::Vec3;

/// Regularizer and auxiliary-loss weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// L1 on plane entries.
    pub lambda1: f64,
    /// Total variation on planes.
    pub lambda2: f64,
    /// Depth consistency.
    pub lambda3: f64,
    /// Density preservation outside the selection.
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1e-4,
            lambda2: 1e-3,
            lambda3: 0.05,
            lambda4: 0.1,
        }
    }
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
        lambda4: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {all:?}")));
        }
        Ok(())
    }
}

fn mse(a: &[f32], b: &[f32], what: &'static str) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            what,
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::Empty(what));
    }
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

/// Mean squared error over all pixels and channels of interleaved RGB buffers.
pub fn loss_photometric(rendered: &[f32], target: &[f32]) -> Result<f64> {
    mse(rendered, target, "photometric batch")
}

/// Mean squared error between composited and target feature images (`dim` channels).
pub fn loss_feature(rendered: &[f32], target: &[f32], dim: usize) -> Result<f64> {
    if dim == 0 || !rendered.len().is_multiple_of(dim) || !target.len().is_multiple_of(dim) {
        return Err(Error::DimMismatch {
            what: "feature channels",
            expected: dim,
            got: if dim == 0 { 0 } else { target.len() % dim },
        });
    }
    mse(rendered, target, "feature batch")
}

pub fn loss_l1(planes: &[FeaturePlane; 3]) -> f64 {
    planes.iter().flat_map(|p| p.data().iter()).map(|v| (*v as f64).abs()).sum()
}

/// Sum of squared differences between vertically and horizontally adjacent nodes, over
/// every channel of every plane.
pub fn loss_tv(planes: &[FeaturePlane; 3]) -> f64 {
    planes.iter().map(plane_tv).sum()
}

fn plane_tv(p: &FeaturePlane) -> f64 {
    let (r, f) = (p.res(), p.dim());
    let d = p.data();
    let at = |u: usize, v: usize, c: usize| d[(v * r + u) * f + c] as f64;
    let mut s = 0.0;
    for v in 0..r {
        for u in 0..r {
            for c in 0..f {
                let x = at(u, v, c);
                if v > 0 {
                    let e = x - at(u, v - 1, c);
                    s += e * e;
                }
                if u > 0 {
                    let e = x - at(u - 1, v, c);
                    s += e * e;
                }
            }
        }
    }
    s
}

/// Adds `scale * d(L1)/dW` to a plane gradient buffer.
pub(crate) fn l1_grad(p: &FeaturePlane, scale: f64, grad: &mut [f64]) {
    for (g, v) in grad.iter_mut().zip(p.data()) {
        let s = if *v > 0.0 {
            1.0
        } else if *v < 0.0 {
            -1.0
        } else {
            0.0
        };
        *g += scale * s;
    }
}

/// Adds `scale * d(TV)/dW` to a plane gradient buffer.
pub(crate) fn tv_grad(p: &FeaturePlane, scale: f64, grad: &mut [f64]) {
    let (r, f) = (p.res(), p.dim());
    let d = p.data();
    let idx = |u: usize, v: usize, c: usize| (v * r + u) * f + c;
    for v in 0..r {
        for u in 0..r {
            for c in 0..f {
                let x = d[idx(u, v, c)] as f64;
                if v > 0 {
                    let j = idx(u, v - 1, c);
                    let e = 2.0 * scale * (x - d[j] as f64);
                    grad[idx(u, v, c)] += e;
                    grad[j] -= e;
                }
                if u > 0 {
                    let j = idx(u - 1, v, c);
                    let e = 2.0 * scale * (x - d[j] as f64);
                    grad[idx(u, v, c)] += e;
                    grad[j] -= e;
                }
            }
        }
    }
}

/// Mean over masked pixels of `(R - E)^2` plus mean over unmasked pixels of `(R - C)^2`.
/// An empty side contributes nothing.
pub fn loss_depth(rendered: &[f32], edited: &[f32], original: &[f32], mask: &[bool]) -> Result<f64> {
    let n = rendered.len();
    for (what, got) in [
        ("edited depth", edited.len()),
        ("original depth", original.len()),
        ("depth mask", mask.len()),
    ] {
        if got != n {
            return Err(Error::DimMismatch { what, expected: n, got });
        }
    }
    let (mut sm, mut nm, mut su, mut nu) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        if mask[i] {
            let d = rendered[i] as f64 - edited[i] as f64;
            sm += d * d;
            nm += 1;
        } else {
            let d = rendered[i] as f64 - original[i] as f64;
            su += d * d;
            nu += 1;
        }
    }
    let part = |s: f64, k: usize| if k == 0 { 0.0 } else { s / k as f64 };
    Ok(part(sm, nm) + part(su, nu))
}

/// Mean over probes outside the selection of `(sigma_orig - sigma_edit)^2`.
pub fn loss_density_preserve(original: &TriPlaneField, edited: &TriPlaneField, probes: &[Vec3], selected: impl Fn(Vec3) -> bool) -> f64 {
    let mut to = PointTrace::new(original);
    let mut te = PointTrace::new(edited);
    let (mut s, mut n) = (0.0, 0usize);
    for p in probes {
        if selected(*p) {
            continue;
        }
        let d = original.density(*p, &mut to) - edited.density(*p, &mut te);
        s += d * d;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn image_psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    Ok(psnr(mse(a, b, "psnr images")?))
}
