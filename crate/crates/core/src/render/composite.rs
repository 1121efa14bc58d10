//! Front-to-back alpha compositing of per-sample values.
//!
//! For densities `sigma_i` over segments `delta_i`:
//! `alpha_i = 1 - exp(-sigma_i * delta_i)`, `T_i = prod_{j<i} (1 - alpha_j)` and the
//! per-sample weight is `w_i = T_i * alpha_i`. Color, semantic features and depth are
//! all weighted sums with these weights.

use crate::error::{Error, Result};
use crate::stack::EditStack;

#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub alpha: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Weights {
    pub fn accumulated(&self) -> f64 {
        self.weights.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeResult {
    pub color: [f64; 3],
    pub feature: Vec<f64>,
    pub depth: f64,
    pub alpha: f64,
    pub weights: Vec<f64>,
}

pub fn compute_weights(sigmas: &[f64], deltas: &[f64]) -> Result<Weights> {
    if sigmas.len() != deltas.len() {
        return Err(Error::DimMismatch {
            what: "composite deltas",
            expected: sigmas.len(),
            got: deltas.len(),
        });
    }
    let n = sigmas.len();
    let mut alpha = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut t = 1.0;
    for (&s, &d) in sigmas.iter().zip(deltas) {
        if s.is_nan() || d.is_nan() {
            return Err(Error::NonFinite("composite input"));
        }
        let a = 1.0 - (-s * d).exp();
        alpha.push(a);
        transmittance.push(t);
        weights.push(t * a);
        t *= 1.0 - a;
    }
    Ok(Weights {
        alpha,
        transmittance,
        weights,
    })
}

/// Composites colors, optional features (row-major, `feature_dim` per sample) and depth.
pub fn composite(
    sigmas: &[f64],
    deltas: &[f64],
    t: &[f64],
    colors: &[[f64; 3]],
    features: &[f64],
    feature_dim: usize,
) -> Result<CompositeResult> {
    let n = sigmas.len();
    for (what, got) in [("composite depths", t.len()), ("composite colors", colors.len())] {
        if got != n {
            return Err(Error::DimMismatch { what, expected: n, got });
        }
    }
    if features.len() != n * feature_dim {
        return Err(Error::DimMismatch {
            what: "composite features",
            expected: n * feature_dim,
            got: features.len(),
        });
    }
    let w = compute_weights(sigmas, deltas)?;
    let mut color = [0.0; 3];
    let mut feature = vec![0.0; feature_dim];
    let mut depth = 0.0;
    for i in 0..n {
        let wi = w.weights[i];
        for c in 0..3 {
            color[c] += wi * colors[i][c];
        }
        for (f, v) in feature.iter_mut().zip(&features[i * feature_dim..(i + 1) * feature_dim]) {
            *f += wi * v;
        }
        depth += wi * t[i];
    }
    Ok(CompositeResult {
        color,
        feature,
        depth,
        alpha: w.accumulated(),
        weights: w.weights,
    })
}

/// Masked residual compositing: samples with their mask bit set receive the stacked
/// residual color before compositing. The stack's own selections are ignored here;
/// `mask_bits` decides for every token.
pub fn composite_with_edit(
    sigmas: &[f64],
    deltas: &[f64],
    base_colors: &[[f64; 3]],
    f_sems: &[f64],
    mask_bits: &[bool],
    stack: &EditStack,
) -> Result<[f64; 3]> {
    let n = sigmas.len();
    if base_colors.len() != n || mask_bits.len() != n {
        return Err(Error::DimMismatch {
            what: "edit composite inputs",
            expected: n,
            got: base_colors.len().min(mask_bits.len()),
        });
    }
    let dim = f_sems.len().checked_div(n).unwrap_or(0);
    if f_sems.len() != n * dim {
        return Err(Error::DimMismatch {
            what: "edit composite features",
            expected: n * dim,
            got: f_sems.len(),
        });
    }
    let w = compute_weights(sigmas, deltas)?;
    let mut out = [0.0; 3];
    for i in 0..n {
        let c = if mask_bits[i] {
            stack.apply(base_colors[i], &f_sems[i * dim..(i + 1) * dim], |_| true)?
        } else {
            base_colors[i]
        };
        for k in 0..3 {
            out[k] += w.weights[i] * c[k];
        }
    }
    Ok(out)
}
