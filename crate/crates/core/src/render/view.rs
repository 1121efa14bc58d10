use rayon::prelude::*;

use super::camera::{Camera, Ray};
use super::sampling::sample_ray;
use crate::error::Result;
use crate::field::{PointTrace, TriPlaneField};
use crate::select::{Deletion, SelectionMask};
use crate::stack::EditStack;

/// Which image planes a render fills. RGB, depth and alpha are always produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Channels {
    pub features: bool,
    pub coverage: bool,
}

impl Channels {
    pub const BASIC: Channels = Channels {
        features: false,
        coverage: false,
    };
    pub const FEATURES: Channels = Channels {
        features: true,
        coverage: false,
    };
    pub const COVERAGE: Channels = Channels {
        features: false,
        coverage: true,
    };
}

#[derive(Clone, Debug)]
pub struct RenderOptions<'a> {
    pub samples: usize,
    pub channels: Channels,
    pub background: [f64; 3],
    pub stack: Option<&'a EditStack>,
    pub deletion: Option<Deletion<'a>>,
    /// Selection whose composited weight fills the coverage plane.
    pub coverage: Option<&'a SelectionMask>,
    /// Worker threads; `None` uses the global pool. Output never depends on it.
    pub workers: Option<usize>,
}

impl Default for RenderOptions<'_> {
    fn default() -> Self {
        Self {
            samples: 128,
            channels: Channels::BASIC,
            background: [0.0; 3],
            stack: None,
            deletion: None,
            coverage: None,
            workers: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelOut {
    pub color: [f64; 3],
    pub feature: Vec<f64>,
    pub depth: f64,
    pub alpha: f64,
    pub coverage: f64,
}

/// Image planes of one render; pixel `(u, v)` lives at index `v * width + u`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<f32>,
    pub feature_dim: usize,
    pub feature: Vec<f32>,
    pub depth: Vec<f32>,
    pub alpha: Vec<f32>,
    pub coverage: Vec<f32>,
}

impl RenderedImage {
    pub fn pixel(&self, u: u32, v: u32) -> [f32; 3] {
        let i = 3 * (v as usize * self.width as usize + u as usize);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }
}

/// Marches one ray, compositing color, features, depth and selection coverage.
pub fn render_ray(
    field: &TriPlaneField,
    ray: &Ray,
    near: f64,
    far: f64,
    opts: &RenderOptions<'_>,
    trace: &mut PointTrace,
) -> Result<PixelOut> {
    let samples = sample_ray(ray, near, far, opts.samples, None)?;
    let d = field.sem_dim();
    let want_features = opts.channels.features;
    let stack = opts.stack.filter(|s| s.any_enabled());
    let mut out = PixelOut {
        color: [0.0; 3],
        feature: if want_features { vec![0.0; d] } else { Vec::new() },
        depth: 0.0,
        alpha: 0.0,
        coverage: 0.0,
    };
    let mut transmittance = 1.0;
    for i in 0..samples.len() {
        let p = samples.position(i);
        if !field.trace_point(p, trace) {
            continue;
        }
        let f_sem = trace.f_sem();
        let mut sigma = trace.sigma();
        if let Some(del) = &opts.deletion {
            if del.removes(del.selection.hit(p, f_sem, field.version)) {
                sigma = 0.0;
            }
        }
        if sigma == 0.0 {
            continue;
        }
        let alpha = 1.0 - (-sigma * samples.delta[i]).exp();
        let w = transmittance * alpha;
        let mut color = trace.color();
        if let Some(stack) = stack {
            color = stack.apply(color, f_sem, |k| stack.tokens[k].selection.hit(p, f_sem, field.version))?;
        }
        for k in 0..3 {
            out.color[k] += w * color[k];
        }
        if want_features {
            for (o, f) in out.feature.iter_mut().zip(f_sem) {
                *o += w * f;
            }
        }
        if let Some(sel) = opts.coverage {
            if sel.hit(p, f_sem, field.version) {
                out.coverage += w;
            }
        }
        out.depth += w * samples.t[i];
        out.alpha += w;
        transmittance *= 1.0 - alpha;
    }
    let rest = 1.0 - out.alpha;
    for k in 0..3 {
        out.color[k] += rest * opts.background[k];
    }
    Ok(out)
}

/// Runs `f` on a pool of `workers` threads, or on the global pool.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match workers {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}

/// Renders an arbitrary pixel list; outputs follow the input order.
pub fn render_pixels(camera: &Camera, field: &TriPlaneField, pixels: &[(u32, u32)], opts: &RenderOptions<'_>) -> Result<RenderedImage> {
    camera.validate()?;
    let rays = camera.generate_rays(pixels)?;
    let outs: Result<Vec<PixelOut>> = with_workers(opts.workers, || {
        rays.par_chunks(64)
            .map(|chunk| {
                let mut trace = PointTrace::new(field);
                chunk
                    .iter()
                    .map(|r| render_ray(field, r, camera.near, camera.far, opts, &mut trace))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()
            .map(|v| v.into_iter().flatten().collect())
    });
    let outs = outs?;
    let d = field.sem_dim();
    let mut img = RenderedImage {
        width: pixels.len() as u32,
        height: 1,
        rgb: Vec::with_capacity(3 * outs.len()),
        feature_dim: if opts.channels.features { d } else { 0 },
        feature: Vec::new(),
        depth: Vec::with_capacity(outs.len()),
        alpha: Vec::with_capacity(outs.len()),
        coverage: Vec::new(),
    };
    for o in outs {
        img.rgb.extend(o.color.iter().map(|v| *v as f32));
        img.depth.push(o.depth as f32);
        img.alpha.push(o.alpha as f32);
        if opts.channels.features {
            img.feature.extend(o.feature.iter().map(|v| *v as f32));
        }
        if opts.channels.coverage {
            img.coverage.push(o.coverage as f32);
        }
    }
    Ok(img)
}

/// Renders every pixel of a view.
pub fn render_view(camera: &Camera, field: &TriPlaneField, opts: &RenderOptions<'_>) -> Result<RenderedImage> {
    let pixels: Vec<(u32, u32)> = (0..camera.height).flat_map(|v| (0..camera.width).map(move |u| (u, v))).collect();
    let mut img = render_pixels(camera, field, &pixels, opts)?;
    img.width = camera.width;
    img.height = camera.height;
    Ok(img)
}
