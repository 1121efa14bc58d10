//! Rays, sampling, compositing and whole-view rendering.

mod camera;
mod composite;
mod sampling;
mod view;

pub use camera::{Camera, Ray};
pub use composite::{composite, composite_with_edit, compute_weights, CompositeResult, Weights};
pub use sampling::{sample_ray, spacing, RaySamples};
pub use view::{render_pixels, render_ray, render_view, with_workers, Channels, PixelOut, RenderOptions, RenderedImage};

pub fn generate_rays(camera: &Camera, pixels: &[(u32, u32)]) -> crate::Result<Vec<Ray>> {
    camera.generate_rays(pixels)
}
