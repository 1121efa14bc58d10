use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{RigidTransform, Vec3};

/// Pinhole camera. The camera looks down its local `-z` axis with `+y` up; pixel rows
/// grow downwards, so image `v` maps to camera `-y`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub camera_to_world: RigidTransform,
    pub near: f64,
    pub far: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

impl Camera {
    /// Symmetric camera with the principal point at the image center.
    pub fn with_fov(width: u32, height: u32, fov_y_degrees: f64, camera_to_world: RigidTransform, near: f64, far: f64) -> Self {
        let fy = 0.5 * height as f64 / (0.5 * fov_y_degrees.to_radians()).tan();
        Self {
            fx: fy,
            fy,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
            camera_to_world,
            near,
            far,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.near, self.far]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !self.camera_to_world.0.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("non-finite parameter".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("image size must be non-zero".into()));
        }
        if !(0.0 < self.near && self.near < self.far) {
            return Err(Error::InvalidCamera(format!(
                "need 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        let ortho = self.camera_to_world.orthonormality_error();
        if ortho > 1e-5 {
            return Err(Error::InvalidCamera(format!(
                "rotation block is not orthonormal (error {ortho:.2e})"
            )));
        }
        Ok(())
    }

    pub fn position(&self) -> Vec3 {
        self.camera_to_world.translation()
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Ray through the center of pixel `(u, v)`.
    pub fn ray(&self, u: u32, v: u32) -> Result<Ray> {
        if u >= self.width || v >= self.height {
            return Err(Error::PixelOutOfRange {
                u,
                v,
                width: self.width,
                height: self.height,
            });
        }
        Ok(self.ray_unchecked(u as f64 + 0.5, v as f64 + 0.5))
    }

    /// Ray through continuous image coordinates.
    pub fn ray_unchecked(&self, x: f64, y: f64) -> Ray {
        let local = Vec3::new((x - self.cx) / self.fx, -(y - self.cy) / self.fy, -1.0);
        Ray {
            origin: self.position(),
            direction: self.camera_to_world.rotate(local).normalized(),
        }
    }

    pub fn generate_rays(&self, pixels: &[(u32, u32)]) -> Result<Vec<Ray>> {
        pixels.iter().map(|&(u, v)| self.ray(u, v)).collect()
    }

    /// Projects a world point to continuous pixel coordinates; `None` behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let d = p - self.position();
        let c = &self.camera_to_world;
        let local = Vec3::new(d.dot(c.column(0)), d.dot(c.column(1)), d.dot(c.column(2)));
        if local.z >= 0.0 {
            return None;
        }
        let depth = -local.z;
        Some((self.cx + self.fx * local.x / depth, self.cy - self.fy * local.y / depth))
    }
}
