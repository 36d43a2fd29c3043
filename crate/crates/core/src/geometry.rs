//! Cameras, rays, stratified sampling and the scene normalization that maps
//! content into the unit cube.
//!
//! Cameras follow the usual NeRF convention: the pose is camera-to-world, the
//! camera looks down its local `-z` axis and `+y` is up in image space.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DerfError, Result};

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    /// Builds a ray, normalizing `direction`.
    pub fn new(origin: Vec3, direction: Vec3, t_near: f64, t_far: f64) -> Result<Self> {
        let norm = direction.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(DerfError::invalid("ray direction must be non-zero and finite"));
        }
        if !(t_near >= 0.0 && t_far > t_near) {
            return Err(DerfError::invalid(format!(
                "ray bounds must satisfy 0 <= t_near < t_far, got [{t_near}, {t_far}]"
            )));
        }
        Ok(Ray {
            origin,
            direction: direction / norm,
            t_near,
            t_far,
        })
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    pub fn length(&self) -> f64 {
        self.t_far - self.t_near
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Camera-to-world rigid transform.
    pub pose: Matrix4<f64>,
    /// Focal length in pixels.
    pub focal: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(pose: Matrix4<f64>, focal: f64, width: u32, height: u32, near: f64, far: f64) -> Result<Self> {
        let camera = Camera {
            pose,
            focal,
            width,
            height,
            near,
            far,
        };
        camera.validate()?;
        Ok(camera)
    }

    /// Camera at `eye` looking at `target`, with `up` as the approximate up vector.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: u32, height: u32, near: f64, far: f64) -> Result<Self> {
        let back = (eye - target).normalize();
        let right = up.cross(&back);
        if right.norm() < 1e-12 {
            return Err(DerfError::invalid("look_at: up vector parallel to view direction"));
        }
        let right = right.normalize();
        let true_up = back.cross(&right);
        let mut pose = Matrix4::identity();
        pose.fixed_view_mut::<3, 1>(0, 0).copy_from(&right);
        pose.fixed_view_mut::<3, 1>(0, 1).copy_from(&true_up);
        pose.fixed_view_mut::<3, 1>(0, 2).copy_from(&back);
        pose.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye);
        Camera::new(pose, focal, width, height, near, far)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(DerfError::invalid("camera dimensions must be >= 1"));
        }
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return Err(DerfError::invalid("camera focal length must be positive"));
        }
        if !(self.near >= 0.0 && self.far > self.near) {
            return Err(DerfError::invalid("camera must satisfy 0 <= near < far"));
        }
        let rot = self.rotation();
        let err = (rot.transpose() * rot - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(DerfError::invalid(format!(
                "camera rotation is not orthonormal (error {err:.2e})"
            )));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.pose.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn center(&self) -> Vec3 {
        self.pose.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Ray through the center of pixel (`col`, `row`).
    pub fn pixel_ray(&self, col: u32, row: u32) -> Ray {
        let local = Vec3::new(
            (col as f64 + 0.5 - self.width as f64 / 2.0) / self.focal,
            -(row as f64 + 0.5 - self.height as f64 / 2.0) / self.focal,
            -1.0,
        );
        let direction = (self.rotation() * local).normalize();
        Ray {
            origin: self.center(),
            direction,
            t_near: self.near,
            t_far: self.far,
        }
    }
}

/// One ray per pixel, row-major.
pub fn generate_rays(camera: &Camera) -> Vec<Ray> {
    (0..camera.height)
        .flat_map(|row| (0..camera.width).map(move |col| camera.pixel_ray(col, row)))
        .collect()
}

/// Isotropic map `x -> scale * x + offset` from world to normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationTransform {
    pub scale: f64,
    pub offset: Vec3,
}

impl Default for NormalizationTransform {
    fn default() -> Self {
        NormalizationTransform {
            scale: 1.0,
            offset: Vec3::zeros(),
        }
    }
}

impl NormalizationTransform {
    pub fn apply(&self, x: &Vec3) -> Vec3 {
        x * self.scale + self.offset
    }

    pub fn invert(&self, y: &Vec3) -> Vec3 {
        (y - self.offset) / self.scale
    }

    /// Maps a world-space ray into normalized space. Directions are unchanged
    /// by an isotropic map; distances along the ray scale with it.
    pub fn apply_ray(&self, ray: &Ray) -> Ray {
        Ray {
            origin: self.apply(&ray.origin),
            direction: ray.direction,
            t_near: ray.t_near * self.scale,
            t_far: ray.t_far * self.scale,
        }
    }
}

/// Fits a uniform scale and offset mapping the bounding box of `points` onto a
/// centered box inside `[-1, 1]^3`. A degenerate box (a single point) falls back
/// to a unit half-extent around its center.
pub fn build_normalization(points: &[Vec3]) -> Result<NormalizationTransform> {
    let first = points
        .first()
        .ok_or_else(|| DerfError::invalid("cannot fit a normalization to zero points"))?;
    let (lo, hi) = points.iter().fold((*first, *first), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
    let center = (lo + hi) * 0.5;
    let half_extent = ((hi - lo) * 0.5).max();
    let half_extent = if half_extent > 1e-12 { half_extent } else { 1.0 };
    let scale = 1.0 / half_extent;
    Ok(NormalizationTransform {
        scale,
        offset: -center * scale,
    })
}

pub fn apply_normalization(t: &NormalizationTransform, x: &Vec3) -> Vec3 {
    t.apply(x)
}

/// Sample positions along a ray plus the quadrature widths `delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
}

impl RaySamples {
    /// Widths from consecutive positions, the last running to `t_far`.
    pub fn from_positions(t: Vec<f64>, t_far: f64) -> Self {
        let delta = t
            .iter()
            .enumerate()
            .map(|(i, &ti)| t.get(i + 1).copied().unwrap_or(t_far) - ti)
            .collect();
        RaySamples { t, delta }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// One uniform draw in each of `n` equal bins of `[t_near, t_far]`.
pub fn stratified_samples<R: Rng + ?Sized>(ray: &Ray, n: usize, rng: &mut R) -> Result<RaySamples> {
    if n == 0 {
        return Err(DerfError::invalid("stratified_samples needs n >= 1"));
    }
    let bin = ray.length() / n as f64;
    let t = (0..n)
        .map(|i| {
            let lo = ray.t_near + bin * i as f64;
            lo + bin * rng.gen::<f64>()
        })
        .collect();
    Ok(RaySamples::from_positions(t, ray.t_far))
}
