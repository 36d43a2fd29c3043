//! Synthetic multi-view datasets rendered with the analytic integrator, and
//! their on-disk JSON + PNG form.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DerfError, Result};
use crate::geometry::{Camera, Vec3};
use crate::imagebuf::FloatImage;
use crate::render::analytic_render_ray;
use crate::scene::SceneDescription;
use crate::voronoi::Aabb;

pub const MANIFEST_NAME: &str = "dataset.json";

/// Every `HOLDOUT_STRIDE`-th frame is reserved for evaluation.
pub const HOLDOUT_STRIDE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub file_path: String,
    /// Camera-to-world, row-major.
    pub transform_matrix: [[f64; 4]; 4],
}

/// Contents of `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
    pub frames: Vec<FrameRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub file_path: String,
    pub camera: Camera,
    pub image: FloatImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub near: f64,
    pub far: f64,
    pub background: Vec3,
    pub frames: Vec<Frame>,
}

fn pose_to_rows(m: &Matrix4<f64>) -> [[f64; 4]; 4] {
    let mut rows = [[0.0; 4]; 4];
    for (r, row) in rows.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = m[(r, c)];
        }
    }
    rows
}

fn rows_to_pose(rows: &[[f64; 4]; 4]) -> Matrix4<f64> {
    Matrix4::from_fn(|r, c| rows[r][c])
}

impl Dataset {
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            width: self.width,
            height: self.height,
            focal: self.focal,
            near: self.near,
            far: self.far,
            background: [self.background.x, self.background.y, self.background.z],
            frames: self
                .frames
                .iter()
                .map(|f| FrameRecord {
                    file_path: f.file_path.clone(),
                    transform_matrix: pose_to_rows(&f.camera.pose),
                })
                .collect(),
        }
    }

    /// Indices of (training, held-out) frames.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        holdout_split(self.frames.len())
    }

    pub fn train_frames(&self) -> Vec<&Frame> {
        self.split().0.into_iter().map(|i| &self.frames[i]).collect()
    }

    pub fn test_frames(&self) -> Vec<&Frame> {
        self.split().1.into_iter().map(|i| &self.frames[i]).collect()
    }

    /// Region every camera's depth range covers: a cube around the point
    /// closest to all optical axes, with half-extent half the depth range.
    pub fn content_bounds(&self) -> Result<Aabb> {
        if self.frames.is_empty() {
            return Err(DerfError::invalid("dataset has no frames"));
        }
        let mut a = Matrix3::zeros();
        let mut b = Vec3::zeros();
        let mid = 0.5 * (self.near + self.far);
        let mut fallback = Vec3::zeros();
        for f in &self.frames {
            let axis = -f.camera.rotation().column(2).into_owned();
            let proj = Matrix3::identity() - axis * axis.transpose();
            let o = f.camera.center();
            a += proj;
            b += proj * o;
            fallback += o + axis * mid;
        }
        let center = match a.try_inverse() {
            Some(inv) if a.determinant().abs() > 1e-9 * self.frames.len() as f64 => inv * b,
            _ => fallback / self.frames.len() as f64,
        };
        let half = Vec3::from_element(0.5 * (self.far - self.near));
        Ok(Aabb::new(center - half, center + half))
    }
}

pub fn holdout_split(n_frames: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n_frames).partition(|i| i % HOLDOUT_STRIDE != 0)
}

/// Viewpoints spread over a sphere around `bounds`, all looking at its center.
/// The spiral is rotated by a random angle drawn from `rng`.
pub fn orbit_cameras<R: Rng + ?Sized>(
    bounds: &Aabb,
    n_views: usize,
    resolution: u32,
    rng: &mut R,
) -> Result<Vec<Camera>> {
    if n_views == 0 {
        return Err(DerfError::invalid("n_views must be >= 1"));
    }
    if resolution == 0 {
        return Err(DerfError::invalid("resolution must be >= 1"));
    }
    let center = bounds.center();
    let radius = (bounds.max - bounds.min).norm() * 0.5;
    let distance = 2.25 * radius;
    let half_fov = (radius / distance).asin();
    let focal = 0.5 * resolution as f64 / half_fov.tan();
    let near = distance - radius;
    let far = distance + radius;
    let golden = PI * (3.0 - 5f64.sqrt());
    let phase = rng.gen_range(0.0..2.0 * PI);
    (0..n_views)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n_views as f64;
            let r = (1.0 - y * y).sqrt();
            let theta = golden * i as f64 + phase;
            let dir = Vec3::new(r * theta.cos(), r * theta.sin(), y);
            let up = if dir.z.abs() > 0.99 { Vec3::y() } else { Vec3::z() };
            Camera::look_at(center + dir * distance, center, up, focal, resolution, resolution, near, far)
        })
        .collect()
}

/// Renders the scene from `cameras` with the analytic integrator, without
/// quantization.
pub fn render_views(scene: &SceneDescription, cameras: &[Camera]) -> Vec<FloatImage> {
    cameras
        .iter()
        .map(|cam| {
            let n = cam.pixel_count();
            let pixels = (0..n)
                .into_par_iter()
                .map(|p| {
                    let ray = cam.pixel_ray((p % cam.width as usize) as u32, (p / cam.width as usize) as u32);
                    analytic_render_ray(scene, &ray, &scene.background)
                })
                .collect();
            FloatImage {
                width: cam.width,
                height: cam.height,
                pixels,
            }
        })
        .collect()
}

/// In-memory dataset with exact float targets.
pub fn synthesize_dataset<R: Rng + ?Sized>(
    scene: &SceneDescription,
    n_views: usize,
    resolution: u32,
    rng: &mut R,
) -> Result<Dataset> {
    scene.validate()?;
    let cameras = orbit_cameras(&scene.bounds, n_views, resolution, rng)?;
    let images = render_views(scene, &cameras);
    let first = &cameras[0];
    Ok(Dataset {
        width: resolution,
        height: resolution,
        focal: first.focal,
        near: first.near,
        far: first.far,
        background: scene.background,
        frames: cameras
            .into_iter()
            .zip(images)
            .enumerate()
            .map(|(i, (camera, image))| Frame {
                file_path: format!("r_{i:03}.png"),
                camera,
                image,
            })
            .collect(),
    })
}

/// Renders, quantizes and writes a dataset to `out_dir`. The returned dataset
/// holds the quantized images, i.e. exactly what [`load_dataset`] reads back.
pub fn generate_dataset<R: Rng + ?Sized>(
    scene: &SceneDescription,
    n_views: usize,
    resolution: u32,
    rng: &mut R,
    out_dir: &Path,
) -> Result<Dataset> {
    let mut ds = synthesize_dataset(scene, n_views, resolution, rng)?;
    fs::create_dir_all(out_dir)?;
    for f in &mut ds.frames {
        f.image = f.image.quantized();
        f.image.save_png(&out_dir.join(&f.file_path))?;
    }
    save_manifest(&ds.manifest(), &out_dir.join(MANIFEST_NAME))?;
    Ok(ds)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

/// Reads `dataset.json` (or the manifest at `path` if it is a file) and its images.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path: PathBuf = if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    };
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| DerfError::parse(&manifest_path, e))?;

    let frames = manifest
        .frames
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let image_path = root.join(&rec.file_path);
            if !image_path.is_file() {
                return Err(DerfError::MissingImage {
                    frame: i,
                    path: image_path,
                });
            }
            let image = FloatImage::load_png(&image_path)?;
            if image.width != manifest.width || image.height != manifest.height {
                return Err(DerfError::ImageDimensions {
                    path: image_path,
                    found_w: image.width,
                    found_h: image.height,
                    want_w: manifest.width,
                    want_h: manifest.height,
                });
            }
            let camera = Camera::new(
                rows_to_pose(&rec.transform_matrix),
                manifest.focal,
                manifest.width,
                manifest.height,
                manifest.near,
                manifest.far,
            )?;
            Ok(Frame {
                file_path: rec.file_path.clone(),
                camera,
                image,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let [r, g, b] = manifest.background;
    Ok(Dataset {
        width: manifest.width,
        height: manifest.height,
        focal: manifest.focal,
        near: manifest.near,
        far: manifest.far,
        background: Vec3::new(r, g, b),
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn split_every_eighth() {
        let (train, test) = holdout_split(17);
        assert_eq!(test, vec![0, 8, 16]);
        assert_eq!(train.len(), 14);
    }

    #[test]
    fn cameras_look_at_center() {
        let bounds = Aabb::new(Vec3::from_element(-1.0), Vec3::from_element(1.0));
        let cams = orbit_cameras(&bounds, 12, 16, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for c in &cams {
            let axis = -c.rotation().column(2).into_owned();
            let to_center = (bounds.center() - c.center()).normalize();
            assert!((axis - to_center).norm() < 1e-12);
            assert!(c.near > 0.0);
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let mut scene = SceneDescription::two_blob();
        scene.primitives.clear();
        scene.background = Vec3::new(0.2, 0.4, 0.6);
        let ds = synthesize_dataset(&scene, 3, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(ds.frames.len(), 3);
        for f in &ds.frames {
            assert!(f.image.pixels.iter().all(|p| *p == scene.background));
        }
    }

    #[test]
    fn content_bounds_of_orbit() {
        let scene = SceneDescription::three_blob();
        let ds = synthesize_dataset(&scene, 10, 4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = ds.content_bounds().unwrap();
        assert!(b.center().norm() < 1e-9);
        assert!((b.max.x - 3f64.sqrt()).abs() < 1e-9);
    }
}
