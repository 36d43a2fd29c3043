//! Volume rendering: per-ray quadrature, whole-image renders, the cell-by-cell
//! painter's path and per-head ray contributions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::field::{DerfModel, EvalMode, RadianceField, RadianceSample};
use crate::geometry::{stratified_samples, Camera, NormalizationTransform, Ray, RaySamples, Vec3};
use crate::imagebuf::FloatImage;
use crate::voronoi::soft_weights;

pub mod analytic;
pub mod painter;
pub mod quadrature;

pub use analytic::analytic_render_ray;
pub use painter::{
    cell_layers, composite_segments, painter_render_image, painter_render_image_with_order, render_segment, CellLayer,
    PainterStats, SegmentRender,
};
pub use quadrature::{quadrature_backward, quadrature_compose, QuadratureTrace};

/// Pixels handled per batched field evaluation.
const PIXEL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub n_samples: usize,
    pub seed: u64,
    pub background: Vec3,
}

/// Independent random stream for one pixel, so results do not depend on how
/// pixels are scheduled.
pub fn pixel_rng(seed: u64, pixel: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pixel as u64);
    rng
}

/// Normalized ray and its stratified samples for one pixel.
pub(crate) fn pixel_samples(
    camera: &Camera,
    normalization: &NormalizationTransform,
    pixel: usize,
    settings: &RenderSettings,
) -> (Ray, RaySamples) {
    let col = (pixel % camera.width as usize) as u32;
    let row = (pixel / camera.width as usize) as u32;
    let ray = normalization.apply_ray(&camera.pixel_ray(col, row));
    let samples = stratified_samples(&ray, settings.n_samples.max(1), &mut pixel_rng(settings.seed, pixel))
        .expect("at least one sample");
    (ray, samples)
}

fn eval_ray_samples<F: RadianceField + ?Sized>(field: &F, ray: &Ray, samples: &RaySamples) -> Vec<RadianceSample> {
    let points: Vec<Vec3> = samples.t.iter().map(|&t| ray.at(t)).collect();
    let dirs = vec![ray.direction; points.len()];
    field.eval_batch(&points, &dirs)
}

fn compose_samples(values: &[RadianceSample], deltas: &[f64]) -> QuadratureTrace {
    let sigmas: Vec<f64> = values.iter().map(|v| v.sigma).collect();
    let colors: Vec<Vec3> = values.iter().map(|v| v.color).collect();
    quadrature::compose_unchecked(&sigmas, &colors, deltas)
}

/// Renders one ray through an arbitrary field (no coordinate change).
pub fn render_ray_field<F: RadianceField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    ray: &Ray,
    n_samples: usize,
    rng: &mut R,
    background: &Vec3,
) -> Result<Vec3> {
    let samples = stratified_samples(ray, n_samples, rng)?;
    let values = eval_ray_samples(field, ray, &samples);
    Ok(compose_samples(&values, &samples.delta).over(background))
}

/// Renders a world-space ray through the decomposed model.
pub fn render_ray<R: Rng + ?Sized>(
    m: &DerfModel,
    ray: &Ray,
    n_samples: usize,
    rng: &mut R,
    mode: EvalMode,
    background: &Vec3,
) -> Result<Vec3> {
    let ray = m.normalization.apply_ray(ray);
    render_ray_field(&m.field(mode), &ray, n_samples, rng, background)
}

/// Whole-image render of `field`, evaluating samples in pixel-chunk batches.
/// `normalization` maps camera rays into the field's coordinate frame.
pub fn render_field_image<F: RadianceField + ?Sized>(
    field: &F,
    camera: &Camera,
    normalization: &NormalizationTransform,
    settings: &RenderSettings,
) -> FloatImage {
    let n_pixels = camera.pixel_count();
    let pixel_ids: Vec<usize> = (0..n_pixels).collect();
    let pixels: Vec<Vec3> = pixel_ids
        .par_chunks(PIXEL_CHUNK)
        .flat_map_iter(|chunk| {
            let per_pixel: Vec<(Ray, RaySamples)> = chunk
                .iter()
                .map(|&p| pixel_samples(camera, normalization, p, settings))
                .collect();
            let mut points = Vec::new();
            let mut dirs = Vec::new();
            for (ray, s) in &per_pixel {
                points.extend(s.t.iter().map(|&t| ray.at(t)));
                dirs.extend(std::iter::repeat(ray.direction).take(s.len()));
            }
            let values = field.eval_batch(&points, &dirs);
            let mut offset = 0;
            per_pixel
                .iter()
                .map(|(_, s)| {
                    let trace = compose_samples(&values[offset..offset + s.len()], &s.delta);
                    offset += s.len();
                    trace.over(&settings.background)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    FloatImage {
        width: camera.width,
        height: camera.height,
        pixels,
    }
}

/// Monolithic render: every ray is composed front to back through the full field.
pub fn render_image(m: &DerfModel, camera: &Camera, settings: &RenderSettings, mode: EvalMode) -> FloatImage {
    render_field_image(&m.field(mode), camera, &m.normalization, settings)
}

/// Where the density and transmittance for [`head_contribution`] come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensitySource {
    /// The scene-wide coarse network.
    Coarse,
    /// The decomposed heads themselves.
    Heads(EvalMode),
}

/// `W_n = sum_i T_i alpha_i w_n(x_i)` for a world-space ray.
pub fn head_contribution<R: Rng + ?Sized>(
    m: &DerfModel,
    ray: &Ray,
    n_samples: usize,
    rng: &mut R,
    source: DensitySource,
) -> Result<Vec<f64>> {
    let ray = m.normalization.apply_ray(ray);
    let samples = stratified_samples(&ray, n_samples, rng)?;
    let values = match source {
        DensitySource::Coarse => eval_ray_samples(&m.coarse_field(), &ray, &samples),
        DensitySource::Heads(mode) => eval_ray_samples(&m.field(mode), &ray, &samples),
    };
    let trace = compose_samples(&values, &samples.delta);
    Ok(contribution_from_trace(m, &ray, &samples, &trace))
}

pub(crate) fn contribution_from_trace(m: &DerfModel, ray: &Ray, samples: &RaySamples, trace: &QuadratureTrace) -> Vec<f64> {
    let mut w_total = vec![0.0; m.n_heads()];
    for (&t, weight) in samples.t.iter().zip(trace.weights()) {
        if weight == 0.0 {
            continue;
        }
        let w = soft_weights(&ray.at(t), &m.decomposition);
        for (acc, wn) in w_total.iter_mut().zip(w.as_slice()) {
            *acc += weight * wn;
        }
    }
    w_total
}
