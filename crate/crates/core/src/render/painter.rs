//! Cell-by-cell rendering composited back to front.
//!
//! Each Voronoi cell is rendered into its own premultiplied RGBA layer using
//! only that cell's head, then the layers are stacked with the over operator in
//! decreasing order of site distance from the camera. Because a nearer site's
//! cell can never be hidden behind a farther one, this reproduces the
//! front-to-back per-ray result.

use rayon::prelude::*;

use super::quadrature::compose_unchecked;
use super::{pixel_samples, RenderSettings};
use crate::field::{DerfModel, HeadField, HeadParams, RadianceField, Real};
use crate::geometry::{Camera, Ray, RaySamples, Vec3};
use crate::imagebuf::FloatImage;
use crate::voronoi::{painter_order, ray_cell_intervals};

/// Premultiplied color and opacity of one ray segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentRender {
    pub color: Vec3,
    pub opacity: f64,
    pub cell: usize,
}

impl SegmentRender {
    pub fn empty(cell: usize) -> Self {
        SegmentRender {
            color: Vec3::zeros(),
            opacity: 0.0,
            cell,
        }
    }
}

/// One cell's render over the whole image.
#[derive(Debug, Clone, PartialEq)]
pub struct CellLayer {
    pub cell: usize,
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<SegmentRender>,
}

/// Batching statistics from a painter render.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PainterStats {
    pub order: Vec<usize>,
    pub samples_per_cell: Vec<usize>,
    pub segments: usize,
}

/// Renders the samples `range` of a ray through one head. `samples` holds the
/// ray's global positions and widths.
pub fn render_segment<T: Real>(
    head: &HeadParams<T>,
    ray: &Ray,
    samples: &RaySamples,
    range: std::ops::Range<usize>,
    cell: usize,
) -> SegmentRender {
    if range.is_empty() {
        return SegmentRender::empty(cell);
    }
    let points: Vec<Vec3> = samples.t[range.clone()].iter().map(|&t| ray.at(t)).collect();
    let dirs = vec![ray.direction; points.len()];
    let values = HeadField::new(head).eval_batch(&points, &dirs);
    let sigmas: Vec<f64> = values.iter().map(|v| v.sigma).collect();
    let colors: Vec<Vec3> = values.iter().map(|v| v.color).collect();
    let trace = compose_unchecked(&sigmas, &colors, &samples.delta[range]);
    SegmentRender {
        color: trace.color,
        opacity: trace.opacity,
        cell,
    }
}

/// Front-to-back composition of segments ordered by entry distance.
pub fn composite_segments(segments: &[SegmentRender]) -> (Vec3, f64) {
    let mut color = Vec3::zeros();
    let mut transmittance = 1.0;
    for s in segments {
        color += s.color * transmittance;
        transmittance *= 1.0 - s.opacity;
    }
    (color, 1.0 - transmittance)
}

// Sample range of every (pixel, cell) segment, grouped by cell.
struct CellJobs {
    rays: Vec<(Ray, RaySamples)>,
    jobs: Vec<Vec<(usize, std::ops::Range<usize>)>>,
    segments: usize,
}

fn plan_cells(m: &DerfModel, camera: &Camera, settings: &RenderSettings) -> CellJobs {
    let n_pixels = camera.pixel_count();
    let planned: Vec<((Ray, RaySamples), Vec<(usize, std::ops::Range<usize>)>)> = (0..n_pixels)
        .into_par_iter()
        .map(|p| {
            let (ray, samples) = pixel_samples(camera, &m.normalization, p, settings);
            let mut pieces = Vec::new();
            let mut start = 0;
            for seg in ray_cell_intervals(&ray, &m.decomposition) {
                let mut end = start;
                while end < samples.len() && samples.t[end] < seg.t_out {
                    end += 1;
                }
                if end > start {
                    pieces.push((seg.cell, start..end));
                }
                start = end;
            }
            ((ray, samples), pieces)
        })
        .collect();

    let mut jobs = vec![Vec::new(); m.n_heads()];
    let mut rays = Vec::with_capacity(n_pixels);
    let mut segments = 0;
    for (p, (ray, pieces)) in planned.into_iter().enumerate() {
        segments += pieces.len();
        for (cell, range) in pieces {
            jobs[cell].push((p, range));
        }
        rays.push(ray);
    }
    CellJobs { rays, jobs, segments }
}

fn render_layer(head: &HeadParams<f32>, cell: usize, plan: &CellJobs, camera: &Camera) -> CellLayer {
    const JOB_CHUNK: usize = 256;
    let mut pixels = vec![SegmentRender::empty(cell); camera.pixel_count()];
    let rendered: Vec<(usize, SegmentRender)> = plan.jobs[cell]
        .par_chunks(JOB_CHUNK)
        .flat_map_iter(|chunk| {
            let mut points = Vec::new();
            let mut dirs = Vec::new();
            for (p, range) in chunk {
                let (ray, samples) = &plan.rays[*p];
                points.extend(samples.t[range.clone()].iter().map(|&t| ray.at(t)));
                dirs.extend(std::iter::repeat(ray.direction).take(range.len()));
            }
            let values = HeadField::new(head).eval_batch(&points, &dirs);
            let mut offset = 0;
            chunk
                .iter()
                .map(|(p, range)| {
                    let vals = &values[offset..offset + range.len()];
                    offset += range.len();
                    let sigmas: Vec<f64> = vals.iter().map(|v| v.sigma).collect();
                    let colors: Vec<Vec3> = vals.iter().map(|v| v.color).collect();
                    let trace = compose_unchecked(&sigmas, &colors, &plan.rays[*p].1.delta[range.clone()]);
                    (
                        *p,
                        SegmentRender {
                            color: trace.color,
                            opacity: trace.opacity,
                            cell,
                        },
                    )
                })
                .collect::<Vec<_>>()
        })
        .collect();
    for (p, s) in rendered {
        pixels[p] = s;
    }
    CellLayer {
        cell,
        width: camera.width,
        height: camera.height,
        pixels,
    }
}

/// Renders every cell's layer, touching one head per layer. The samples are
/// the same global stratified samples the monolithic path draws.
pub fn cell_layers(m: &DerfModel, camera: &Camera, settings: &RenderSettings) -> Vec<CellLayer> {
    let plan = plan_cells(m, camera, settings);
    (0..m.n_heads())
        .map(|cell| render_layer(&m.heads[cell], cell, &plan, camera))
        .collect()
}

/// Painter's render using the back-to-front order for the camera.
pub fn painter_render_image(m: &DerfModel, camera: &Camera, settings: &RenderSettings) -> FloatImage {
    let eye = m.normalization.apply(&camera.center());
    let order = painter_order(&m.decomposition, &eye);
    painter_render_image_with_order(m, camera, settings, &order).0
}

/// Painter's render with an explicit layer order (first entry is drawn first,
/// i.e. is the farthest).
pub fn painter_render_image_with_order(
    m: &DerfModel,
    camera: &Camera,
    settings: &RenderSettings,
    order: &[usize],
) -> (FloatImage, PainterStats) {
    let plan = plan_cells(m, camera, settings);
    let mut acc = vec![settings.background; camera.pixel_count()];
    let mut samples_per_cell = vec![0; m.n_heads()];
    for &cell in order {
        samples_per_cell[cell] = plan.jobs[cell].iter().map(|(_, r)| r.len()).sum();
        if plan.jobs[cell].is_empty() {
            continue;
        }
        let layer = render_layer(&m.heads[cell], cell, &plan, camera);
        for (a, s) in acc.iter_mut().zip(&layer.pixels) {
            *a = s.color + *a * (1.0 - s.opacity);
        }
    }
    let image = FloatImage {
        width: camera.width,
        height: camera.height,
        pixels: acc,
    };
    let stats = PainterStats {
        order: order.to_vec(),
        samples_per_cell,
        segments: plan.segments,
    };
    (image, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{init_head, ArchitectureDescriptor, EvalMode};
    use crate::geometry::{stratified_samples, NormalizationTransform};
    use crate::render::{render_image, render_ray_field};
    use crate::voronoi::VoronoiDecomposition;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(sites: Vec<Vec3>, seed: u64) -> DerfModel {
        let desc = ArchitectureDescriptor::new(3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = (0..sites.len()).map(|_| init_head(desc, &mut rng).unwrap()).collect();
        DerfModel::new(
            VoronoiDecomposition::new(sites, 1e10).unwrap(),
            heads,
            init_head(desc, &mut rng).unwrap(),
            desc,
            NormalizationTransform::default(),
        )
        .unwrap()
    }

    fn camera() -> Camera {
        Camera::look_at(Vec3::new(0.4, 0.3, 3.0), Vec3::zeros(), Vec3::y(), 10.0, 12, 10, 1.5, 4.5).unwrap()
    }

    #[test]
    fn composite_examples() {
        let a = SegmentRender {
            color: Vec3::new(0.2, 0.1, 0.0),
            opacity: 0.4,
            cell: 0,
        };
        let b = SegmentRender {
            color: Vec3::new(0.0, 0.5, 0.3),
            opacity: 0.6,
            cell: 1,
        };
        assert_eq!(composite_segments(&[a]), (a.color, a.opacity));
        let (c, o) = composite_segments(&[a, b]);
        assert!((c - (a.color + b.color * 0.6)).norm() < 1e-15);
        assert!((o - (1.0 - 0.6 * 0.4)).abs() < 1e-15);
        let opaque = SegmentRender {
            color: Vec3::new(0.3, 0.3, 0.3),
            opacity: 1.0,
            cell: 2,
        };
        assert_eq!(composite_segments(&[opaque, b]), (opaque.color, 1.0));
    }

    #[test]
    fn segment_helpers() {
        let m = model(vec![Vec3::zeros()], 1);
        let ray = Ray::new(Vec3::new(0.0, 0.0, 3.0), -Vec3::z(), 1.0, 5.0).unwrap();
        let samples = stratified_samples(&ray, 32, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(render_segment(&m.heads[0], &ray, &samples, 3..3, 0), SegmentRender::empty(0));
        let full = render_segment(&m.heads[0], &ray, &samples, 0..32, 0);
        let rgb = render_ray_field(
            &m.field(EvalMode::Hard),
            &ray,
            32,
            &mut ChaCha8Rng::seed_from_u64(2),
            &Vec3::zeros(),
        )
        .unwrap();
        assert!((full.color - rgb).norm() < 1e-12);
        assert!(full.color.iter().all(|&c| c <= full.opacity + 1e-6));
    }

    #[test]
    fn single_cell_matches_monolithic() {
        let m = model(vec![Vec3::new(0.1, 0.0, 0.0)], 3);
        let settings = RenderSettings {
            n_samples: 24,
            seed: 9,
            background: Vec3::new(1.0, 1.0, 1.0),
        };
        let a = painter_render_image(&m, &camera(), &settings);
        let b = render_image(&m, &camera(), &settings, EvalMode::Hard);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn several_cells_match_monolithic() {
        let sites = vec![
            Vec3::new(-0.5, 0.1, 0.2),
            Vec3::new(0.4, -0.3, 0.0),
            Vec3::new(0.0, 0.5, -0.4),
            Vec3::new(0.2, 0.0, 0.9),
        ];
        let m = model(sites, 4);
        let settings = RenderSettings {
            n_samples: 32,
            seed: 5,
            background: Vec3::new(0.2, 0.4, 0.6),
        };
        let a = painter_render_image(&m, &camera(), &settings);
        let b = render_image(&m, &camera(), &settings, EvalMode::Hard);
        assert!(a.max_abs_diff(&b) < 1e-4);
        let layers = cell_layers(&m, &camera(), &settings);
        assert_eq!(layers.len(), 4);
        for layer in &layers {
            for s in &layer.pixels {
                assert!(s.color.iter().all(|&c| c <= s.opacity + 1e-6));
            }
        }
    }
}
