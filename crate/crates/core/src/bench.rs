//! Multiply-accumulate accounting, render timing and image quality metrics.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{DerfError, Result};
use crate::field::{ArchitectureDescriptor, DerfModel, EvalMode};
use crate::geometry::Camera;
use crate::imagebuf::FloatImage;
use crate::render::{painter_render_image_with_order, render_image, PainterStats, RenderSettings};
use crate::voronoi::painter_order;

/// Per-sample MACs of one head, by stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMacs {
    pub trunk_input: u64,
    pub trunk_hidden: u64,
    pub skip: u64,
    pub density: u64,
    pub feature: u64,
    pub direction: u64,
    pub color: u64,
}

impl StageMacs {
    pub fn new(d: &ArchitectureDescriptor) -> Self {
        let w = d.width as u64;
        let pos = d.pos_dim() as u64;
        let dir = d.dir_dim() as u64;
        let half = d.color_hidden() as u64;
        StageMacs {
            trunk_input: pos * w,
            trunk_hidden: (d.depth as u64 - 1) * w * w,
            skip: if d.has_skip() { pos * w } else { 0 },
            density: w,
            feature: w * w,
            direction: (w + dir) * half,
            color: half * 3,
        }
    }

    pub fn total(&self) -> u64 {
        self.trunk_input + self.trunk_hidden + self.skip + self.density + self.feature + self.direction + self.color
    }

    /// The `W x W` products, which scale quadratically with width.
    pub fn hidden_subtotal(&self) -> u64 {
        self.trunk_hidden + self.feature
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub descriptor: ArchitectureDescriptor,
    pub n_heads: usize,
    pub stages: StageMacs,
    pub macs_per_sample: u64,
    pub samples_per_frame: u64,
    /// `2 * macs_per_sample * samples_per_frame`.
    pub frame_flops: u64,
    /// Samples charged to each head, when known.
    pub samples_per_head: Vec<u64>,
}

/// Closed-form MLP cost of rendering `rays * samples` samples, each routed to
/// exactly one head.
pub fn flop_report(descriptor: &ArchitectureDescriptor, n_heads: usize, rays: u64, samples: u64) -> FlopReport {
    let stages = StageMacs::new(descriptor);
    let per_sample = stages.total();
    FlopReport {
        descriptor: *descriptor,
        n_heads,
        stages,
        macs_per_sample: per_sample,
        samples_per_frame: rays * samples,
        frame_flops: 2 * per_sample * rays * samples,
        samples_per_head: Vec::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderPath {
    Monolithic,
    Painter,
}

impl std::str::FromStr for RenderPath {
    type Err = DerfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "monolithic" => Ok(RenderPath::Monolithic),
            "painter" => Ok(RenderPath::Painter),
            other => Err(DerfError::invalid(format!("unknown render path `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub path: RenderPath,
    pub median_seconds: f64,
    pub runs: Vec<f64>,
    pub threads: usize,
    pub samples_per_cell: Option<Vec<usize>>,
    pub segments: Option<usize>,
}

/// Renders once to warm up, then `repeats` timed renders; reports the median.
pub fn time_render(
    m: &DerfModel,
    camera: &Camera,
    settings: &RenderSettings,
    path: RenderPath,
    repeats: usize,
) -> Timing {
    let repeats = repeats.max(1);
    let order = painter_order(&m.decomposition, &m.normalization.apply(&camera.center()));
    let mut stats: Option<PainterStats> = None;
    let mut run = || match path {
        RenderPath::Monolithic => {
            std::hint::black_box(render_image(m, camera, settings, EvalMode::Hard));
        }
        RenderPath::Painter => {
            let (img, s) = painter_render_image_with_order(m, camera, settings, &order);
            std::hint::black_box(img);
            stats = Some(s);
        }
    };
    run();
    let runs: Vec<f64> = (0..repeats)
        .map(|_| {
            let start = Instant::now();
            run();
            start.elapsed().as_secs_f64()
        })
        .collect();
    let mut sorted = runs.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if repeats % 2 == 1 {
        sorted[repeats / 2]
    } else {
        0.5 * (sorted[repeats / 2 - 1] + sorted[repeats / 2])
    };
    Timing {
        path,
        median_seconds: median,
        runs,
        threads: rayon::current_num_threads(),
        samples_per_cell: stats.as_ref().map(|s| s.samples_per_cell.clone()),
        segments: stats.map(|s| s.segments),
    }
}

/// Returned by [`psnr`] for identical images.
pub const PSNR_IDENTICAL: f64 = f64::INFINITY;

fn check_dims(a: &FloatImage, b: &FloatImage) -> Result<()> {
    if !a.same_dims(b) {
        return Err(DerfError::Shape(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse(img: &FloatImage, reference: &FloatImage) -> Result<f64> {
    check_dims(img, reference)?;
    let sum: f64 = img
        .pixels
        .iter()
        .zip(&reference.pixels)
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    Ok(sum / (3 * img.pixels.len()) as f64)
}

pub fn psnr(img: &FloatImage, reference: &FloatImage) -> Result<f64> {
    let e = mse(img, reference)?;
    Ok(if e == 0.0 { PSNR_IDENTICAL } else { -10.0 * e.log10() })
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM of the channel-mean luminance over all fully contained windows.
pub fn ssim(img: &FloatImage, reference: &FloatImage) -> Result<f64> {
    check_dims(img, reference)?;
    let (w, h) = (img.width as usize, img.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(DerfError::invalid(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let gray = |im: &FloatImage| -> Vec<f64> { im.pixels.iter().map(|p| p.mean()).collect() };
    let (x, y) = (gray(img), gray(reference));
    let g = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=h - SSIM_WINDOW {
        for c0 in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, gi) in g.iter().enumerate() {
                for (j, gj) in g.iter().enumerate() {
                    let k = (r0 + i) * w + c0 + j;
                    let wt = gi * gj;
                    mx += wt * x[k];
                    my += wt * y[k];
                    sxx += wt * x[k] * x[k];
                    syy += wt * y[k] * y[k];
                    sxy += wt * x[k] * y[k];
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    /// `+inf` for identical images.
    pub psnr: f64,
    pub ssim: f64,
}

/// PSNR always; SSIM when the images are at least one window large.
pub fn quality(img: &FloatImage, reference: &FloatImage) -> Result<(f64, Option<f64>)> {
    let p = psnr(img, reference)?;
    let s = match ssim(img, reference) {
        Ok(s) => Some(s),
        Err(DerfError::InvalidArgument(_)) => None,
        Err(e) => return Err(e),
    };
    Ok((p, s))
}

pub fn quality_report(img: &FloatImage, reference: &FloatImage) -> Result<QualityReport> {
    Ok(QualityReport {
        psnr: psnr(img, reference)?,
        ssim: ssim(img, reference)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    fn flat(v: f64, n: u32) -> FloatImage {
        FloatImage::filled(n, n, Vec3::from_element(v))
    }

    #[test]
    fn psnr_examples() {
        assert_eq!(psnr(&flat(0.3, 4), &flat(0.3, 4)).unwrap(), PSNR_IDENTICAL);
        assert!((psnr(&flat(0.5, 4), &flat(0.4, 4)).unwrap() - 20.0).abs() < 1e-9);
        assert!((psnr(&flat(0.5, 4), &flat(0.25, 4)).unwrap() - 12.041199826559248).abs() < 1e-9);
        assert!(psnr(&flat(0.5, 4), &flat(0.5, 5)).is_err());
    }

    #[test]
    fn ssim_constant_images() {
        let (a, b) = (0.6, 0.2);
        let expected = (2.0 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1);
        assert!((ssim(&flat(a, 16), &flat(b, 16)).unwrap() - expected).abs() < 1e-12);
        assert!((ssim(&flat(a, 16), &flat(a, 16)).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&flat(a, 10), &flat(a, 10)).is_err());
    }

    #[test]
    fn window_is_normalized() {
        let g = gaussian_window();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(g[0], g[10]);
    }

    #[test]
    fn flop_closed_form() {
        let d = ArchitectureDescriptor::new(4, 32);
        let r = flop_report(&d, 1, 10, 4);
        assert_eq!(r.macs_per_sample, 63 * 32 + 3 * 32 * 32 + 63 * 32 + 32 + 32 * 32 + (32 + 27) * 16 + 16 * 3);
        assert_eq!(r.macs_per_sample, 9152);
        assert_eq!(r.frame_flops, 2 * 9152 * 40);
        assert_eq!(flop_report(&d, 8, 10, 4).macs_per_sample, r.macs_per_sample);
        let d2 = ArchitectureDescriptor::new(4, 64);
        assert_eq!(
            StageMacs::new(&d2).hidden_subtotal(),
            4 * StageMacs::new(&d).hidden_subtotal()
        );
    }

    #[test]
    fn render_path_parse() {
        assert_eq!("painter".parse::<RenderPath>().unwrap(), RenderPath::Painter);
        assert!("fast".parse::<RenderPath>().is_err());
    }
}
