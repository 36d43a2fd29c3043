//! Reconstruction and uniformity losses and the two-phase optimization loop.
//!
//! Phase 1 fits a scene-wide coarse network to the images while the Voronoi
//! sites are moved, through their own optimizer, to balance the per-head ray
//! contributions under an annealed temperature. Phase 2 freezes the sites,
//! seeds every head from the coarse network and trains the heads jointly with
//! samples routed by hard cell assignment.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::Dataset;
use crate::error::{DerfError, Result};
use crate::field::{
    adam_step, encode_batch, head_backward, head_forward, init_head, AdamState, ArchitectureDescriptor, DerfModel,
    HeadCache, HeadParams, SiteParams,
};
use crate::geometry::{build_normalization, stratified_samples, Camera, Ray, RaySamples, Vec3};
use crate::imagebuf::FloatImage;
use crate::render::quadrature::compose_unchecked;
use crate::render::{quadrature_backward, QuadratureTrace};
use crate::voronoi::{beta_at, init_sites, soft_weights_vjp, Aabb, BetaSchedule, SiteInit, VoronoiDecomposition};

pub const METRICS_HEADER: &str = "iter,phase,beta,l_radiance,l_uniform";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SiteLayout {
    #[default]
    Random,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_rays: usize,
    pub n_samples: usize,
    pub iters_pretrain: u64,
    pub iters_main: u64,
    pub lr: f64,
    /// Learning rate of the site optimizer.
    pub site_lr: f64,
    pub beta0: f64,
    pub beta_final: f64,
    pub seed: u64,
    pub n_heads: usize,
    pub descriptor: ArchitectureDescriptor,
    pub sites: SiteLayout,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_rays: 512,
            n_samples: 128,
            iters_pretrain: 2000,
            iters_main: 8000,
            lr: 5e-4,
            site_lr: 2e-2,
            beta0: 1.0,
            beta_final: 1e10,
            seed: 0,
            n_heads: 8,
            descriptor: ArchitectureDescriptor::default(),
            sites: SiteLayout::Random,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_rays == 0 || self.n_samples == 0 || self.n_heads == 0 {
            return Err(DerfError::invalid("batch size, sample count and head count must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.site_lr > 0.0 && self.site_lr.is_finite()) {
            return Err(DerfError::invalid("learning rates must be positive"));
        }
        self.beta_schedule().validate()?;
        self.descriptor.validate()?;
        if self.sites == SiteLayout::Grid {
            grid_counts(self.n_heads)?;
        }
        Ok(())
    }

    pub fn beta_schedule(&self) -> BetaSchedule {
        BetaSchedule {
            beta0: self.beta0,
            beta_final: self.beta_final,
            n_pretrain: self.iters_pretrain,
        }
    }

    pub fn total_iters(&self) -> u64 {
        self.iters_pretrain + self.iters_main
    }
}

impl BetaSchedule {
    fn validate(&self) -> Result<()> {
        beta_at(0, self).map(|_| ())
    }
}

/// Most cube-like `a * b * c = n` with `a <= b <= c`.
pub fn grid_counts(n: usize) -> Result<[usize; 3]> {
    if n == 0 {
        return Err(DerfError::invalid("grid needs at least one cell"));
    }
    let mut best = [1, 1, n];
    for a in 1..=n {
        if n % a != 0 {
            continue;
        }
        for b in a..=n / a {
            if (n / a) % b != 0 {
                continue;
            }
            let c = n / a / b;
            if c >= b && c - a < best[2] - best[0] {
                best = [a, b, c];
            }
        }
    }
    Ok(best)
}

/// Mean over rays of the squared color error.
pub fn radiance_loss(pred: &[Vec3], target: &[Vec3]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(DerfError::invalid(format!(
            "radiance loss needs equal non-empty batches, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).norm_squared()).sum::<f64>() / pred.len() as f64)
}

fn mean_contribution(contribs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = contribs
        .first()
        .ok_or_else(|| DerfError::invalid("uniform loss needs at least one ray"))?;
    let n = first.len();
    let mut mean = vec![0.0; n];
    for c in contribs {
        if c.len() != n {
            return Err(DerfError::invalid("contribution vectors differ in length"));
        }
        for (m, v) in mean.iter_mut().zip(c) {
            *m += v;
        }
    }
    let inv = 1.0 / contribs.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(mean)
}

/// Squared norm of the batch-mean contribution vector.
pub fn uniform_loss(contribs: &[Vec<f64>]) -> Result<f64> {
    Ok(mean_contribution(contribs)?.iter().map(|m| m * m).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Main,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Main => "main",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub iter: u64,
    pub phase: Phase,
    pub beta: f64,
    pub l_radiance: f64,
    pub l_uniform: Option<f64>,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let uniform = self.l_uniform.map(|u| u.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.iter,
            self.phase.name(),
            self.beta,
            self.l_radiance,
            uniform
        )
    }
}

/// Training rays drawn from the training split.
pub struct TrainData<'a> {
    views: Vec<(&'a Camera, &'a FloatImage)>,
    pub background: Vec3,
}

impl<'a> TrainData<'a> {
    pub fn from_dataset(dataset: &'a Dataset) -> Result<Self> {
        let views: Vec<_> = dataset.train_frames().into_iter().map(|f| (&f.camera, &f.image)).collect();
        Self::new(views, dataset.background)
    }

    pub fn new(views: Vec<(&'a Camera, &'a FloatImage)>, background: Vec3) -> Result<Self> {
        if views.is_empty() {
            return Err(DerfError::invalid("no training views"));
        }
        for (cam, img) in &views {
            cam.validate()?;
            if cam.width != img.width || cam.height != img.height || img.pixels.len() != cam.pixel_count() {
                return Err(DerfError::invalid("training image does not match its camera"));
            }
        }
        Ok(TrainData { views, background })
    }

    fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<(Ray, Vec3)> {
        (0..n)
            .map(|_| {
                let (cam, img) = self.views[rng.gen_range(0..self.views.len())];
                let col = rng.gen_range(0..cam.width);
                let row = rng.gen_range(0..cam.height);
                (cam.pixel_ray(col, row), img.get(col, row))
            })
            .collect()
    }
}

struct RayBatch {
    rays: Vec<Ray>,
    samples: Vec<RaySamples>,
    targets: Vec<Vec3>,
    points: Vec<Vec3>,
    dirs: Vec<Vec3>,
}

impl RayBatch {
    fn ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        let mut start = 0;
        self.samples.iter().map(move |s| {
            let r = start..start + s.len();
            start = r.end;
            r
        })
    }
}

/// Quadrature of every ray and the radiance loss, plus per-sample gradients of
/// that loss with respect to density and color.
struct RadianceGrad {
    traces: Vec<QuadratureTrace>,
    loss: f64,
    d_sigma: Array1<f32>,
    d_color: Array2<f32>,
}

/// Enables flush-to-zero and denormals-are-zero on the current thread until
/// dropped. Gradients behind opaque regions otherwise underflow into the slow
/// subnormal range inside the matrix products.
struct DenormalGuard {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

#[cfg(target_arch = "x86_64")]
impl DenormalGuard {
    const FTZ_DAZ: u32 = 0x8040;

    fn new() -> Self {
        use std::arch::asm;
        let mut saved: u32 = 0;
        // SAFETY: stmxcsr/ldmxcsr only touch the SSE control register of this thread.
        unsafe {
            asm!("stmxcsr [{}]", in(reg) &mut saved, options(nostack));
            let flushed = saved | Self::FTZ_DAZ;
            asm!("ldmxcsr [{}]", in(reg) &flushed, options(nostack, readonly));
        }
        DenormalGuard { saved }
    }
}

#[cfg(target_arch = "x86_64")]
impl Drop for DenormalGuard {
    fn drop(&mut self) {
        use std::arch::asm;
        // SAFETY: restores the value read in `new`.
        unsafe { asm!("ldmxcsr [{}]", in(reg) &self.saved, options(nostack, readonly)) };
    }
}

#[cfg(not(target_arch = "x86_64"))]
impl DenormalGuard {
    fn new() -> Self {
        DenormalGuard {}
    }
}

/// Narrows to `f32`, mapping values that would be subnormal to zero.
fn flush_to_f32(v: f64) -> f32 {
    if v.abs() < f32::MIN_POSITIVE as f64 {
        0.0
    } else {
        v as f32
    }
}

fn radiance_grad(batch: &RayBatch, sigma: &[f64], color: &[Vec3], background: &Vec3) -> RadianceGrad {
    let n_rays = batch.rays.len();
    let mut traces = Vec::with_capacity(n_rays);
    let mut preds = Vec::with_capacity(n_rays);
    for (range, s) in batch.ranges().zip(&batch.samples) {
        let trace = compose_unchecked(&sigma[range.clone()], &color[range], &s.delta);
        preds.push(trace.over(background));
        traces.push(trace);
    }
    let loss = radiance_loss(&preds, &batch.targets).expect("batch is non-empty");
    let n_points = batch.points.len();
    let mut d_sigma = Array1::zeros(n_points);
    let mut d_color = Array2::zeros((n_points, 3));
    let scale = 2.0 / n_rays as f64;
    for (k, range) in batch.ranges().enumerate() {
        let upstream = (preds[k] - batch.targets[k]) * scale;
        let (ds, dc) = quadrature_backward(&traces[k], &color[range.clone()], background, &upstream);
        for (j, i) in range.enumerate() {
            d_sigma[i] = flush_to_f32(ds[j]);
            for c in 0..3 {
                d_color[(i, c)] = flush_to_f32(dc[j][c]);
            }
        }
    }
    RadianceGrad {
        traces,
        loss,
        d_sigma,
        d_color,
    }
}

fn forward_rows(
    head: &HeadParams<f32>,
    points: &[Vec3],
    dirs: &[Vec3],
) -> Result<(Vec<f64>, Vec<Vec3>, HeadCache<f32>)> {
    let desc = head.descriptor;
    let x = encode_batch::<f32>(points, desc.pos_bands);
    let d = encode_batch::<f32>(dirs, desc.dir_bands);
    let (out, cache) = head_forward(head, x.view(), d.view())?;
    let sigma = out.sigma.iter().map(|&s| s as f64).collect();
    let color = out
        .color
        .rows()
        .into_iter()
        .map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64))
        .collect();
    Ok((sigma, color, cache))
}

/// Optimizer and model state of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: DerfModel,
    pub phase: Phase,
    /// Completed iterations.
    pub iter: u64,
    pub coarse_adam: AdamState<f32>,
    pub site_adam: AdamState<f64>,
    pub head_adam: AdamState<f32>,
}

impl TrainState {
    /// Fits the normalization to `content` (world space), places the sites and
    /// initializes the networks.
    pub fn new(config: TrainConfig, content: &Aabb) -> Result<Self> {
        config.validate()?;
        let normalization = build_normalization(&content.corners())?;
        let unit = Aabb::new(normalization.apply(&content.min), normalization.apply(&content.max));
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mode = match config.sites {
            SiteLayout::Random => SiteInit::Random { count: config.n_heads },
            SiteLayout::Grid => SiteInit::Grid {
                counts: grid_counts(config.n_heads)?,
            },
        };
        let sites = init_sites(mode, &unit, &mut rng)?;
        let beta = beta_at(0, &config.beta_schedule())?;
        let decomposition = VoronoiDecomposition::new(sites, beta)?;
        let coarse: HeadParams<f32> = init_head(config.descriptor, &mut rng)?;
        let heads = vec![coarse.clone(); config.n_heads];
        let model = DerfModel::new(decomposition, heads, coarse, config.descriptor, normalization)?;
        let coarse_adam = AdamState::new(&model.coarse, config.lr);
        let site_adam = AdamState::new(&SiteParams(model.decomposition.sites().to_vec()), config.site_lr);
        let head_adam = AdamState::new(&model.heads, config.lr);
        let mut state = TrainState {
            config,
            model,
            phase: Phase::Pretrain,
            iter: 0,
            coarse_adam,
            site_adam,
            head_adam,
        };
        if state.config.iters_pretrain == 0 {
            state.begin_main_phase()?;
        }
        Ok(state)
    }

    /// State for `dataset`, with the content region derived from its cameras.
    pub fn for_dataset(config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        if dataset.train_frames().is_empty() {
            return Err(DerfError::invalid("dataset has no training frames"));
        }
        Self::new(config, &dataset.content_bounds()?)
    }

    /// Freezes the sites at the final temperature and seeds every head with
    /// the coarse network.
    pub fn begin_main_phase(&mut self) -> Result<()> {
        self.model.decomposition.set_beta(self.config.beta_final)?;
        self.model.heads = vec![self.model.coarse.clone(); self.config.n_heads];
        self.head_adam = AdamState::new(&self.model.heads, self.config.lr);
        self.phase = Phase::Main;
        Ok(())
    }

    pub fn is_done(&self) -> bool {
        self.iter >= self.config.total_iters()
    }

    fn batch(&self, data: &TrainData) -> Result<RayBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.iter + 1);
        let drawn = data.sample(self.config.batch_rays, &mut rng);
        let mut batch = RayBatch {
            rays: Vec::with_capacity(drawn.len()),
            samples: Vec::with_capacity(drawn.len()),
            targets: Vec::with_capacity(drawn.len()),
            points: Vec::new(),
            dirs: Vec::new(),
        };
        for (ray, target) in drawn {
            let ray = self.model.normalization.apply_ray(&ray);
            let s = stratified_samples(&ray, self.config.n_samples, &mut rng)?;
            batch.points.extend(s.t.iter().map(|&t| ray.at(t)));
            batch.dirs.extend(std::iter::repeat(ray.direction).take(s.len()));
            batch.rays.push(ray);
            batch.samples.push(s);
            batch.targets.push(target);
        }
        Ok(batch)
    }

    /// Runs one iteration of whichever phase is current.
    pub fn step(&mut self, data: &TrainData) -> Result<StepMetrics> {
        if self.is_done() {
            return Err(DerfError::invalid("training already finished"));
        }
        let metrics = match self.phase {
            Phase::Pretrain => self.phase1_step(data)?,
            Phase::Main => self.phase2_step(data)?,
        };
        self.iter += 1;
        if self.phase == Phase::Pretrain && self.iter >= self.config.iters_pretrain {
            self.begin_main_phase()?;
        }
        Ok(metrics)
    }

    /// Coarse network on the radiance loss, sites on the uniformity loss.
    pub fn phase1_step(&mut self, data: &TrainData) -> Result<StepMetrics> {
        if self.phase != Phase::Pretrain || self.iter >= self.config.iters_pretrain {
            return Err(DerfError::invalid("phase 1 step outside the pre-training phase"));
        }
        let _flush = DenormalGuard::new();
        let beta = beta_at(self.iter, &self.config.beta_schedule())?;
        self.model.decomposition.set_beta(beta)?;
        let batch = self.batch(data)?;

        let (sigma, color, cache) = forward_rows(&self.model.coarse, &batch.points, &batch.dirs)?;
        let grad = radiance_grad(&batch, &sigma, &color, &data.background);

        // Contributions use the coarse density as a constant.
        let n_heads = self.model.n_heads();
        let n_rays = batch.rays.len() as f64;
        let decomposition = &self.model.decomposition;
        let mut contribs = Vec::with_capacity(batch.rays.len());
        for (range, trace) in batch.ranges().zip(&grad.traces) {
            let mut w = vec![0.0; n_heads];
            for (x, tw) in batch.points[range].iter().zip(trace.weights()) {
                if tw > 0.0 {
                    for (acc, wn) in w.iter_mut().zip(decomposition.soft_weights(x).as_slice()) {
                        *acc += tw * wn;
                    }
                }
            }
            contribs.push(w);
        }
        let mean = mean_contribution(&contribs)?;
        let l_uniform: f64 = mean.iter().map(|m| m * m).sum();
        if !grad.loss.is_finite() || !l_uniform.is_finite() {
            return Err(DerfError::NonFiniteLoss {
                iter: self.iter,
                phase: Phase::Pretrain.name(),
            });
        }

        let d_mean: Vec<f64> = mean.iter().map(|m| 2.0 * m / n_rays).collect();
        let mut site_grad = SiteParams(vec![Vec3::zeros(); n_heads]);
        let mut upstream = vec![0.0; n_heads];
        for (range, trace) in batch.ranges().zip(&grad.traces) {
            for (x, tw) in batch.points[range].iter().zip(trace.weights()) {
                if tw <= 0.0 {
                    continue;
                }
                for (u, d) in upstream.iter_mut().zip(&d_mean) {
                    *u = tw * d;
                }
                let (_, g) = soft_weights_vjp(x, decomposition, &upstream);
                for (acc, gj) in site_grad.0.iter_mut().zip(g) {
                    *acc += gj;
                }
            }
        }

        let back = head_backward(&self.model.coarse, &cache, grad.d_sigma.view(), grad.d_color.view())?;
        adam_step(&mut self.model.coarse, &back.params, &mut self.coarse_adam)?;

        let mut sites = SiteParams(self.model.decomposition.sites().to_vec());
        adam_step(&mut sites, &site_grad, &mut self.site_adam)?;
        self.model.decomposition.set_sites(sites.0)?;

        Ok(StepMetrics {
            iter: self.iter,
            phase: Phase::Pretrain,
            beta,
            l_radiance: grad.loss,
            l_uniform: Some(l_uniform),
        })
    }

    /// All heads on the radiance loss with hard routing; sites untouched.
    pub fn phase2_step(&mut self, data: &TrainData) -> Result<StepMetrics> {
        if self.phase != Phase::Main {
            return Err(DerfError::invalid("phase 2 step before pre-training finished"));
        }
        let _flush = DenormalGuard::new();
        let batch = self.batch(data)?;
        let n_heads = self.model.n_heads();
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_heads];
        for (i, x) in batch.points.iter().enumerate() {
            groups[self.model.decomposition.hard_assign(x)].push(i);
        }

        let n_points = batch.points.len();
        let mut sigma = vec![0.0; n_points];
        let mut color = vec![Vec3::zeros(); n_points];
        let mut caches: Vec<Option<HeadCache<f32>>> = Vec::with_capacity(n_heads);
        for (head, idx) in self.model.heads.iter().zip(&groups) {
            if idx.is_empty() {
                caches.push(None);
                continue;
            }
            let xs: Vec<Vec3> = idx.iter().map(|&i| batch.points[i]).collect();
            let ds: Vec<Vec3> = idx.iter().map(|&i| batch.dirs[i]).collect();
            let (s, c, cache) = forward_rows(head, &xs, &ds)?;
            for (k, &i) in idx.iter().enumerate() {
                sigma[i] = s[k];
                color[i] = c[k];
            }
            caches.push(Some(cache));
        }

        let grad = radiance_grad(&batch, &sigma, &color, &data.background);
        if !grad.loss.is_finite() {
            return Err(DerfError::NonFiniteLoss {
                iter: self.iter,
                phase: Phase::Main.name(),
            });
        }

        let mut grads = Vec::with_capacity(n_heads);
        for ((head, idx), cache) in self.model.heads.iter().zip(&groups).zip(&caches) {
            match cache {
                None => grads.push(head.zeros_like()),
                Some(cache) => {
                    let ds = Array1::from_iter(idx.iter().map(|&i| grad.d_sigma[i]));
                    let mut dc = Array2::zeros((idx.len(), 3));
                    for (k, &i) in idx.iter().enumerate() {
                        dc.row_mut(k).assign(&grad.d_color.row(i));
                    }
                    grads.push(head_backward(head, cache, ds.view(), dc.view())?.params);
                }
            }
        }
        adam_step(&mut self.model.heads, &grads, &mut self.head_adam)?;

        Ok(StepMetrics {
            iter: self.iter,
            phase: Phase::Main,
            beta: self.model.decomposition.beta(),
            l_radiance: grad.loss,
            l_uniform: None,
        })
    }
}

/// Runs both phases to completion. With `out_dir`, writes `metrics.csv`,
/// periodic checkpoints and `final.ckpt` there.
pub fn train_run(config: TrainConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainState> {
    let data = TrainData::from_dataset(dataset)?;
    let mut state = TrainState::for_dataset(config, dataset)?;
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut f = std::io::BufWriter::new(fs::File::create(dir.join("metrics.csv"))?);
            writeln!(f, "{METRICS_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    while !state.is_done() {
        let metrics = state.step(&data)?;
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", metrics.csv_row())?;
        }
        let every = state.config.checkpoint_every;
        if let Some(dir) = out_dir {
            if every > 0 && state.iter % every == 0 && !state.is_done() {
                save_checkpoint(&state, &dir.join(format!("iter_{:06}.ckpt", state.iter)))?;
            }
        }
    }
    if let Some(mut f) = log {
        f.flush()?;
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&state, &dir.join("final.ckpt"))?;
    }
    Ok(state)
}
