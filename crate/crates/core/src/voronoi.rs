//! Learnable Voronoi partition of normalized space.
//!
//! The soft weights are a softmax over negative scaled site distances; as the
//! temperature `beta` grows they converge to the indicator of the nearest site.
//! Hard assignment, ray/cell interval clipping and the back-to-front cell
//! ordering used for compositing all live here.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DerfError, Result};
use crate::geometry::{Ray, Vec3};

/// Distance guard for weights and gradients.
pub const DISTANCE_EPS: f64 = 1e-8;

/// Minimum pairwise distance between sites.
pub const MIN_SITE_SEPARATION: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoronoiDecomposition {
    sites: Vec<Vec3>,
    beta: f64,
}

impl VoronoiDecomposition {
    pub fn new(sites: Vec<Vec3>, beta: f64) -> Result<Self> {
        let d = VoronoiDecomposition { sites, beta };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sites.is_empty() {
            return Err(DerfError::invalid("a decomposition needs at least one site"));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(DerfError::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if let Some(i) = self.sites.iter().position(|s| !s.iter().all(|c| c.is_finite())) {
            return Err(DerfError::invalid(format!("site {i} is not finite")));
        }
        for i in 0..self.sites.len() {
            for j in i + 1..self.sites.len() {
                if (self.sites[i] - self.sites[j]).norm() < MIN_SITE_SEPARATION {
                    return Err(DerfError::invalid(format!("sites {i} and {j} coincide")));
                }
            }
        }
        Ok(())
    }

    pub fn sites(&self) -> &[Vec3] {
        &self.sites
    }

    /// Replaces the sites, keeping the decomposition valid.
    pub fn set_sites(&mut self, sites: Vec<Vec3>) -> Result<()> {
        let candidate = VoronoiDecomposition { sites, beta: self.beta };
        candidate.validate()?;
        self.sites = candidate.sites;
        Ok(())
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn set_beta(&mut self, beta: f64) -> Result<()> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(DerfError::invalid(format!("beta must be positive, got {beta}")));
        }
        self.beta = beta;
        Ok(())
    }

    pub fn n_heads(&self) -> usize {
        self.sites.len()
    }

    fn guarded_distances(&self, x: &Vec3) -> Vec<f64> {
        self.sites.iter().map(|s| (x - s).norm().max(DISTANCE_EPS)).collect()
    }

    pub fn soft_weights(&self, x: &Vec3) -> HeadWeights {
        soft_weights(x, self)
    }

    pub fn hard_assign(&self, x: &Vec3) -> usize {
        hard_assign(x, self)
    }
}

/// Per-head blend weights; non-negative and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights(pub Vec<f64>);

impl HeadWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &w) in self.0.iter().enumerate() {
            if w > self.0[best] {
                best = i;
            }
        }
        best
    }
}

fn softmin_weights(distances: &[f64], beta: f64) -> Vec<f64> {
    let dmin = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let mut w: Vec<f64> = distances.iter().map(|d| (-beta * (d - dmin)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// `w_n = exp(-beta |x - site_n|) / sum_j exp(-beta |x - site_j|)`, shifted by
/// the minimum distance so that it stays finite for very large `beta`.
pub fn soft_weights(x: &Vec3, d: &VoronoiDecomposition) -> HeadWeights {
    HeadWeights(softmin_weights(&d.guarded_distances(x), d.beta))
}

/// Jacobian of the soft weights with respect to the sites, stored as
/// `jac[n * N + j] = d w_n / d site_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightJacobian {
    pub n_heads: usize,
    pub jac: Vec<Vec3>,
}

impl WeightJacobian {
    pub fn get(&self, weight: usize, site: usize) -> Vec3 {
        self.jac[weight * self.n_heads + site]
    }
}

/// Full Jacobian `d w / d sites`. Where the guard is active (`x` within
/// [`DISTANCE_EPS`] of a site) that site's distance is treated as the constant
/// `DISTANCE_EPS` and contributes no gradient.
pub fn soft_weights_grad(x: &Vec3, d: &VoronoiDecomposition) -> WeightJacobian {
    let n = d.n_heads();
    let (w, units) = weights_and_units(x, d);
    let mut jac = vec![Vec3::zeros(); n * n];
    for wi in 0..n {
        for j in 0..n {
            let kron = if wi == j { 1.0 } else { 0.0 };
            jac[wi * n + j] = units[j] * (-d.beta * w[wi] * (kron - w[j]));
        }
    }
    WeightJacobian { n_heads: n, jac }
}

/// Vector-Jacobian product: returns `sum_n upstream_n * d w_n / d site_j` for
/// every site `j`, in O(N), together with the weights themselves.
pub fn soft_weights_vjp(x: &Vec3, d: &VoronoiDecomposition, upstream: &[f64]) -> (HeadWeights, Vec<Vec3>) {
    assert_eq!(upstream.len(), d.n_heads(), "upstream length must equal head count");
    let (w, units) = weights_and_units(x, d);
    let dot: f64 = upstream.iter().zip(&w).map(|(u, wi)| u * wi).sum();
    let grads = units
        .iter()
        .enumerate()
        .map(|(j, u)| u * (-d.beta * w[j] * (upstream[j] - dot)))
        .collect();
    (HeadWeights(w), grads)
}

// Weights plus d|x - site_j| / d site_j (zero where the guard clamps).
fn weights_and_units(x: &Vec3, d: &VoronoiDecomposition) -> (Vec<f64>, Vec<Vec3>) {
    let raw: Vec<f64> = d.sites.iter().map(|s| (x - s).norm()).collect();
    let guarded: Vec<f64> = raw.iter().map(|r| r.max(DISTANCE_EPS)).collect();
    let w = softmin_weights(&guarded, d.beta);
    let units = d
        .sites
        .iter()
        .zip(&raw)
        .map(|(s, &r)| if r >= DISTANCE_EPS { (s - x) / r } else { Vec3::zeros() })
        .collect();
    (w, units)
}

/// Index of the nearest site; ties go to the lowest index.
pub fn hard_assign(x: &Vec3, d: &VoronoiDecomposition) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, s) in d.sites.iter().enumerate() {
        let dist = (x - s).norm_squared();
        if dist < best_d {
            best = i;
            best_d = dist;
        }
    }
    best
}

/// Geometric temperature schedule from `beta0` to `beta_final` over the
/// pre-training phase, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub beta0: f64,
    pub beta_final: f64,
    pub n_pretrain: u64,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule {
            beta0: 1.0,
            beta_final: 1e10,
            n_pretrain: 2000,
        }
    }
}

pub fn beta_at(iter: u64, schedule: &BetaSchedule) -> Result<f64> {
    let BetaSchedule {
        beta0,
        beta_final,
        n_pretrain,
    } = *schedule;
    if !(beta0 > 0.0 && beta_final > 0.0 && beta0.is_finite() && beta_final.is_finite()) {
        return Err(DerfError::invalid(format!(
            "beta schedule endpoints must be positive, got {beta0} -> {beta_final}"
        )));
    }
    if n_pretrain == 0 || iter >= n_pretrain {
        return Ok(beta_final);
    }
    let frac = iter as f64 / n_pretrain as f64;
    Ok(beta0 * (beta_final / beta0).powf(frac))
}

/// Portion of a ray lying inside one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySegment {
    pub cell: usize,
    pub t_in: f64,
    pub t_out: f64,
}

impl RaySegment {
    pub fn length(&self) -> f64 {
        self.t_out - self.t_in
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t_in && t < self.t_out
    }
}

/// Clips `[t_near, t_far]` against each cell (the intersection of its N-1
/// bisector halfspaces) and returns the non-empty pieces ordered along the ray.
///
/// Each cell is convex, so it contributes at most one interval. Slivers shorter
/// than `1e-12` of the ray length are dropped and neighbouring endpoints are
/// snapped, so the segments tile the ray exactly.
pub fn ray_cell_intervals(ray: &Ray, d: &VoronoiDecomposition) -> Vec<RaySegment> {
    let sites = d.sites();
    let n = sites.len();
    let min_len = 1e-12 * ray.length();
    let mut segments = Vec::with_capacity(n.min(8));
    for (cell, site) in sites.iter().enumerate() {
        let mut lo = ray.t_near;
        let mut hi = ray.t_far;
        for (j, other) in sites.iter().enumerate() {
            if j == cell {
                continue;
            }
            // (o + t d - m) . e <= 0 with e = other - site and m the midpoint.
            let normal = other - site;
            let midpoint = if cell < j { (site + other) * 0.5 } else { (other + site) * 0.5 };
            let a = (ray.origin - midpoint).dot(&normal);
            let b = ray.direction.dot(&normal);
            if b > 0.0 {
                hi = hi.min(-a / b);
            } else if b < 0.0 {
                lo = lo.max(-a / b);
            } else if a > 0.0 {
                hi = lo;
            }
            if hi - lo <= min_len {
                break;
            }
        }
        if hi - lo > min_len {
            segments.push(RaySegment { cell, t_in: lo, t_out: hi });
        }
    }
    segments.sort_by(|a, b| a.t_in.total_cmp(&b.t_in));
    if let Some(first) = segments.first_mut() {
        first.t_in = ray.t_near;
    }
    for k in 1..segments.len() {
        segments[k].t_in = segments[k - 1].t_out;
    }
    if let Some(last) = segments.last_mut() {
        last.t_out = ray.t_far;
    }
    segments
}

/// Back-to-front cell order for a camera at `eye`: decreasing site distance,
/// ties by index.
pub fn painter_order(d: &VoronoiDecomposition, eye: &Vec3) -> Vec<usize> {
    let dist: Vec<f64> = d.sites().iter().map(|s| (s - eye).norm()).collect();
    let mut order: Vec<usize> = (0..d.n_heads()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    order
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb { min, max }
    }

    pub fn is_degenerate(&self) -> bool {
        (0..3).any(|k| !(self.max[k] > self.min[k]))
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let mut out = [Vec3::zeros(); 8];
        for (i, c) in out.iter_mut().enumerate() {
            *c = Vec3::new(
                if i & 1 == 0 { self.min.x } else { self.max.x },
                if i & 2 == 0 { self.min.y } else { self.max.y },
                if i & 4 == 0 { self.min.z } else { self.max.z },
            );
        }
        out
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteInit {
    /// Uniform draws in the bounds.
    Random { count: usize },
    /// Cell centers of a regular subdivision.
    Grid { counts: [usize; 3] },
}

const MAX_RESAMPLES: usize = 1000;

pub fn init_sites<R: Rng + ?Sized>(mode: SiteInit, bounds: &Aabb, rng: &mut R) -> Result<Vec<Vec3>> {
    if bounds.is_degenerate() {
        return Err(DerfError::invalid("site bounds are degenerate"));
    }
    match mode {
        SiteInit::Grid { counts } => {
            if counts.iter().any(|&c| c == 0) {
                return Err(DerfError::invalid("grid counts must be >= 1"));
            }
            let ext = bounds.max - bounds.min;
            let mut sites = Vec::with_capacity(counts.iter().product());
            for i in 0..counts[0] {
                for j in 0..counts[1] {
                    for k in 0..counts[2] {
                        let frac = Vec3::new(
                            (i as f64 + 0.5) / counts[0] as f64,
                            (j as f64 + 0.5) / counts[1] as f64,
                            (k as f64 + 0.5) / counts[2] as f64,
                        );
                        sites.push(bounds.min + ext.component_mul(&frac));
                    }
                }
            }
            Ok(sites)
        }
        SiteInit::Random { count } => {
            if count == 0 {
                return Err(DerfError::invalid("site count must be >= 1"));
            }
            let mut sites: Vec<Vec3> = Vec::with_capacity(count);
            let mut attempts = 0;
            while sites.len() < count {
                let p = Vec3::new(
                    rng.gen_range(bounds.min.x..bounds.max.x),
                    rng.gen_range(bounds.min.y..bounds.max.y),
                    rng.gen_range(bounds.min.z..bounds.max.z),
                );
                if sites.iter().all(|s| (s - p).norm() >= MIN_SITE_SEPARATION) {
                    sites.push(p);
                } else {
                    attempts += 1;
                    if attempts >= MAX_RESAMPLES {
                        return Err(DerfError::SitePlacement { count, attempts });
                    }
                }
            }
            Ok(sites)
        }
    }
}
