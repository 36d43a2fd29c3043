//! Discrete emission-absorption quadrature and its reverse pass.

use crate::error::{DerfError, Result};
use crate::geometry::Vec3;

/// Per-sample opacities and transmittances plus the accumulated color.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureTrace {
    pub deltas: Vec<f64>,
    /// `alpha_i = 1 - exp(-sigma_i delta_i)`.
    pub alphas: Vec<f64>,
    /// Transmittance reaching sample `i`: `prod_{j<i} (1 - alpha_j)`.
    pub transmittance: Vec<f64>,
    /// Premultiplied accumulated color.
    pub color: Vec3,
    /// `1 - prod_i (1 - alpha_i)`.
    pub opacity: f64,
}

impl QuadratureTrace {
    /// `T_i * alpha_i`, the share of sample `i` in the final color.
    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.transmittance.iter().zip(&self.alphas).map(|(t, a)| t * a)
    }

    /// Transmittance left after the last sample.
    pub fn residual(&self) -> f64 {
        1.0 - self.opacity
    }

    pub fn over(&self, background: &Vec3) -> Vec3 {
        self.color + background * self.residual()
    }
}

pub fn quadrature_compose(sigmas: &[f64], colors: &[Vec3], deltas: &[f64]) -> Result<QuadratureTrace> {
    if sigmas.len() != colors.len() || sigmas.len() != deltas.len() {
        return Err(DerfError::Shape(format!(
            "quadrature inputs differ in length: {} sigmas, {} colors, {} deltas",
            sigmas.len(),
            colors.len(),
            deltas.len()
        )));
    }
    if let Some(i) = sigmas.iter().position(|s| !(*s >= 0.0)) {
        return Err(DerfError::invalid(format!("sigma[{i}] = {} is negative", sigmas[i])));
    }
    if let Some(i) = deltas.iter().position(|d| !(*d >= 0.0)) {
        return Err(DerfError::invalid(format!("delta[{i}] = {} is negative", deltas[i])));
    }
    Ok(compose_unchecked(sigmas, colors, deltas))
}

pub(crate) fn compose_unchecked(sigmas: &[f64], colors: &[Vec3], deltas: &[f64]) -> QuadratureTrace {
    let n = sigmas.len();
    let mut alphas = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n);
    let mut t = 1.0;
    let mut color = Vec3::zeros();
    for i in 0..n {
        let alpha = -(-sigmas[i] * deltas[i]).exp_m1();
        transmittance.push(t);
        alphas.push(alpha);
        color += colors[i] * (t * alpha);
        t *= 1.0 - alpha;
    }
    QuadratureTrace {
        deltas: deltas.to_vec(),
        alphas,
        transmittance,
        color,
        opacity: 1.0 - t,
    }
}

/// Gradients of `<upstream, C + (1 - A) background>` with respect to every
/// sample's density and color.
pub fn quadrature_backward(trace: &QuadratureTrace, colors: &[Vec3], background: &Vec3, upstream: &Vec3) -> (Vec<f64>, Vec<Vec3>) {
    let n = trace.alphas.len();
    let mut d_sigma = vec![0.0; n];
    let mut d_color = vec![Vec3::zeros(); n];
    // Radiance arriving from behind sample i, as seen from the eye.
    let mut behind = background * trace.residual();
    for i in (0..n).rev() {
        let w = trace.transmittance[i] * trace.alphas[i];
        let t_next = trace.transmittance[i] * (1.0 - trace.alphas[i]);
        d_color[i] = upstream * w;
        d_sigma[i] = trace.deltas[i] * upstream.dot(&(colors[i] * t_next - behind));
        behind += colors[i] * w;
    }
    (d_sigma, d_color)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vacuum_and_empty() {
        let t = quadrature_compose(&[0.0; 4], &[Vec3::new(1.0, 1.0, 1.0); 4], &[0.25; 4]).unwrap();
        assert_eq!(t.color, Vec3::zeros());
        assert_eq!(t.opacity, 0.0);
        let e = quadrature_compose(&[], &[], &[]).unwrap();
        assert_eq!(e.color, Vec3::zeros());
        assert_eq!(e.opacity, 0.0);
    }

    #[test]
    fn constant_slab_is_discretization_independent() {
        let expected = 1.0 - (-1.0f64).exp();
        for n in [1usize, 2, 7, 64, 1000] {
            let deltas = vec![1.0 / n as f64; n];
            let t = quadrature_compose(&vec![1.0; n], &vec![Vec3::x(); n], &deltas).unwrap();
            assert!((t.color.x - expected).abs() < 1e-12, "n = {n}");
            assert!((t.opacity - expected).abs() < 1e-12);
        }
        // Uneven widths too.
        let deltas = [0.1, 0.5, 0.05, 0.35];
        let t = quadrature_compose(&[1.0; 4], &[Vec3::x(); 4], &deltas).unwrap();
        assert!((t.color.x - expected).abs() < 1e-12);
        assert!((expected - 0.6321).abs() < 1e-4);
    }

    #[test]
    fn saturation() {
        let c = Vec3::new(0.2, 0.4, 0.9);
        let t = quadrature_compose(&[1e6], &[c], &[1.0]).unwrap();
        assert!((t.color - c).norm() < 1e-12);
        assert!((t.opacity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn negative_inputs_rejected() {
        assert!(quadrature_compose(&[-1.0], &[Vec3::zeros()], &[1.0]).is_err());
        assert!(quadrature_compose(&[1.0], &[Vec3::zeros()], &[-1.0]).is_err());
        assert!(quadrature_compose(&[1.0, 2.0], &[Vec3::zeros()], &[1.0]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let n = rng.gen_range(1..12);
            let sigmas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..4.0)).collect();
            let colors: Vec<Vec3> = (0..n).map(|_| Vec3::from_fn(|_, _| rng.gen())).collect();
            let deltas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.5)).collect();
            let bg = Vec3::from_fn(|_, _| rng.gen());
            let up = Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let f = |s: &[f64], c: &[Vec3]| up.dot(&compose_unchecked(s, c, &deltas).over(&bg));
            let trace = compose_unchecked(&sigmas, &colors, &deltas);
            let (ds, dc) = quadrature_backward(&trace, &colors, &bg, &up);
            let h = 1e-6;
            for i in 0..n {
                let mut p = sigmas.clone();
                let mut m = sigmas.clone();
                p[i] += h;
                m[i] -= h;
                let fd = (f(&p, &colors) - f(&m, &colors)) / (2.0 * h);
                assert!((fd - ds[i]).abs() < 1e-7, "sigma {i}: {fd} vs {}", ds[i]);
                for k in 0..3 {
                    let mut p = colors.clone();
                    let mut m = colors.clone();
                    p[i][k] += h;
                    m[i][k] -= h;
                    let fd = (f(&sigmas, &p) - f(&sigmas, &m)) / (2.0 * h);
                    assert!((fd - dc[i][k]).abs() < 1e-7);
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn energy_and_monotone_transmittance(
                sig in proptest::collection::vec(0.0f64..50.0, 0..40),
                seed in any::<u64>(),
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = sig.len();
                let colors: Vec<Vec3> = (0..n).map(|_| Vec3::from_fn(|_, _| rng.gen())).collect();
                let deltas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..0.3)).collect();
                let t = quadrature_compose(&sig, &colors, &deltas).unwrap();
                prop_assert!((0.0..=1.0).contains(&t.opacity));
                prop_assert!(t.alphas.iter().all(|a| (0.0..=1.0).contains(a)));
                prop_assert!(t.transmittance.windows(2).all(|w| w[1] <= w[0]));
                prop_assert!(t.color.iter().all(|&c| c <= t.opacity + 1e-12));
            }
        }
    }
}
