mod common;

use common::{head_gradient_error, rand_vec, rel_err, soft_weight_gradient_error};
use derf::geometry::Vec3;
use derf::render::{quadrature_backward, quadrature_compose};
use derf::voronoi::{soft_weights, soft_weights_grad, soft_weights_vjp, VoronoiDecomposition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn head_backward_matches_finite_differences() {
    for seed in 0..24 {
        let e = head_gradient_error(seed);
        assert!(e <= 1e-3, "seed {seed}: relative error {e:.3e}");
    }
}

#[test]
fn soft_weights_grad_matches_finite_differences() {
    for seed in 0..24 {
        let e = soft_weight_gradient_error(seed);
        assert!(e <= 1e-4, "seed {seed}: relative error {e:.3e}");
    }
}

#[test]
fn vector_jacobian_product_matches_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..50 {
        let n = rng.gen_range(1..7);
        let dec = VoronoiDecomposition::new((0..n).map(|_| rand_vec(&mut rng, 1.0)).collect(), rng.gen_range(0.5..30.0)).unwrap();
        let x = rand_vec(&mut rng, 1.0);
        let up: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let jac = soft_weights_grad(&x, &dec);
        let (w, g) = soft_weights_vjp(&x, &dec, &up);
        assert_eq!(w, soft_weights(&x, &dec));
        for j in 0..n {
            let dense: Vec3 = (0..n).map(|k| jac.get(k, j) * up[k]).sum();
            assert!((dense - g[j]).norm() <= 1e-12 * (1.0 + dense.norm()));
        }
    }
}

#[test]
fn quadrature_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bg = Vec3::new(0.3, 0.9, 0.1);
    for _ in 0..20 {
        let n = rng.gen_range(1..12);
        let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
        let colors: Vec<Vec3> = (0..n).map(|_| Vec3::from_fn(|_, _| rng.gen())).collect();
        let deltas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.5)).collect();
        let up = rand_vec(&mut rng, 1.0);
        let f = |s: &[f64], c: &[Vec3]| quadrature_compose(s, c, &deltas).unwrap().over(&bg).dot(&up);
        let trace = quadrature_compose(&sigma, &colors, &deltas).unwrap();
        let (ds, dc) = quadrature_backward(&trace, &colors, &bg, &up);
        let h = 1e-6;
        for i in 0..n {
            let mut sp = sigma.clone();
            sp[i] += h;
            let mut sm = sigma.clone();
            sm[i] -= h;
            let fd = (f(&sp, &colors) - f(&sm, &colors)) / (2.0 * h);
            assert!(rel_err(ds[i], fd) < 1e-5);
            for k in 0..3 {
                let mut cp = colors.clone();
                cp[i][k] += h;
                let mut cm = colors.clone();
                cm[i][k] -= h;
                let fd = (f(&sigma, &cp) - f(&sigma, &cm)) / (2.0 * h);
                assert!(rel_err(dc[i][k], fd) < 1e-5);
            }
        }
    }
}
