#![allow(dead_code)]

use derf::field::{encode_batch, head_backward, head_forward, init_head, ArchitectureDescriptor, HeadParams, Parameters};
use derf::geometry::Vec3;
use derf::voronoi::{soft_weights, soft_weights_grad, VoronoiDecomposition};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_vec(rng: &mut ChaCha8Rng, r: f64) -> Vec3 {
    Vec3::from_fn(|_, _| rng.gen_range(-r..r))
}

struct Probe {
    x: Array2<f64>,
    d: Array2<f64>,
    a: Array1<f64>,
    b: Array2<f64>,
}

impl Probe {
    fn loss(&self, p: &HeadParams<f64>) -> f64 {
        let (out, _) = head_forward(p, self.x.view(), self.d.view()).unwrap();
        (&out.sigma * &self.a).sum() + (&out.color * &self.b).sum()
    }

    fn loss_at_input(&self, p: &HeadParams<f64>, x: &Array2<f64>) -> f64 {
        let (out, _) = head_forward(p, x.view(), self.d.view()).unwrap();
        (&out.sigma * &self.a).sum() + (&out.color * &self.b).sum()
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error of the head gradient over every parameter and input.
pub fn head_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.gen_range(2..6);
    let width = 2 * rng.gen_range(2..7);
    let mut desc = ArchitectureDescriptor::new(depth, width);
    desc.pos_bands = rng.gen_range(0..4);
    desc.dir_bands = rng.gen_range(0..3);
    if rng.gen_bool(0.3) {
        desc.skip_layer = depth;
    }
    let mut p: HeadParams<f64> = init_head(desc, &mut rng).unwrap();
    for (_, t) in p.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    let n = rng.gen_range(1..5);
    let xs: Vec<Vec3> = (0..n).map(|_| rand_vec(&mut rng, 1.0)).collect();
    let ds: Vec<Vec3> = (0..n).map(|_| rand_vec(&mut rng, 1.0).normalize()).collect();
    let probe = Probe {
        x: encode_batch(&xs, desc.pos_bands),
        d: encode_batch(&ds, desc.dir_bands),
        a: Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0)),
        b: Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0)),
    };
    let (_, cache) = head_forward(&p, probe.x.view(), probe.d.view()).unwrap();
    let g = head_backward(&p, &cache, probe.a.view(), probe.b.view()).unwrap();

    let h = 1e-6;
    let analytic: Vec<f64> = g.params.tensors().into_iter().flat_map(|(_, t)| t.to_vec()).collect();
    let mut worst: f64 = 0.0;
    let mut k = 0;
    let n_tensors = p.tensors().len();
    for ti in 0..n_tensors {
        let len = p.tensors()[ti].1.len();
        for i in 0..len {
            let orig = p.tensors()[ti].1[i];
            p.tensors_mut()[ti].1[i] = orig + h;
            let up = probe.loss(&p);
            p.tensors_mut()[ti].1[i] = orig - h;
            let down = probe.loss(&p);
            p.tensors_mut()[ti].1[i] = orig;
            worst = worst.max(rel_err(analytic[k], (up - down) / (2.0 * h)));
            k += 1;
        }
    }
    for idx in 0..probe.x.len() {
        let (r, c) = (idx / probe.x.ncols(), idx % probe.x.ncols());
        let mut x = probe.x.clone();
        x[(r, c)] += h;
        let up = probe.loss_at_input(&p, &x);
        x[(r, c)] -= 2.0 * h;
        let down = probe.loss_at_input(&p, &x);
        worst = worst.max(rel_err(g.x_enc[(r, c)], (up - down) / (2.0 * h)));
    }
    worst
}

pub fn soft_weight_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let n = rng.gen_range(2..9);
    let sites: Vec<Vec3> = (0..n).map(|_| rand_vec(&mut rng, 1.0)).collect();
    let beta = 10f64.powf(rng.gen_range(-0.5..1.5));
    let dec = VoronoiDecomposition::new(sites.clone(), beta).unwrap();
    let x = rand_vec(&mut rng, 1.2);
    let jac = soft_weights_grad(&x, &dec);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for j in 0..n {
        for axis in 0..3 {
            let mut plus = sites.clone();
            plus[j][axis] += h;
            let mut minus = sites.clone();
            minus[j][axis] -= h;
            let wp = soft_weights(&x, &VoronoiDecomposition::new(plus, beta).unwrap());
            let wm = soft_weights(&x, &VoronoiDecomposition::new(minus, beta).unwrap());
            for w in 0..n {
                let fd = (wp.0[w] - wm.0[w]) / (2.0 * h);
                worst = worst.max(rel_err(jac.get(w, j)[axis], fd));
            }
        }
    }
    worst
}
