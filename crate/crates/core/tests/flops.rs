use derf::bench::{flop_report, StageMacs};
use derf::field::{encode_batch, head_forward, init_head, ArchitectureDescriptor, HeadParams, Linear};
use derf::geometry::Vec3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Scalar reference forward pass that counts every multiplication of an input
/// by a weight.
struct Counter(u64);

impl Counter {
    fn affine(&mut self, layer: &Linear<f64>, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), layer.fan_in());
        (0..layer.fan_out())
            .map(|o| {
                let mut acc = layer.bias[o];
                for (i, xi) in x.iter().enumerate() {
                    acc += xi * layer.weight[(i, o)];
                    self.0 += 1;
                }
                acc
            })
            .collect()
    }
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|z| z.max(0.0)).collect()
}

fn counted_forward(p: &HeadParams<f64>, x: &[f64], d: &[f64]) -> (f64, [f64; 3], u64) {
    let mut c = Counter(0);
    let mut h = x.to_vec();
    for (k, layer) in p.trunk.iter().enumerate() {
        let input = if k == p.descriptor.skip_layer {
            [h.as_slice(), x].concat()
        } else {
            h
        };
        h = relu(c.affine(layer, &input));
    }
    let z = c.affine(&p.density, &h)[0];
    let sigma = z.max(0.0) + (-z.abs()).exp().ln_1p();
    let feature = c.affine(&p.feature, &h);
    let hidden = relu(c.affine(&p.direction, &[feature.as_slice(), d].concat()));
    let rgb = c.affine(&p.color, &hidden);
    let s = |v: f64| 1.0 / (1.0 + (-v).exp());
    (sigma, [s(rgb[0]), s(rgb[1]), s(rgb[2])], c.0)
}

#[test]
fn closed_form_matches_instrumented_count() {
    for (depth, width) in [(4, 32), (4, 64), (8, 16), (2, 8), (5, 12)] {
        let desc = ArchitectureDescriptor::new(depth, width);
        let p: HeadParams<f64> = init_head(desc, &mut ChaCha8Rng::seed_from_u64(depth as u64)).unwrap();
        let x_pt = Vec3::new(0.2, -0.4, 0.7);
        let d_pt = Vec3::new(0.0, 0.6, -0.8);
        let x = encode_batch::<f64>(&[x_pt], desc.pos_bands);
        let d = encode_batch::<f64>(&[d_pt], desc.dir_bands);
        let (sigma, rgb, count) = counted_forward(&p, x.row(0).as_slice().unwrap(), d.row(0).as_slice().unwrap());

        let (out, _) = head_forward(&p, x.view(), d.view()).unwrap();
        assert!((out.sigma[0] - sigma).abs() < 1e-12);
        for k in 0..3 {
            assert!((out.color[(0, k)] - rgb[k]).abs() < 1e-12);
        }
        assert_eq!(flop_report(&desc, 1, 1, 1).macs_per_sample, count, "D={depth} W={width}");
    }
}

#[test]
fn stage_subtotals_add_up() {
    let desc = ArchitectureDescriptor::new(4, 32);
    let s = StageMacs::new(&desc);
    let r = flop_report(&desc, 4, 100, 64);
    assert_eq!(r.macs_per_sample, s.total());
    assert_eq!(r.frame_flops, 2 * s.total() * 6400);
    assert_eq!(s.total(), 9152);
}

#[test]
fn mlp_flops_independent_of_head_count() {
    let desc = ArchitectureDescriptor::new(4, 32);
    let base = flop_report(&desc, 1, 4096, 64);
    for n in [4, 8, 16] {
        let r = flop_report(&desc, n, 4096, 64);
        assert_eq!(r.macs_per_sample, base.macs_per_sample);
        assert_eq!(r.frame_flops, base.frame_flops);
    }
}

#[test]
fn width_scaling() {
    for w in [32, 64, 128] {
        let a = StageMacs::new(&ArchitectureDescriptor::new(4, w));
        let b = StageMacs::new(&ArchitectureDescriptor::new(4, 2 * w));
        assert_eq!(b.hidden_subtotal(), 4 * a.hidden_subtotal());
        assert!(b.total() as f64 >= 2.5 * a.total() as f64, "W={w}");
    }
}
