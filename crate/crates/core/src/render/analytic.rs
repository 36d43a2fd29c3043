//! Exact rendering of scenes made of constant-density primitives.

use crate::geometry::{Ray, Vec3};
use crate::scene::SceneDescription;

/// Closed-form color along `ray`: primitive boundaries split the ray into
/// homogeneous intervals, each of which attenuates by `exp(-sigma * length)`.
pub fn analytic_render_ray(scene: &SceneDescription, ray: &Ray, background: &Vec3) -> Vec3 {
    let spans: Vec<Option<(f64, f64)>> = scene
        .primitives
        .iter()
        .map(|p| {
            p.shape
                .intersect(ray)
                .map(|(a, b)| (a.max(ray.t_near), b.min(ray.t_far)))
                .filter(|(a, b)| b > a)
        })
        .collect();

    let mut cuts = vec![ray.t_near, ray.t_far];
    for &(a, b) in spans.iter().flatten() {
        cuts.push(a);
        cuts.push(b);
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let emissions: Vec<Vec3> = scene.primitives.iter().map(|p| p.emission(&ray.direction)).collect();
    let mut transmittance = 1.0;
    let mut color = Vec3::zeros();
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let mut sigma = 0.0;
        let mut weighted = Vec3::zeros();
        for (k, span) in spans.iter().enumerate() {
            if let Some((a, b)) = span {
                if *a <= lo && *b >= hi {
                    sigma += scene.primitives[k].sigma;
                    weighted += emissions[k] * scene.primitives[k].sigma;
                }
            }
        }
        if sigma > 0.0 {
            let absorbed = -(-sigma * (hi - lo)).exp_m1();
            color += weighted / sigma * (transmittance * absorbed);
            transmittance *= 1.0 - absorbed;
        }
    }
    color + background * transmittance
}
