use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::encoding::encode_batch;
use super::mlp::{head_forward, HeadParams};
use super::{ArchitectureDescriptor, Real};
use crate::error::{DerfError, Result};
use crate::geometry::{NormalizationTransform, Vec3};
use crate::voronoi::{hard_assign, soft_weights, HeadWeights, VoronoiDecomposition};

/// Rows per forward call when evaluating large batches.
const EVAL_CHUNK: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadianceSample {
    pub sigma: f64,
    pub color: Vec3,
}

impl RadianceSample {
    pub const VACUUM: RadianceSample = RadianceSample {
        sigma: 0.0,
        color: Vec3::new(0.0, 0.0, 0.0),
    };
}

/// A density/color field that can be queried in batches.
pub trait RadianceField: Sync {
    fn eval_batch(&self, points: &[Vec3], dirs: &[Vec3]) -> Vec<RadianceSample>;
}

/// A single head used as a field on its own.
pub struct HeadField<'a, T> {
    pub params: &'a HeadParams<T>,
}

impl<'a, T: Real> HeadField<'a, T> {
    pub fn new(params: &'a HeadParams<T>) -> Self {
        HeadField { params }
    }
}

impl<T: Real> RadianceField for HeadField<'_, T> {
    fn eval_batch(&self, points: &[Vec3], dirs: &[Vec3]) -> Vec<RadianceSample> {
        let desc = self.params.descriptor;
        let mut out = Vec::with_capacity(points.len());
        for (xs, ds) in points.chunks(EVAL_CHUNK).zip(dirs.chunks(EVAL_CHUNK)) {
            let x_enc: Array2<T> = encode_batch(xs, desc.pos_bands);
            let d_enc: Array2<T> = encode_batch(ds, desc.dir_bands);
            let (res, _) = head_forward(self.params, x_enc.view(), d_enc.view()).expect("encodings match the descriptor");
            out.extend(res.sigma.iter().zip(res.color.rows()).map(|(s, c)| RadianceSample {
                sigma: s.as_f64(),
                color: Vec3::new(c[0].as_f64(), c[1].as_f64(), c[2].as_f64()),
            }));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Blend every head with the soft Voronoi weights.
    Soft,
    /// Evaluate only the head owning the sample's cell.
    #[default]
    Hard,
}

/// Voronoi decomposition plus one head per cell, all in normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct DerfModel {
    pub decomposition: VoronoiDecomposition,
    pub heads: Vec<HeadParams<f32>>,
    /// Scene-wide network used while the decomposition is being learned.
    pub coarse: HeadParams<f32>,
    pub descriptor: ArchitectureDescriptor,
    pub normalization: NormalizationTransform,
}

impl DerfModel {
    pub fn new(
        decomposition: VoronoiDecomposition,
        heads: Vec<HeadParams<f32>>,
        coarse: HeadParams<f32>,
        descriptor: ArchitectureDescriptor,
        normalization: NormalizationTransform,
    ) -> Result<Self> {
        let model = DerfModel {
            decomposition,
            heads,
            coarse,
            descriptor,
            normalization,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.descriptor.validate()?;
        if self.heads.len() != self.decomposition.n_heads() {
            return Err(DerfError::invalid(format!(
                "{} heads for {} Voronoi sites",
                self.heads.len(),
                self.decomposition.n_heads()
            )));
        }
        for head in self.heads.iter().chain(std::iter::once(&self.coarse)) {
            if head.descriptor != self.descriptor {
                return Err(DerfError::invalid("head descriptor differs from the model descriptor"));
            }
            head.check_shapes()?;
        }
        Ok(())
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn field(&self, mode: EvalMode) -> DerfField<'_> {
        DerfField { model: self, mode }
    }

    pub fn coarse_field(&self) -> HeadField<'_, f32> {
        HeadField::new(&self.coarse)
    }
}

/// The decomposed field `sigma = sum_n w_n sigma_n`, `c = sum_n w_n c_n`.
pub struct DerfField<'a> {
    pub model: &'a DerfModel,
    pub mode: EvalMode,
}

impl RadianceField for DerfField<'_> {
    fn eval_batch(&self, points: &[Vec3], dirs: &[Vec3]) -> Vec<RadianceSample> {
        let model = self.model;
        let decomposition = &model.decomposition;
        match self.mode {
            EvalMode::Hard => {
                let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); model.n_heads()];
                for (i, x) in points.iter().enumerate() {
                    buckets[hard_assign(x, decomposition)].push(i);
                }
                let mut out = vec![RadianceSample::VACUUM; points.len()];
                for (head, idx) in model.heads.iter().zip(&buckets) {
                    if idx.is_empty() {
                        continue;
                    }
                    let xs: Vec<Vec3> = idx.iter().map(|&i| points[i]).collect();
                    let ds: Vec<Vec3> = idx.iter().map(|&i| dirs[i]).collect();
                    for (&i, s) in idx.iter().zip(HeadField::new(head).eval_batch(&xs, &ds)) {
                        out[i] = s;
                    }
                }
                out
            }
            EvalMode::Soft => {
                let per_head: Vec<Vec<RadianceSample>> = model
                    .heads
                    .iter()
                    .map(|h| HeadField::new(h).eval_batch(points, dirs))
                    .collect();
                points
                    .iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let w = soft_weights(x, decomposition);
                        mix(per_head.iter().map(|h| h[i]), &w)
                    })
                    .collect()
            }
        }
    }
}

fn mix(samples: impl Iterator<Item = RadianceSample>, weights: &HeadWeights) -> RadianceSample {
    let mut acc = RadianceSample::VACUUM;
    for (s, &w) in samples.zip(weights.as_slice()) {
        acc.sigma += w * s.sigma;
        acc.color += s.color * w;
    }
    acc
}

/// Single-point evaluation of the decomposed field at normalized position `x`.
pub fn derf_eval(m: &DerfModel, x: &Vec3, d: &Vec3, mode: EvalMode) -> RadianceSample {
    m.field(mode).eval_batch(&[*x], &[*d])[0]
}

/// Blends the heads with caller-supplied weights instead of the Voronoi ones.
pub fn derf_eval_with_weights(m: &DerfModel, x: &Vec3, d: &Vec3, weights: &HeadWeights) -> RadianceSample {
    mix(
        m.heads.iter().map(|h| HeadField::new(h).eval_batch(&[*x], &[*d])[0]),
        weights,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::init_head;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(sites: Vec<Vec3>, beta: f64, seed: u64) -> DerfModel {
        let desc = ArchitectureDescriptor::new(3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = (0..sites.len()).map(|_| init_head(desc, &mut rng).unwrap()).collect();
        let coarse = init_head(desc, &mut rng).unwrap();
        DerfModel::new(
            VoronoiDecomposition::new(sites, beta).unwrap(),
            heads,
            coarse,
            desc,
            NormalizationTransform::default(),
        )
        .unwrap()
    }

    #[test]
    fn single_head_modes_agree() {
        let m = model(vec![Vec3::new(0.1, 0.0, 0.0)], 3.0, 1);
        let x = Vec3::new(0.3, -0.2, 0.5);
        let d = Vec3::new(0.0, 0.6, 0.8);
        let direct = HeadField::new(&m.heads[0]).eval_batch(&[x], &[d])[0];
        assert_eq!(derf_eval(&m, &x, &d, EvalMode::Hard), direct);
        let soft = derf_eval(&m, &x, &d, EvalMode::Soft);
        assert!((soft.sigma - direct.sigma).abs() < 1e-15);
        assert!((soft.color - direct.color).norm() < 1e-15);
    }

    #[test]
    fn equal_weights_average_heads() {
        let m = model(vec![Vec3::zeros(), Vec3::new(2.0, 0.0, 0.0)], 1.0, 2);
        let x = Vec3::new(1.0, 0.0, 0.0);
        let d = Vec3::z();
        let a = HeadField::new(&m.heads[0]).eval_batch(&[x], &[d])[0];
        let b = HeadField::new(&m.heads[1]).eval_batch(&[x], &[d])[0];
        let s = derf_eval(&m, &x, &d, EvalMode::Soft);
        assert!((s.sigma - 0.5 * (a.sigma + b.sigma)).abs() < 1e-12);
        assert!((s.color - (a.color + b.color) * 0.5).norm() < 1e-12);
    }

    #[test]
    fn manual_weights_are_linear() {
        let m = model(vec![Vec3::zeros(), Vec3::x(), Vec3::y()], 1.0, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x = Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let d = Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0)).normalize();
            let w1 = HeadWeights(vec![0.2, 0.5, 0.3]);
            let w2 = HeadWeights(vec![0.7, 0.0, 0.3]);
            let lam: f64 = rng.gen();
            let wm = HeadWeights(w1.0.iter().zip(&w2.0).map(|(a, b)| lam * a + (1.0 - lam) * b).collect());
            let e1 = derf_eval_with_weights(&m, &x, &d, &w1);
            let e2 = derf_eval_with_weights(&m, &x, &d, &w2);
            let em = derf_eval_with_weights(&m, &x, &d, &wm);
            assert!((em.sigma - (lam * e1.sigma + (1.0 - lam) * e2.sigma)).abs() < 1e-12);
            assert!((em.color - (e1.color * lam + e2.color * (1.0 - lam))).norm() < 1e-12);
        }
    }

    #[test]
    fn head_count_must_match_sites() {
        let mut m = model(vec![Vec3::zeros(), Vec3::x()], 1.0, 4);
        m.heads.pop();
        assert!(m.validate().is_err());
    }
}
