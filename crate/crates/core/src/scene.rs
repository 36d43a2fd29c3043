//! Synthetic scenes made of constant-density primitives.
//!
//! These stand in for captured data: they can be rendered exactly, so they
//! serve both as dataset generators and as oracles for the quadrature.

use serde::{Deserialize, Serialize};

use crate::error::{DerfError, Result};
use crate::field::{RadianceField, RadianceSample};
use crate::geometry::{Ray, Vec3};
use crate::voronoi::Aabb;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Box { min: Vec3, max: Vec3 },
}

impl Shape {
    /// Parameter interval where the (infinite) line `o + t d` is inside the shape.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, f64)> {
        match *self {
            Shape::Sphere { center, radius } => {
                let oc = ray.origin - center;
                let b = oc.dot(&ray.direction);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc <= 0.0 {
                    return None;
                }
                let root = disc.sqrt();
                Some((-b - root, -b + root))
            }
            Shape::Box { min, max } => {
                let mut lo = f64::NEG_INFINITY;
                let mut hi = f64::INFINITY;
                for k in 0..3 {
                    let o = ray.origin[k];
                    let d = ray.direction[k];
                    if d == 0.0 {
                        if o < min[k] || o > max[k] {
                            return None;
                        }
                        continue;
                    }
                    let (a, b) = ((min[k] - o) / d, (max[k] - o) / d);
                    lo = lo.max(a.min(b));
                    hi = hi.min(a.max(b));
                }
                (hi > lo).then_some((lo, hi))
            }
        }
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        match *self {
            Shape::Sphere { center, radius } => (x - center).norm_squared() < radius * radius,
            Shape::Box { min, max } => (0..3).all(|k| x[k] > min[k] && x[k] < max[k]),
        }
    }
}

/// View-dependent tint applied to a primitive's base color.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tint {
    pub axis: Vec3,
    pub strength: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub sigma: f64,
    pub color: Vec3,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tint: Option<Tint>,
}

impl Primitive {
    /// Emitted color toward direction `d` (constant along a ray).
    pub fn emission(&self, d: &Vec3) -> Vec3 {
        match self.tint {
            None => self.color,
            Some(Tint { axis, strength }) => {
                let facing = d.dot(&axis).clamp(0.0, 1.0);
                self.color * (0.5 + 0.5 * facing * strength + 0.5 * (1.0 - strength))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub primitives: Vec<Primitive>,
    pub background: Vec3,
    pub bounds: Aabb,
    pub near: f64,
    pub far: f64,
}

impl SceneDescription {
    pub fn validate(&self) -> Result<()> {
        if !(self.far > self.near && self.near >= 0.0) {
            return Err(DerfError::invalid("scene must satisfy 0 <= near < far"));
        }
        if self.bounds.is_degenerate() {
            return Err(DerfError::invalid("scene bounds are degenerate"));
        }
        let in_unit = |c: &Vec3| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !in_unit(&self.background) {
            return Err(DerfError::invalid("background color outside [0, 1]"));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if !(p.sigma >= 0.0 && p.sigma.is_finite()) {
                return Err(DerfError::invalid(format!("primitive {i}: sigma must be >= 0")));
            }
            if !in_unit(&p.color) {
                return Err(DerfError::invalid(format!("primitive {i}: color outside [0, 1]")));
            }
            if let Some(t) = p.tint {
                if !(0.0..=1.0).contains(&t.strength) || (t.axis.norm() - 1.0).abs() > 1e-6 {
                    return Err(DerfError::invalid(format!(
                        "primitive {i}: tint needs a unit axis and strength in [0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Three blobs of different size, density and color placed off-center.
    pub fn three_blob() -> Self {
        let tint = |x: f64, y: f64, z: f64| {
            Some(Tint {
                axis: Vec3::new(x, y, z).normalize(),
                strength: 0.5,
            })
        };
        SceneDescription {
            primitives: vec![
                Primitive {
                    shape: Shape::Sphere {
                        center: Vec3::new(-0.45, -0.2, 0.1),
                        radius: 0.42,
                    },
                    sigma: 8.0,
                    color: Vec3::new(0.9, 0.25, 0.2),
                    tint: tint(1.0, 0.3, 0.0),
                },
                Primitive {
                    shape: Shape::Sphere {
                        center: Vec3::new(0.5, 0.3, -0.25),
                        radius: 0.3,
                    },
                    sigma: 14.0,
                    color: Vec3::new(0.2, 0.75, 0.3),
                    tint: None,
                },
                Primitive {
                    shape: Shape::Box {
                        min: Vec3::new(0.05, -0.65, 0.25),
                        max: Vec3::new(0.55, -0.25, 0.65),
                    },
                    sigma: 5.0,
                    color: Vec3::new(0.25, 0.35, 0.95),
                    tint: tint(0.0, 0.2, 1.0),
                },
            ],
            background: Vec3::new(1.0, 1.0, 1.0),
            bounds: Aabb::new(Vec3::from_element(-1.0), Vec3::from_element(1.0)),
            near: 0.0,
            far: 10.0,
        }
    }

    /// Two identical blobs mirrored across the `x = 0` plane.
    pub fn two_blob() -> Self {
        let blob = |x: f64| Primitive {
            shape: Shape::Sphere {
                center: Vec3::new(x, 0.0, 0.0),
                radius: 0.35,
            },
            sigma: 10.0,
            color: Vec3::new(0.8, 0.5, 0.2),
            tint: None,
        };
        SceneDescription {
            primitives: vec![blob(-0.5), blob(0.5)],
            background: Vec3::new(1.0, 1.0, 1.0),
            bounds: Aabb::new(Vec3::from_element(-1.0), Vec3::from_element(1.0)),
            near: 0.0,
            far: 10.0,
        }
    }
}

impl RadianceField for SceneDescription {
    fn eval_batch(&self, points: &[Vec3], dirs: &[Vec3]) -> Vec<RadianceSample> {
        points
            .iter()
            .zip(dirs)
            .map(|(x, d)| {
                let mut sigma = 0.0;
                let mut weighted = Vec3::zeros();
                for p in self.primitives.iter().filter(|p| p.shape.contains(x)) {
                    sigma += p.sigma;
                    weighted += p.emission(d) * p.sigma;
                }
                let color = if sigma > 0.0 { weighted / sigma } else { Vec3::zeros() };
                RadianceSample { sigma, color }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_and_box_intersections() {
        let ray = Ray::new(Vec3::new(-5.0, 0.0, 0.0), Vec3::x(), 0.0, 10.0).unwrap();
        let s = Shape::Sphere {
            center: Vec3::zeros(),
            radius: 1.0,
        };
        let (a, b) = s.intersect(&ray).unwrap();
        assert!((a - 4.0).abs() < 1e-12 && (b - 6.0).abs() < 1e-12);
        let bx = Shape::Box {
            min: Vec3::new(-1.0, -1.0, -1.0),
            max: Vec3::new(2.0, 1.0, 1.0),
        };
        let (a, b) = bx.intersect(&ray).unwrap();
        assert!((a - 4.0).abs() < 1e-12 && (b - 7.0).abs() < 1e-12);
        let miss = Ray::new(Vec3::new(-5.0, 3.0, 0.0), Vec3::x(), 0.0, 10.0).unwrap();
        assert!(s.intersect(&miss).is_none());
        assert!(bx.intersect(&miss).is_none());
    }

    #[test]
    fn tint_formula() {
        let p = Primitive {
            shape: Shape::Sphere {
                center: Vec3::zeros(),
                radius: 1.0,
            },
            sigma: 1.0,
            color: Vec3::new(0.8, 0.4, 0.2),
            tint: Some(Tint {
                axis: Vec3::x(),
                strength: 1.0,
            }),
        };
        assert_eq!(p.emission(&Vec3::x()), p.color);
        assert_eq!(p.emission(&-Vec3::x()), p.color * 0.5);
        let half = Primitive {
            tint: Some(Tint {
                axis: Vec3::x(),
                strength: 0.0,
            }),
            ..p
        };
        assert_eq!(half.emission(&-Vec3::x()), p.color);
    }

    #[test]
    fn presets_validate_and_round_trip() {
        for scene in [SceneDescription::three_blob(), SceneDescription::two_blob()] {
            scene.validate().unwrap();
            let json = serde_json::to_string(&scene).unwrap();
            let back: SceneDescription = serde_json::from_str(&json).unwrap();
            assert_eq!(back, scene);
        }
    }

    #[test]
    fn overlapping_primitives_mix_by_density() {
        let mut scene = SceneDescription::two_blob();
        scene.primitives[0].shape = Shape::Sphere {
            center: Vec3::zeros(),
            radius: 1.0,
        };
        scene.primitives[0].sigma = 1.0;
        scene.primitives[0].color = Vec3::new(1.0, 0.0, 0.0);
        scene.primitives[1].shape = Shape::Sphere {
            center: Vec3::zeros(),
            radius: 0.5,
        };
        scene.primitives[1].sigma = 3.0;
        scene.primitives[1].color = Vec3::new(0.0, 1.0, 0.0);
        let s = scene.eval_batch(&[Vec3::zeros()], &[Vec3::z()])[0];
        assert_eq!(s.sigma, 4.0);
        assert!((s.color - Vec3::new(0.25, 0.75, 0.0)).norm() < 1e-15);
    }
}
