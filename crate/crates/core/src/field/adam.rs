//! Bias-corrected Adam over named parameter tensors.

use serde::{Deserialize, Serialize};

use super::Real;
use crate::error::{DerfError, Result};
use crate::geometry::Vec3;

/// Anything that exposes its trainable values as named flat tensors. The
/// order of tensors must be stable: optimizer state is matched by position.
pub trait Parameters<T> {
    fn tensors(&self) -> Vec<(String, &[T])>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut [T])>;

    fn shapes(&self) -> Vec<usize> {
        self.tensors().iter().map(|(_, t)| t.len()).collect()
    }
}

impl<T, P: Parameters<T>> Parameters<T> for Vec<P> {
    fn tensors(&self) -> Vec<(String, &[T])> {
        self.iter()
            .enumerate()
            .flat_map(|(i, p)| p.tensors().into_iter().map(move |(n, t)| (format!("{i}.{n}"), t)))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        self.iter_mut()
            .enumerate()
            .flat_map(|(i, p)| p.tensors_mut().into_iter().map(move |(n, t)| (format!("{i}.{n}"), t)))
            .collect()
    }
}

/// Voronoi sites viewed as trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteParams(pub Vec<Vec3>);

impl Parameters<f64> for SiteParams {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        self.0
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("sites.{i}"), s.as_slice()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.0
            .iter_mut()
            .enumerate()
            .map(|(i, s)| (format!("sites.{i}"), s.as_mut_slice()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    #[serde(skip)]
    pub m: Vec<Vec<T>>,
    #[serde(skip)]
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new<P: Parameters<T> + ?Sized>(params: &P, lr: f64) -> Self {
        let shapes = params.shapes();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }
}

/// One Adam update of `params` using `grads` (same shapes). Nothing is
/// modified when a gradient is non-finite.
pub fn adam_step<T: Real, P: Parameters<T> + ?Sized>(params: &mut P, grads: &P, state: &mut AdamState<T>) -> Result<()> {
    let grad_tensors = grads.tensors();
    let shapes = params.shapes();
    let grad_shapes: Vec<usize> = grad_tensors.iter().map(|(_, g)| g.len()).collect();
    let state_shapes: Vec<usize> = state.m.iter().map(Vec::len).collect();
    if shapes != grad_shapes || shapes != state_shapes {
        return Err(DerfError::Shape(
            "parameters, gradients and optimizer state disagree in shape".to_string(),
        ));
    }
    for (name, g) in &grad_tensors {
        if !g.iter().all(|v| v.is_finite()) {
            return Err(DerfError::NonFiniteGradient { path: name.clone() });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let b1 = T::of_f64(state.beta1);
    let b2 = T::of_f64(state.beta2);
    let one = T::one();
    let bc1 = T::of_f64(1.0 - state.beta1.powi(t));
    let bc2 = T::of_f64(1.0 - state.beta2.powi(t));
    let lr = T::of_f64(state.lr);
    let eps = T::of_f64(state.eps);

    for (k, ((_, p), (_, g))) in params.tensors_mut().into_iter().zip(&grad_tensors).enumerate() {
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
