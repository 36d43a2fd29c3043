//! Batched forward and reverse pass of one radiance head.
//!
//! Layout per head: a ReLU trunk of `depth` layers (one of which re-reads the
//! encoded position), a softplus density projection, a linear feature
//! projection, a ReLU direction layer fed with the features and the encoded
//! view direction, and a sigmoid color projection. Rows are samples.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::{ArchitectureDescriptor, Parameters, Real};
use crate::error::{DerfError, Result};

static NEXT_PARAMS_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_PARAMS_ID.fetch_add(1, Ordering::Relaxed)
}

/// Affine layer `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || T::of_f64(rng.gen_range(-bound..bound)));
        Linear {
            weight,
            bias: Array1::zeros(fan_out),
        }
    }

    fn forward(&self, x: &ArrayView2<T>) -> Array2<T> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    fn cast<U: Real>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.mapv(|v| U::of_f64(v.as_f64())),
            bias: self.bias.mapv(|v| U::of_f64(v.as_f64())),
        }
    }
}

/// Parameters of one head. Also used to hold gradients of the same shape.
#[derive(Debug)]
pub struct HeadParams<T> {
    pub descriptor: ArchitectureDescriptor,
    pub trunk: Vec<Linear<T>>,
    pub density: Linear<T>,
    pub feature: Linear<T>,
    pub direction: Linear<T>,
    pub color: Linear<T>,
    id: u64,
    revision: u64,
}

impl<T: Clone> Clone for HeadParams<T> {
    fn clone(&self) -> Self {
        HeadParams {
            descriptor: self.descriptor,
            trunk: self.trunk.clone(),
            density: self.density.clone(),
            feature: self.feature.clone(),
            direction: self.direction.clone(),
            color: self.color.clone(),
            id: fresh_id(),
            revision: 0,
        }
    }
}

impl<T: PartialEq> PartialEq for HeadParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.descriptor == other.descriptor
            && self.trunk == other.trunk
            && self.density == other.density
            && self.feature == other.feature
            && self.direction == other.direction
            && self.color == other.color
    }
}

impl<T: Real> HeadParams<T> {
    fn build(descriptor: ArchitectureDescriptor, mut layer: impl FnMut(usize, usize) -> Linear<T>) -> Self {
        let w = descriptor.width;
        let trunk = (0..descriptor.depth).map(|k| layer(descriptor.trunk_in(k), w)).collect();
        HeadParams {
            descriptor,
            trunk,
            density: layer(w, 1),
            feature: layer(w, w),
            direction: layer(w + descriptor.dir_dim(), descriptor.color_hidden()),
            color: layer(descriptor.color_hidden(), 3),
            id: fresh_id(),
            revision: 0,
        }
    }

    pub fn zeros(descriptor: ArchitectureDescriptor) -> Self {
        Self::build(descriptor, Linear::zeros)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.descriptor)
    }

    pub fn layers(&self) -> impl Iterator<Item = (String, &Linear<T>)> {
        self.trunk
            .iter()
            .enumerate()
            .map(|(k, l)| (format!("trunk.{k}"), l))
            .chain([
                ("density".to_string(), &self.density),
                ("feature".to_string(), &self.feature),
                ("direction".to_string(), &self.direction),
                ("color".to_string(), &self.color),
            ])
    }

    pub fn layers_mut(&mut self) -> Vec<(String, &mut Linear<T>)> {
        self.revision += 1;
        let mut out: Vec<(String, &mut Linear<T>)> = self
            .trunk
            .iter_mut()
            .enumerate()
            .map(|(k, l)| (format!("trunk.{k}"), l))
            .collect();
        out.push(("density".to_string(), &mut self.density));
        out.push(("feature".to_string(), &mut self.feature));
        out.push(("direction".to_string(), &mut self.direction));
        out.push(("color".to_string(), &mut self.color));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(|(_, l)| l.weight.len() + l.bias.len()).sum()
    }

    /// Accumulates `other` into `self` elementwise.
    pub fn add_assign(&mut self, other: &HeadParams<T>) {
        for ((_, a), (_, b)) in self.layers_mut().into_iter().zip(other.layers()) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .all(|(_, l)| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> HeadParams<U> {
        HeadParams {
            descriptor: self.descriptor,
            trunk: self.trunk.iter().map(Linear::cast).collect(),
            density: self.density.cast(),
            feature: self.feature.cast(),
            direction: self.direction.cast(),
            color: self.color.cast(),
            id: fresh_id(),
            revision: 0,
        }
    }

    /// Checks every tensor against the shapes implied by the descriptor.
    pub fn check_shapes(&self) -> Result<()> {
        let expected = Self::zeros(self.descriptor);
        if self.trunk.len() != expected.trunk.len() {
            return Err(DerfError::Shape(format!(
                "expected {} trunk layers, found {}",
                expected.trunk.len(),
                self.trunk.len()
            )));
        }
        for ((name, a), (_, b)) in self.layers().zip(expected.layers()) {
            if a.weight.dim() != b.weight.dim() || a.bias.len() != b.bias.len() {
                return Err(DerfError::Shape(format!(
                    "{name}: expected {:?}/{}, found {:?}/{}",
                    b.weight.dim(),
                    b.bias.len(),
                    a.weight.dim(),
                    a.bias.len()
                )));
            }
        }
        Ok(())
    }
}

impl<T: Real> Parameters<T> for HeadParams<T> {
    fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (name, l) in self.layers() {
            out.push((format!("{name}.weight"), l.weight.as_slice().expect("standard layout")));
            out.push((format!("{name}.bias"), l.bias.as_slice().expect("standard layout")));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = Vec::new();
        for (name, l) in self.layers_mut() {
            out.push((format!("{name}.weight"), l.weight.as_slice_mut().expect("standard layout")));
            out.push((format!("{name}.bias"), l.bias.as_slice_mut().expect("standard layout")));
        }
        out
    }
}

/// Fan-in scaled uniform weights, zero biases.
pub fn init_head<T: Real, R: Rng + ?Sized>(descriptor: ArchitectureDescriptor, rng: &mut R) -> Result<HeadParams<T>> {
    descriptor.validate()?;
    Ok(HeadParams::build(descriptor, |i, o| Linear::uniform(i, o, rng)))
}

/// Outputs of a batched forward pass.
#[derive(Debug, Clone)]
pub struct HeadOutput<T> {
    /// `(batch,)`, non-negative.
    pub sigma: Array1<T>,
    /// `(batch, 3)`, in `[0, 1]`.
    pub color: Array2<T>,
}

/// Activations kept from the forward pass for the reverse pass.
#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    params_id: u64,
    revision: u64,
    x_enc: Array2<T>,
    trunk_inputs: Vec<Array2<T>>,
    trunk_pre: Vec<Array2<T>>,
    hidden: Array2<T>,
    density_pre: Array1<T>,
    dir_input: Array2<T>,
    dir_pre: Array2<T>,
    dir_hidden: Array2<T>,
    color: Array2<T>,
}

impl<T> HeadCache<T> {
    pub fn batch_len(&self) -> usize {
        self.color.nrows()
    }
}

fn relu<T: Real>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| v.max(T::zero()))
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Forward pass over a batch. `x_enc` is `(batch, pos_dim)`, `d_enc` is
/// `(batch, dir_dim)`.
pub fn head_forward<T: Real>(
    p: &HeadParams<T>,
    x_enc: ArrayView2<T>,
    d_enc: ArrayView2<T>,
) -> Result<(HeadOutput<T>, HeadCache<T>)> {
    let desc = &p.descriptor;
    if x_enc.ncols() != desc.pos_dim() || d_enc.ncols() != desc.dir_dim() || x_enc.nrows() != d_enc.nrows() {
        return Err(DerfError::Shape(format!(
            "head expects ({}, {}) encodings, got {:?} and {:?}",
            desc.pos_dim(),
            desc.dir_dim(),
            x_enc.dim(),
            d_enc.dim()
        )));
    }
    let mut trunk_inputs = Vec::with_capacity(desc.depth);
    let mut trunk_pre = Vec::with_capacity(desc.depth);
    let mut h = x_enc.to_owned();
    for (k, layer) in p.trunk.iter().enumerate() {
        let input = if k == desc.skip_layer {
            concatenate![Axis(1), h, x_enc]
        } else {
            h
        };
        let z = layer.forward(&input.view());
        h = relu(&z);
        trunk_inputs.push(input);
        trunk_pre.push(z);
    }

    let density_pre = p.density.forward(&h.view()).index_axis_move(Axis(1), 0);
    let sigma = density_pre.mapv(softplus);
    let feature = p.feature.forward(&h.view());
    let dir_input = concatenate![Axis(1), feature, d_enc];
    let dir_pre = p.direction.forward(&dir_input.view());
    let dir_hidden = relu(&dir_pre);
    let color = p.color.forward(&dir_hidden.view()).mapv(sigmoid);

    let cache = HeadCache {
        params_id: p.id,
        revision: p.revision,
        x_enc: x_enc.to_owned(),
        trunk_inputs,
        trunk_pre,
        hidden: h,
        density_pre,
        dir_input,
        dir_pre,
        dir_hidden,
        color: color.clone(),
    };
    Ok((HeadOutput { sigma, color }, cache))
}

/// Parameter gradients and the gradient with respect to the encoded position.
#[derive(Debug, Clone)]
pub struct HeadBackward<T> {
    pub params: HeadParams<T>,
    pub x_enc: Array2<T>,
}

fn linear_backward<T: Real>(layer: &Linear<T>, input: &Array2<T>, dz: &Array2<T>, grad: &mut Linear<T>) -> Array2<T> {
    general_mat_mul(T::one(), &input.t(), dz, T::zero(), &mut grad.weight);
    grad.bias = dz.sum_axis(Axis(0));
    dz.dot(&layer.weight.t())
}

fn relu_mask<T: Real>(mut upstream: Array2<T>, pre: &Array2<T>) -> Array2<T> {
    Zip::from(&mut upstream).and(pre).for_each(|g, &z| {
        if z <= T::zero() {
            *g = T::zero();
        }
    });
    upstream
}

/// Reverse pass: given `d_sigma` `(batch,)` and `d_color` `(batch, 3)`, returns
/// gradients for every parameter and for the encoded position input.
pub fn head_backward<T: Real>(
    p: &HeadParams<T>,
    cache: &HeadCache<T>,
    d_sigma: ndarray::ArrayView1<T>,
    d_color: ArrayView2<T>,
) -> Result<HeadBackward<T>> {
    if cache.params_id != p.id || cache.revision != p.revision {
        return Err(DerfError::StaleCache {
            cache: cache.revision,
            params: p.revision,
        });
    }
    let batch = cache.batch_len();
    if d_sigma.len() != batch || d_color.dim() != (batch, 3) {
        return Err(DerfError::Shape(format!(
            "upstream gradients must cover {batch} samples, got {} and {:?}",
            d_sigma.len(),
            d_color.dim()
        )));
    }
    let desc = &p.descriptor;
    let w = desc.width;
    let mut g = p.zeros_like();

    // color = sigmoid(z_c)
    let mut dz_color = d_color.to_owned();
    Zip::from(&mut dz_color)
        .and(&cache.color)
        .for_each(|g, &c| *g = *g * c * (T::one() - c));
    let d_dir_hidden = linear_backward(&p.color, &cache.dir_hidden, &dz_color, &mut g.color);
    let dz_dir = relu_mask(d_dir_hidden, &cache.dir_pre);
    let d_dir_input = linear_backward(&p.direction, &cache.dir_input, &dz_dir, &mut g.direction);
    let d_feature = d_dir_input.slice(s![.., ..w]).to_owned();

    // sigma = softplus(z_d), softplus' = sigmoid
    let dz_density: Array2<T> = Zip::from(&d_sigma)
        .and(&cache.density_pre)
        .map_collect(|&ds, &z| ds * sigmoid(z))
        .insert_axis(Axis(1));
    let mut d_hidden = linear_backward(&p.density, &cache.hidden, &dz_density, &mut g.density);
    d_hidden += &linear_backward(&p.feature, &cache.hidden, &d_feature, &mut g.feature);

    let mut d_x = Array2::<T>::zeros(cache.x_enc.dim());
    for k in (0..desc.depth).rev() {
        let dz = relu_mask(d_hidden, &cache.trunk_pre[k]);
        let d_in = linear_backward(&p.trunk[k], &cache.trunk_inputs[k], &dz, &mut g.trunk[k]);
        if k == 0 {
            d_x += &d_in;
            d_hidden = Array2::zeros((0, 0));
        } else if k == desc.skip_layer {
            d_x += &d_in.slice(s![.., w..]);
            d_hidden = d_in.slice(s![.., ..w]).to_owned();
        } else {
            d_hidden = d_in;
        }
    }
    Ok(HeadBackward { params: g, x_enc: d_x })
}
