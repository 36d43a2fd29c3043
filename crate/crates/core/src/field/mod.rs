//! Radiance heads and the decomposed field built from them.

use std::fmt::{Debug, Display};
use std::ops::AddAssign;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{DerfError, Result};

pub mod adam;
pub mod encoding;
pub mod mlp;
pub mod model;

pub use adam::{adam_step, AdamState, Parameters, SiteParams};
pub use encoding::{encode_batch, encoded_len, positional_encode};
pub use mlp::{head_backward, head_forward, init_head, HeadBackward, HeadCache, HeadOutput, HeadParams, Linear};
pub use model::{derf_eval, derf_eval_with_weights, DerfField, DerfModel, EvalMode, HeadField, RadianceField, RadianceSample};

/// Floating point type the heads can be instantiated with: `f32` for training
/// and rendering, `f64` for gradient checks.
pub trait Real:
    LinalgScalar + ScalarOperand + Float + AddAssign + Send + Sync + Debug + Display + Default
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Shape of one radiance head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    /// Number of trunk layers.
    pub depth: usize,
    /// Trunk width.
    pub width: usize,
    /// Trunk layer (0-based) whose input is the previous activation concatenated
    /// with the encoded position. `skip_layer == depth` disables the skip.
    pub skip_layer: usize,
    pub pos_bands: usize,
    pub dir_bands: usize,
}

impl Default for ArchitectureDescriptor {
    fn default() -> Self {
        ArchitectureDescriptor::new(4, 32)
    }
}

impl ArchitectureDescriptor {
    pub fn new(depth: usize, width: usize) -> Self {
        ArchitectureDescriptor {
            depth,
            width,
            skip_layer: depth.div_ceil(2) + 1,
            pos_bands: 10,
            dir_bands: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(DerfError::invalid(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.width < 4 {
            return Err(DerfError::invalid(format!("width must be >= 4, got {}", self.width)));
        }
        if !(self.skip_layer > 1 && self.skip_layer <= self.depth) {
            return Err(DerfError::invalid(format!(
                "skip layer must satisfy 1 < skip <= depth, got {} for depth {}",
                self.skip_layer, self.depth
            )));
        }
        Ok(())
    }

    pub fn pos_dim(&self) -> usize {
        encoded_len(self.pos_bands)
    }

    pub fn dir_dim(&self) -> usize {
        encoded_len(self.dir_bands)
    }

    pub fn has_skip(&self) -> bool {
        self.skip_layer < self.depth
    }

    pub fn color_hidden(&self) -> usize {
        self.width / 2
    }

    /// Input width of trunk layer `k`.
    pub fn trunk_in(&self, k: usize) -> usize {
        match k {
            0 => self.pos_dim(),
            k if k == self.skip_layer => self.width + self.pos_dim(),
            _ => self.width,
        }
    }
}
