use std::f64::consts::PI;

use ndarray::{Array2, ArrayViewMut1};

use super::Real;
use crate::geometry::Vec3;

pub fn encoded_len(bands: usize) -> usize {
    3 + 6 * bands
}

/// `[v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(L-1) pi v), cos(2^(L-1) pi v)]`
/// with each sin/cos block holding the three components.
pub fn positional_encode(v: &Vec3, bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_len(bands));
    out.extend_from_slice(v.as_slice());
    let mut freq = PI;
    for _ in 0..bands {
        out.extend(v.iter().map(|c| (freq * c).sin()));
        out.extend(v.iter().map(|c| (freq * c).cos()));
        freq *= 2.0;
    }
    out
}

// Higher bands come from the double-angle identities; the rounding error
// roughly doubles per band and stays far below f32 resolution.
fn encode_row<T: Real>(v: &Vec3, bands: usize, mut row: ArrayViewMut1<T>) {
    for k in 0..3 {
        row[k] = T::of_f64(v[k]);
        let (mut s, mut c) = (PI * v[k]).sin_cos();
        for b in 0..bands {
            let base = 3 + 6 * b;
            row[base + k] = T::of_f64(s);
            row[base + 3 + k] = T::of_f64(c);
            (s, c) = (2.0 * s * c, (c - s) * (c + s));
        }
    }
}

/// Encodes a batch of vectors into a `(batch, 3 + 6 * bands)` matrix.
pub fn encode_batch<T: Real>(vs: &[Vec3], bands: usize) -> Array2<T> {
    let mut out = Array2::zeros((vs.len(), encoded_len(bands)));
    for (v, row) in vs.iter().zip(out.rows_mut()) {
        encode_row(v, bands, row);
    }
    out
}
