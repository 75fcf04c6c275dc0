//! Rotary position embedding.
//!
//! Adjacent pairs `(x_{2i}, x_{2i+1})` are rotated by `position · θ^(−2i/d)`.
//! The pre-rotation cache mode stores keys unrotated and applies this after
//! dequantization; positions are signed so the rotation can be undone.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Conventional default frequency base.
pub const DEFAULT_THETA_BASE: f64 = 10000.0;

pub fn apply_rope(x: &DVector<f64>, position: i64, theta_base: f64) -> Result<DVector<f64>> {
    let d = x.len();
    if d % 2 != 0 {
        return Err(Error::OddDimension(d));
    }
    let mut out = DVector::zeros(d);
    let p = position as f64;
    for pair in 0..d / 2 {
        let freq = theta_base.powf(-2.0 * pair as f64 / d as f64);
        let angle = p * freq;
        let (sin, cos) = angle.sin_cos();
        let a = x[2 * pair];
        let b = x[2 * pair + 1];
        out[2 * pair] = a * cos - b * sin;
        out[2 * pair + 1] = a * sin + b * cos;
    }
    Ok(out)
}
