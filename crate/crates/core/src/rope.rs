//! Rotary position embeddings over two-dimensional integer positions.
//!
//! The head vector is split into two halves: the first half is rotated by
//! the first (row) coordinate, the second half by the second (column)
//! coordinate, each with the standard 1D rotary construction on adjacent
//! pairs. Attention logits between rotated queries and keys then depend on
//! positions only through their difference, which is what lets a
//! coordinator trained at one object size run at larger ones.

use crate::error::{QuiltError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RopeConfig {
    /// Per-head embedding width. Must be divisible by 4: two spatial axes,
    /// each rotated in 2-dimensional pairs.
    pub head_dim: usize,
    /// Frequency base; angle for pair `i` within a half of width `h` is
    /// `pos * theta_base^(-2i/h)`.
    pub theta_base: f64,
}

impl RopeConfig {
    pub fn new(head_dim: usize, theta_base: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(4) {
            return Err(QuiltError::InvalidConfig(format!(
                "rope head_dim must be a positive multiple of 4, got {head_dim}"
            )));
        }
        if !(theta_base > 0.0) || !theta_base.is_finite() {
            return Err(QuiltError::InvalidConfig(format!(
                "rope theta_base must be positive and finite, got {theta_base}"
            )));
        }
        Ok(Self {
            head_dim,
            theta_base,
        })
    }

    /// Half width, i.e. the slice rotated by one spatial axis.
    pub fn axis_split(&self) -> usize {
        self.head_dim / 2
    }
}

/// Rotate one half in place: adjacent pairs `(2i, 2i+1)` by angle
/// `pos * theta_base^(-2i/h)`. `invert` applies the opposite rotation.
fn rotate_half(half: &mut [f64], pos: i64, theta_base: f64, invert: bool) {
    let h = half.len();
    let sign = if invert { -1.0 } else { 1.0 };
    for i in 0..h / 2 {
        let freq = theta_base.powf(-2.0 * i as f64 / h as f64);
        let angle = sign * pos as f64 * freq;
        let (sin, cos) = angle.sin_cos();
        let a = half[2 * i];
        let b = half[2 * i + 1];
        half[2 * i] = a * cos - b * sin;
        half[2 * i + 1] = a * sin + b * cos;
    }
}

/// In-place kernel shared by [`rope_rotate`] and the autodiff op.
pub(crate) fn rope_apply(vec: &mut [f64], pos: (i64, i64), cfg: &RopeConfig, invert: bool) {
    debug_assert_eq!(vec.len(), cfg.head_dim);
    let split = cfg.axis_split();
    rotate_half(&mut vec[..split], pos.0, cfg.theta_base, invert);
    rotate_half(&mut vec[split..], pos.1, cfg.theta_base, invert);
}

/// Rotary transform of a single head vector at integer position `(n, m)`.
pub fn rope_rotate(vec: &Tensor, pos: (i64, i64), cfg: &RopeConfig) -> Result<Tensor> {
    if vec.len() != cfg.head_dim {
        return Err(QuiltError::ShapeMismatch {
            expected: vec![cfg.head_dim],
            actual: vec.shape().to_vec(),
        });
    }
    let mut out = vec.clone();
    rope_apply(out.data_mut(), pos, cfg, false);
    Ok(out)
}
