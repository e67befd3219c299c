//! Three-axis rotary position encoding.
//!
//! Channels are split into contiguous temporal, height and width groups.
//! Inside a group of width `n`, channel pair `(2j, 2j+1)` is rotated by
//! `pos · base^(-2j/n)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeParams {
    pub d_t: usize,
    pub d_h: usize,
    pub d_w: usize,
    pub base: f64,
}

impl RopeParams {
    /// Default split: half the channels temporal, a quarter each spatial.
    pub fn for_head_dim(d: usize) -> Self {
        let d_t = d / 2;
        let d_h = (d - d_t) / 2;
        Self {
            d_t,
            d_h,
            d_w: d - d_t - d_h,
            base: 10_000.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.d_t + self.d_h + self.d_w
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.dim() != d {
            return Err(Error::Config(format!(
                "rope split {}+{}+{} does not cover {d} channels",
                self.d_t, self.d_h, self.d_w
            )));
        }
        if !self.d_t.is_multiple_of(2) || !self.d_h.is_multiple_of(2) || !self.d_w.is_multiple_of(2) {
            return Err(Error::Config("rope channel groups must be even".into()));
        }
        if !(self.base > 1.0) {
            return Err(Error::Config("rope base must exceed 1".into()));
        }
        Ok(())
    }

    fn span(&self, axis: RopeAxis) -> (usize, usize) {
        match axis {
            RopeAxis::Temporal => (0, self.d_t),
            RopeAxis::Height => (self.d_t, self.d_h),
            RopeAxis::Width => (self.d_t + self.d_h, self.d_w),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenPosition {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RopeAxis {
    Temporal,
    Height,
    Width,
}

pub const SPATIAL: [RopeAxis; 2] = [RopeAxis::Height, RopeAxis::Width];
pub const ALL_AXES: [RopeAxis; 3] = [RopeAxis::Temporal, RopeAxis::Height, RopeAxis::Width];

fn rotate_group<T: Scalar>(row: &mut [T], start: usize, width: usize, pos: usize, base: f64) {
    if pos == 0 {
        return;
    }
    for j in 0..width / 2 {
        let theta = pos as f64 * base.powf(-2.0 * j as f64 / width as f64);
        let (sin, cos) = theta.sin_cos();
        let (sin, cos) = (T::of_f64(sin), T::of_f64(cos));
        let a = row[start + 2 * j];
        let b = row[start + 2 * j + 1];
        row[start + 2 * j] = a * cos - b * sin;
        row[start + 2 * j + 1] = a * sin + b * cos;
    }
}

/// Rotates the selected axes' channel groups of every token by its position.
pub fn apply_rope<T: Scalar>(
    tokens: &Matrix<T>,
    positions: &[TokenPosition],
    params: &RopeParams,
    axes: &[RopeAxis],
) -> Result<Matrix<T>> {
    if positions.len() != tokens.rows() {
        return Err(Error::Shape(format!(
            "{} positions for {} tokens",
            positions.len(),
            tokens.rows()
        )));
    }
    if params.dim() != tokens.cols() {
        return Err(Error::Shape(format!(
            "rope covers {} channels, tokens have {}",
            params.dim(),
            tokens.cols()
        )));
    }
    let mut out = tokens.clone();
    for (r, p) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        for &axis in axes {
            let (start, width) = params.span(axis);
            let pos = match axis {
                RopeAxis::Temporal => p.t,
                RopeAxis::Height => p.h,
                RopeAxis::Width => p.w,
            };
            rotate_group(row, start, width, pos, params.base);
        }
    }
    Ok(out)
}

/// Temporal-only rotation of rows `start..end` in place, all at index `t`.
pub fn rotate_temporal_rows<T: Scalar>(
    m: &mut Matrix<T>,
    start: usize,
    end: usize,
    t: usize,
    params: &RopeParams,
) {
    let (s, w) = params.span(RopeAxis::Temporal);
    for r in start..end {
        rotate_group(m.row_mut(r), s, w, t, params.base);
    }
}
