//! Parzen-window histogram binning with a cubic B-spline kernel.
//!
//! An intensity maps to a continuous bin coordinate `z`; bin `k` receives the
//! kernel mass falling inside `[k - ½, k + ½]`, so every sample contributes
//! exactly one unit spread over neighbouring bins. With kernel width 1 this is
//! the quartic B-spline; as the width shrinks it becomes nearest-bin counting.

use crate::transform::bspline3;
use crate::{Error, Result};

/// Number of bin slots a sample can touch.
pub const SLOTS: usize = 6;

/// Cumulative distribution of the cubic B-spline kernel.
#[inline]
pub fn bspline3_cdf(x: f64) -> f64 {
    if x <= -2.0 {
        0.0
    } else if x >= 2.0 {
        1.0
    } else if x < 0.0 {
        1.0 - bspline3_cdf(-x)
    } else if x <= 1.0 {
        0.5 + 2.0 * x / 3.0 - x * x * x / 3.0 + x * x * x * x / 8.0
    } else {
        let t = 2.0 - x;
        1.0 - t * t * t * t / 24.0
    }
}

/// Bin weights of one sample: slot `i` belongs to bin `first + i`.
#[derive(Debug, Clone, Copy)]
pub struct BinWeights {
    pub first: isize,
    pub w: [f64; SLOTS],
    /// Derivative of each weight with respect to the input intensity.
    pub dw: [f64; SLOTS],
}

impl BinWeights {
    /// Iterates `(bin, weight)` over in-range bins with non-zero weight.
    #[inline]
    pub fn iter(&self, bins: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.w.iter().enumerate().filter_map(move |(i, &w)| {
            let k = self.first + i as isize;
            (w != 0.0 && k >= 0 && (k as usize) < bins).then_some((k as usize, w))
        })
    }
}

/// Affine map from intensity to bin coordinate plus the kernel width.
#[derive(Debug, Clone, PartialEq)]
pub struct ParzenBinning {
    pub bins: usize,
    pub min: f64,
    pub max: f64,
    /// Kernel width in bins, in `(0, 1]`.
    pub width: f64,
    pad: f64,
    scale: f64,
}

impl ParzenBinning {
    pub fn new(min: f64, max: f64, bins: usize, width: f64) -> Result<Self> {
        if !(width > 0.0 && width <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "Parzen width must be in (0, 1] bins, got {width}"
            )));
        }
        if !(min.is_finite() && max.is_finite() && max >= min) {
            return Err(Error::InvalidParameter(format!(
                "bad intensity range [{min}, {max}]"
            )));
        }
        let pad = (2.0 * width - 0.5).max(0.0);
        let span = bins as f64 - 1.0 - 2.0 * pad;
        if bins < 2 || span <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "{bins} bins leave no room for a kernel of width {width}"
            )));
        }
        let scale = if max > min { span / (max - min) } else { 0.0 };
        Ok(ParzenBinning {
            bins,
            min,
            max,
            width,
            pad,
            scale,
        })
    }

    /// Binning spanning the range of `values`.
    pub fn for_values(values: &[f64], bins: usize, width: f64) -> Result<Self> {
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        if values.is_empty() {
            return Err(Error::Empty("no intensities to bin".into()));
        }
        Self::new(lo, hi, bins, width)
    }

    /// Intensity-to-bin-coordinate slope.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Continuous bin coordinate, clamped to the padded range. The flag is
    /// false when clamping was active (zero derivative).
    #[inline]
    pub fn coordinate(&self, v: f64) -> (f64, bool) {
        let z = self.pad + (v - self.min) * self.scale;
        let hi = self.bins as f64 - 1.0 - self.pad;
        if z < self.pad {
            (self.pad, false)
        } else if z > hi {
            (hi, false)
        } else {
            (z, true)
        }
    }

    /// Nearest bin of an intensity (the zero-width limit).
    pub fn nearest_bin(&self, v: f64) -> usize {
        let (z, _) = self.coordinate(v);
        (z.round() as usize).min(self.bins - 1)
    }

    #[inline]
    pub fn weights(&self, v: f64) -> BinWeights {
        let (z, live) = self.coordinate(v);
        let first = z.floor() as isize - 2;
        let inv = 1.0 / self.width;
        let mut w = [0.0; SLOTS];
        let mut dw = [0.0; SLOTS];
        for i in 0..SLOTS {
            let k = (first + i as isize) as f64;
            let hi = (k + 0.5 - z) * inv;
            let lo = (k - 0.5 - z) * inv;
            w[i] = bspline3_cdf(hi) - bspline3_cdf(lo);
            if live {
                dw[i] = -inv * (bspline3(hi) - bspline3(lo)) * self.scale;
            }
        }
        BinWeights { first, w, dw }
    }
}
