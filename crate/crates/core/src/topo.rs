//! Fixed circle filters and circle-one connection masks.
//!
//! A circle filter is the linear function `w(t, u) = cos(x)·t + sin(x)·u`
//! sampled on a centred `k × k` grid with `t` (columns) and `u` (rows) in
//! `[-1, 1]`, for an angle `x` on the unit circle. A bank of `K` such filters
//! uses the angles `2πj/K` and never changes during training.
//!
//! A circle-one layer is an ordinary convolution whose input and output
//! channels are placed at evenly spaced points of the circle; the weights
//! between channels farther apart than a threshold (geodesic distance) are
//! held at zero.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Slack on the `d ≤ τ` comparison so that evenly spaced points exactly `τ`
/// apart are kept despite rounding in the angle arithmetic.
const BOUNDARY_SLACK: f64 = 1e-12;

/// Angles `2πj/n`, `j = 0..n`.
pub fn evenly_spaced_angles(n: usize) -> Vec<f64> {
    (0..n).map(|j| TAU * j as f64 / n as f64).collect()
}

/// Shortest arc length between two angles on the unit circle.
pub fn geodesic_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

#[derive(Clone, Debug)]
pub struct CircleFilterBank {
    angles: Vec<f64>,
    kernel_size: usize,
    weights: Tensor,
}

/// Unnormalized filter for angle `x` on a `k × k` grid, row-major.
pub fn circle_filter_raw(angle: f64, k: usize) -> Vec<f64> {
    let coord = |i: usize| -1.0 + 2.0 * i as f64 / (k - 1) as f64;
    let (c, s) = (angle.cos(), angle.sin());
    let mut w = Vec::with_capacity(k * k);
    for row in 0..k {
        for col in 0..k {
            w.push(c * coord(col) + s * coord(row));
        }
    }
    w
}

/// Builds `num_filters` unit-norm circle filters of size `kernel_size × kernel_size`.
pub fn make_circle_filters(num_filters: usize, kernel_size: usize) -> Result<CircleFilterBank> {
    if num_filters == 0 {
        return Err(invalid!("circle filter bank needs at least one filter"));
    }
    if kernel_size < 3 || kernel_size % 2 == 0 {
        return Err(invalid!("circle filter size must be odd and >= 3, got {kernel_size}"));
    }
    let angles = evenly_spaced_angles(num_filters);
    let mut data = Vec::with_capacity(num_filters * kernel_size * kernel_size);
    for &x in &angles {
        let w = circle_filter_raw(x, kernel_size);
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(w.iter().map(|v| v / norm));
    }
    let weights = Tensor::new([num_filters, 1, kernel_size, kernel_size], data)?;
    Ok(CircleFilterBank {
        angles,
        kernel_size,
        weights,
    })
}

impl CircleFilterBank {
    pub fn num_filters(&self) -> usize {
        self.angles.len()
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    /// `[K, 1, k, k]`, never trainable.
    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn filter(&self, j: usize) -> &[f64] {
        let kk = self.kernel_size * self.kernel_size;
        &self.weights.data()[j * kk..(j + 1) * kk]
    }

    /// Convolves a single-channel batch `[B, 1, H, W]` with the bank
    /// (same padding, stride 1). The bank enters the tape as a constant.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let shape = tape.shape(input);
        if shape.len() != 4 || shape[1] != 1 {
            return Err(invalid!(
                "circle filter layer expects a single-channel [B, 1, H, W] input, got {shape:?}"
            ));
        }
        let kernel = tape.constant(&self.weights)?;
        let bias = tape.constant(&Tensor::zeros([self.num_filters()]))?;
        tape.conv2d(input, kernel, bias, self.kernel_size / 2, 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircleOneMask {
    out_points: Vec<f64>,
    in_points: Vec<f64>,
    threshold: f64,
    mask: Vec<bool>,
}

/// Mask with evenly spaced output and input points.
pub fn make_col_mask(out_channels: usize, in_channels: usize, threshold: f64) -> Result<CircleOneMask> {
    CircleOneMask::with_points(
        evenly_spaced_angles(out_channels),
        evenly_spaced_angles(in_channels),
        threshold,
    )
}

impl CircleOneMask {
    /// Mask for explicit point placements, e.g. reusing the angles of a
    /// preceding circle-filter bank as the input points.
    pub fn with_points(out_points: Vec<f64>, in_points: Vec<f64>, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0) || threshold.is_nan() {
            return Err(invalid!("circle-one threshold must be positive, got {threshold}"));
        }
        if out_points.is_empty() || in_points.is_empty() {
            return Err(invalid!("circle-one mask needs at least one point on each side"));
        }
        let mask = out_points
            .iter()
            .flat_map(|&p| {
                in_points
                    .iter()
                    .map(move |&q| geodesic_distance(p, q) <= threshold + BOUNDARY_SLACK)
            })
            .collect();
        Ok(CircleOneMask {
            out_points,
            in_points,
            threshold,
            mask,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_points.len()
    }

    pub fn in_channels(&self) -> usize {
        self.in_points.len()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn out_points(&self) -> &[f64] {
        &self.out_points
    }

    pub fn in_points(&self) -> &[f64] {
        &self.in_points
    }

    pub fn is_kept(&self, out: usize, inp: usize) -> bool {
        self.mask[out * self.in_channels() + inp]
    }

    /// Row-major `[C_out, C_in]` mask.
    pub fn entries(&self) -> &[bool] {
        &self.mask
    }

    pub fn kept(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// The mask broadcast over a `k × k` kernel, as 0/1 factors matching a
    /// `[C_out, C_in, k, k]` weight tensor.
    pub fn kernel_factor(&self, k: usize) -> Vec<f64> {
        self.mask
            .iter()
            .flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, k * k))
            .collect()
    }

    fn check_weights(&self, weights: &[usize]) -> Result<usize> {
        match *weights {
            [o, i, k, k2] if o == self.out_channels() && i == self.in_channels() && k == k2 => Ok(k),
            _ => Err(Error::dim(
                "circle-one mask",
                &[self.out_channels(), self.in_channels()],
                weights,
            )),
        }
    }

    /// Sets every pruned weight to exactly zero.
    pub fn apply(&self, weights: &mut Tensor) -> Result<()> {
        let k = self.check_weights(weights.shape())?;
        let kk = k * k;
        for (block, &m) in weights.data_mut().chunks_exact_mut(kk).zip(&self.mask) {
            if !m {
                block.fill(0.0);
            }
        }
        Ok(())
    }

    /// Convolution with kernels `weights ⊙ mask`; pruned entries get zero gradient.
    pub fn forward(
        &self,
        tape: &mut Tape,
        weights: Var,
        bias: Var,
        input: Var,
        padding: usize,
    ) -> Result<Var> {
        let k = self.check_weights(tape.shape(weights))?;
        let effective = tape.mul_const(weights, &self.kernel_factor(k))?;
        tape.conv2d(input, effective, bias, padding, 1)
    }
}

/// Largest possible geodesic distance on the unit circle.
pub const MAX_GEODESIC: f64 = PI;
