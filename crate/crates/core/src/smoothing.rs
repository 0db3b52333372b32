//! Gaussian-RBF kernels and the Blob estimate of `-∇log q` from particles.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::squared_distance;

/// Lower bound on any selected bandwidth.
pub const MIN_BANDWIDTH: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    Fixed(f64),
    /// `h² = median(|xᵢ - xⱼ|²) / (2 log(N + 1))`, recomputed on every call.
    Median,
}

/// Gaussian RBF kernel `K(a, b) = exp(-|a - b|² / (2h²))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub bandwidth: Bandwidth,
}

impl KernelConfig {
    pub fn median() -> Self {
        Self {
            bandwidth: Bandwidth::Median,
        }
    }

    pub fn fixed(h: f64) -> Self {
        Self {
            bandwidth: Bandwidth::Fixed(h),
        }
    }

    pub fn eval(h: f64, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (-squared_distance(a, b) / (2.0 * h * h)).exp()
    }
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self::median()
    }
}

/// Median of a non-empty slice (mean of the two middle values for even length).
pub(crate) fn median_in_place(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (_, upper, _) = values.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

fn pairwise_squared_distances(points: &[DVector<f64>]) -> Vec<f64> {
    let n = points.len();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            out.push(squared_distance(&points[i], &points[j]));
        }
    }
    out
}

/// Bandwidth under `cfg` for the given particle set.
///
/// The median policy falls back to `h = 1` with fewer than two points.
pub fn select_bandwidth(cfg: &KernelConfig, points: &[DVector<f64>]) -> f64 {
    match cfg.bandwidth {
        Bandwidth::Fixed(h) => h,
        Bandwidth::Median => {
            let n = points.len();
            if n < 2 {
                return 1.0;
            }
            let mut d2 = pairwise_squared_distances(points);
            let med = median_in_place(&mut d2);
            let h2 = med / (2.0 * ((n + 1) as f64).ln());
            h2.sqrt().max(MIN_BANDWIDTH)
        }
    }
}

/// Kernel matrix and its gradients with respect to the first argument.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    pub bandwidth: f64,
    /// `K^{(i,j)}`.
    pub values: DMatrix<f64>,
    /// `grads[i * n + j] = ∇_{xᵢ} K^{(i,j)}`.
    pub grads: Vec<DVector<f64>>,
}

impl KernelMatrix {
    pub fn grad(&self, i: usize, j: usize) -> &DVector<f64> {
        &self.grads[i * self.values.nrows() + j]
    }
}

fn kernel_values(points: &[DVector<f64>], h: f64) -> DMatrix<f64> {
    let n = points.len();
    let inv = 1.0 / (2.0 * h * h);
    let rows: Vec<Vec<f64>> = points
        .par_iter()
        .map(|a| points.iter().map(|b| (-squared_distance(a, b) * inv).exp()).collect())
        .collect();
    DMatrix::from_fn(n, n, |i, j| rows[i][j])
}

pub fn kernel_matrix(cfg: &KernelConfig, points: &[DVector<f64>]) -> Result<KernelMatrix> {
    if points.is_empty() {
        return Err(Error::Empty("kernel_matrix needs at least one point"));
    }
    let h = select_bandwidth(cfg, points);
    let values = kernel_values(points, h);
    let n = points.len();
    let mut grads = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            grads.push(-(&points[i] - &points[j]) * (values[(i, j)] / (h * h)));
        }
    }
    Ok(KernelMatrix {
        bandwidth: h,
        values,
        grads,
    })
}

/// The two kernel sums
/// `Σₖ ∇ᵢK^{(i,k)} / Σⱼ K^{(i,j)} + sign · Σₖ ∇ᵢK^{(i,k)} / Σⱼ K^{(j,k)}`.
///
/// With `sign = 1` this is the smoothed estimate of `+∇log q(xᵢ)`; other signs
/// exist only to mutation-test the estimator.
pub fn kernel_sums(
    cfg: &KernelConfig,
    points: &[DVector<f64>],
    second_sign: f64,
) -> Vec<DVector<f64>> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let d = points[0].len();
    let h = select_bandwidth(cfg, points);
    let k = kernel_values(points, h);
    // K is symmetric, so column sums equal row sums.
    let sums: Vec<f64> = (0..n).map(|i| k.row(i).iter().sum()).collect();
    let inv_h2 = 1.0 / (h * h);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut first = DVector::zeros(d);
            let mut second = DVector::zeros(d);
            for kk in 0..n {
                let kik = k[(i, kk)];
                if kik == 0.0 {
                    continue;
                }
                // ∇_{xᵢ} K^{(i,k)} = -(xᵢ - xₖ) K^{(i,k)} / h²
                let w = -kik * inv_h2;
                for c in 0..d {
                    let g = w * (points[i][c] - points[kk][c]);
                    first[c] += g;
                    second[c] += g / sums[kk];
                }
            }
            first / sums[i] + second * second_sign
        })
        .collect()
}

/// Smoothed estimate of `+∇log q` at each particle (the bracketed kernel sums
/// of the momentum-sampler updates).
pub fn blob_grad_log_q(cfg: &KernelConfig, points: &[DVector<f64>]) -> Vec<DVector<f64>> {
    kernel_sums(cfg, points, 1.0)
}

/// Blob estimate of `-∇log q(xᵢ)`:
/// `-Σₖ ∇ᵢK^{(i,k)} / Σⱼ K^{(i,j)} - Σₖ ∇ᵢK^{(i,k)} / Σⱼ K^{(j,k)}`.
pub fn blob_neg_grad_log_q(cfg: &KernelConfig, points: &[DVector<f64>]) -> Vec<DVector<f64>> {
    kernel_sums(cfg, points, 1.0).into_iter().map(|g| -g).collect()
}
