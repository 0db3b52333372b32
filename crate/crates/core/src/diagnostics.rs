//! Distances between particle sets and targets: MMD, exact empirical W2 and
//! moment summaries.
//!
//! Reductions run in a fixed order over canonically sorted rows so the values
//! are bit-reproducible regardless of thread count or input row order.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::squared_distance;
use crate::rng;
use crate::smoothing::{select_bandwidth, KernelConfig};
use crate::targets::{BuiltinTarget, TargetModel};

/// Largest set size for the exact assignment solver.
pub const W2_MAX_POINTS: usize = 512;

/// Proposal box for rejection sampling of the synthetic banana target. It
/// holds all but ~1e-7 of the probability mass.
pub const SYNTHETIC_BOX: ([f64; 2], [f64; 2]) = ([-45.0, 5.0], [-32.0, 32.0]);

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub iteration: u64,
    pub mmd: f64,
    /// Absent when the sets are too large for the exact solver.
    pub w2: Option<f64>,
    pub mean: Vec<f64>,
    /// Row-major covariance.
    pub cov: Vec<f64>,
}

fn lexicographic(a: &DVector<f64>, b: &DVector<f64>) -> Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

fn canonical(points: &[DVector<f64>]) -> Vec<&DVector<f64>> {
    let mut v: Vec<&DVector<f64>> = points.iter().collect();
    v.sort_by(|a, b| lexicographic(a, b));
    v
}

/// Mean of `K(a, b)` over all pairs, summed row by row.
fn mean_kernel(a: &[&DVector<f64>], b: &[&DVector<f64>], h: f64) -> f64 {
    let inv = 1.0 / (2.0 * h * h);
    let rows: Vec<f64> = a
        .par_iter()
        .map(|x| b.iter().map(|y| (-squared_distance(x, y) * inv).exp()).sum::<f64>())
        .collect();
    rows.iter().sum::<f64>() / (a.len() as f64 * b.len() as f64)
}

/// Biased (V-statistic) MMD between two samples, bandwidth chosen by `kernel`
/// on the pooled set.
pub fn mmd(a: &[DVector<f64>], b: &[DVector<f64>], kernel: &KernelConfig) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("mmd needs non-empty samples"));
    }
    let ca = canonical(a);
    let cb = canonical(b);
    let mut pooled: Vec<DVector<f64>> = ca.iter().map(|p| (*p).clone()).collect();
    pooled.extend(cb.iter().map(|p| (*p).clone()));
    pooled.sort_by(lexicographic);
    let h = select_bandwidth(kernel, &pooled);
    let mmd2 = mean_kernel(&ca, &ca, h) + mean_kernel(&cb, &cb, h) - 2.0 * mean_kernel(&ca, &cb, h);
    Ok(mmd2.max(0.0).sqrt())
}

/// Minimum-cost perfect assignment on a square cost matrix (shortest
/// augmenting paths with potentials, O(n³)). Returns `assignment[row] = col`.
pub fn solve_assignment(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square cost matrix");
    // 1-based arrays, index 0 is a virtual column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if matched_row[j] > 0 {
            assignment[matched_row[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Exact W2 between two equal-size, equal-weight point sets.
pub fn w2_exact(a: &[DVector<f64>], b: &[DVector<f64>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "w2_exact needs equal sizes, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Empty("w2_exact needs non-empty sets"));
    }
    if a.len() > W2_MAX_POINTS {
        return Err(Error::Config(format!(
            "w2_exact is capped at {W2_MAX_POINTS} points, got {}",
            a.len()
        )));
    }
    let n = a.len();
    let cost = DMatrix::from_fn(n, n, |i, j| squared_distance(&a[i], &b[j]));
    let assignment = solve_assignment(&cost);
    let mut matched: Vec<f64> = assignment.iter().enumerate().map(|(i, &j)| cost[(i, j)]).collect();
    matched.sort_by(f64::total_cmp);
    let total: f64 = matched.iter().sum();
    Ok((total / n as f64).max(0.0).sqrt())
}

/// Sample mean and (N - 1)-normalised covariance.
pub fn moments(points: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = points.len();
    let d = points.first().map_or(0, |p| p.len());
    let mut mean = DVector::zeros(d);
    for p in points {
        mean += p;
    }
    if n > 0 {
        mean /= n as f64;
    }
    let mut cov = DMatrix::zeros(d, d);
    for p in points {
        let c = p - &mean;
        cov += &c * c.transpose();
    }
    if n > 1 {
        cov /= (n - 1) as f64;
    }
    (mean, cov)
}

/// `‖Ĉ - C‖_F / ‖C‖_F`.
pub fn relative_cov_error(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    (estimate - truth).norm() / truth.norm()
}

/// Output of a rejection sampler.
#[derive(Debug, Clone)]
pub struct RejectionDraws {
    pub samples: Vec<DVector<f64>>,
    /// `log(envelope · u)` for each accepted sample.
    pub thresholds: Vec<f64>,
    pub proposals: u64,
    pub log_envelope: f64,
}

impl RejectionDraws {
    pub fn acceptance_rate(&self) -> f64 {
        self.samples.len() as f64 / self.proposals.max(1) as f64
    }
}

/// Numerically locates `max log p` over a 2-D box: grid search followed by
/// shrinking local grids around the best point.
pub fn locate_log_max(target: &dyn TargetModel, bx: [f64; 2], by: [f64; 2]) -> f64 {
    let eval = |x: f64, y: f64| target.log_density(&DVector::from_vec(vec![x, y]));
    let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
    let n = 400;
    for i in 0..=n {
        for j in 0..=n {
            let x = bx[0] + (bx[1] - bx[0]) * i as f64 / n as f64;
            let y = by[0] + (by[1] - by[0]) * j as f64 / n as f64;
            let v = eval(x, y);
            if v > best.0 {
                best = (v, x, y);
            }
        }
    }
    let (mut wx, mut wy) = ((bx[1] - bx[0]) / n as f64, (by[1] - by[0]) / n as f64);
    for _ in 0..60 {
        let (_, cx, cy) = best;
        for i in -4..=4 {
            for j in -4..=4 {
                let x = (cx + wx * i as f64 / 2.0).clamp(bx[0], bx[1]);
                let y = (cy + wy * j as f64 / 2.0).clamp(by[0], by[1]);
                let v = eval(x, y);
                if v > best.0 {
                    best = (v, x, y);
                }
            }
        }
        wx *= 0.5;
        wy *= 0.5;
    }
    best.0
}

/// Uniform-proposal rejection sampling of a 2-D target on a box.
pub fn rejection_sample(
    target: &dyn TargetModel,
    bx: [f64; 2],
    by: [f64; 2],
    n: usize,
    seed: u64,
) -> Result<RejectionDraws> {
    let log_envelope = locate_log_max(target, bx, by);
    let mut g = rng::derived_rng(seed, 0x5eed_0001);
    let mut samples = Vec::with_capacity(n);
    let mut thresholds = Vec::with_capacity(n);
    let mut proposals = 0u64;
    while samples.len() < n {
        proposals += 1;
        let x = DVector::from_vec(vec![g.random_range(bx[0]..bx[1]), g.random_range(by[0]..by[1])]);
        let u: f64 = g.random();
        let threshold = log_envelope + u.ln();
        if target.log_density(&x) >= threshold {
            samples.push(x);
            thresholds.push(threshold);
        }
        if proposals >= 1_000_000 && (samples.len() as f64) < 1e-4 * proposals as f64 {
            return Err(Error::LowAcceptance(samples.len() as f64 / proposals as f64));
        }
    }
    Ok(RejectionDraws {
        samples,
        thresholds,
        proposals,
        log_envelope,
    })
}

/// I.i.d. samples from a built-in target: exact for Gaussians, rejection on
/// [`SYNTHETIC_BOX`] for the banana target.
pub fn reference_sample(target: &BuiltinTarget, n: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    match target {
        BuiltinTarget::Gaussian(g) => {
            let mut r = rng::derived_rng(seed, 0x5eed_0002);
            Ok((0..n).map(|_| g.sample(&mut r)).collect())
        }
        BuiltinTarget::Synthetic2d(t) => {
            Ok(rejection_sample(t, SYNTHETIC_BOX.0, SYNTHETIC_BOX.1, n, seed)?.samples)
        }
    }
}

/// Metrics of an ensemble against reference samples.
///
/// W2 uses the first `N` reference points and is skipped beyond
/// [`W2_MAX_POINTS`] or when the reference is smaller than the ensemble.
pub fn metric_report(
    iteration: u64,
    particles: &[DVector<f64>],
    reference: &[DVector<f64>],
    kernel: &KernelConfig,
) -> Result<MetricReport> {
    let n = particles.len();
    let value = mmd(particles, reference, kernel)?;
    let w2 = if n <= W2_MAX_POINTS && reference.len() >= n {
        Some(w2_exact(particles, &reference[..n])?)
    } else {
        None
    };
    let (mean, cov) = moments(particles);
    Ok(MetricReport {
        iteration,
        mmd: value,
        w2,
        mean: mean.iter().copied().collect(),
        cov: cov.transpose().iter().copied().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{make_gaussian, make_synthetic_2d, Gaussian};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    fn cloud(n: usize, shift: f64, seed: u64) -> Vec<DVector<f64>> {
        let g = make_gaussian(v(&[shift, 0.0]), DMatrix::identity(2, 2)).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| g.sample(&mut r)).collect()
    }

    /// Brute-force W2 over all permutations.
    fn w2_brute(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
        fn permute(k: usize, idx: &mut Vec<usize>, best: &mut f64, a: &[DVector<f64>], b: &[DVector<f64>]) {
            if k == idx.len() {
                let c: f64 = idx.iter().enumerate().map(|(i, &j)| squared_distance(&a[i], &b[j])).sum();
                *best = best.min(c);
                return;
            }
            for s in k..idx.len() {
                idx.swap(k, s);
                permute(k + 1, idx, best, a, b);
                idx.swap(k, s);
            }
        }
        let mut idx: Vec<usize> = (0..a.len()).collect();
        let mut best = f64::INFINITY;
        permute(0, &mut idx, &mut best, a, b);
        (best / a.len() as f64).sqrt()
    }

    #[test]
    fn mmd_of_identical_sets_is_zero() {
        let a = cloud(40, 0.0, 1);
        assert_eq!(mmd(&a, &a, &KernelConfig::median()).unwrap(), 0.0);
    }

    #[test]
    fn mmd_is_continuous_for_merging_points() {
        let k = KernelConfig::fixed(1.0);
        let mut last = f64::INFINITY;
        for delta in [1.0, 0.1, 0.01, 0.001] {
            let m = mmd(&[v(&[0.0, 0.0])], &[v(&[delta, 0.0])], &k).unwrap();
            assert!(m < last);
            last = m;
        }
        assert!(last < 2e-3);
    }

    #[test]
    fn mmd_separates_shifted_samples() {
        for seed in 0..5 {
            let a = cloud(500, 0.0, 10 + seed);
            let b = cloud(500, 0.0, 20 + seed);
            let c = cloud(500, 3.0, 30 + seed);
            let k = KernelConfig::median();
            assert!(mmd(&a, &c, &k).unwrap() > mmd(&a, &b, &k).unwrap());
        }
    }

    #[test]
    fn mmd_row_permutation_is_bit_identical() {
        let a = cloud(60, 0.0, 3);
        let b = cloud(80, 1.0, 4);
        let mut a2 = a.clone();
        let mut b2 = b.clone();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        a2.shuffle(&mut r);
        b2.shuffle(&mut r);
        let k = KernelConfig::median();
        assert_eq!(mmd(&a, &b, &k).unwrap().to_bits(), mmd(&a2, &b2, &k).unwrap().to_bits());
    }

    #[test]
    fn w2_basics() {
        let a = cloud(20, 0.0, 5);
        assert_eq!(w2_exact(&a, &a).unwrap(), 0.0);
        assert_eq!(w2_exact(&[v(&[0.0])], &[v(&[2.5])]).unwrap(), 2.5);
        assert_eq!(w2_exact(&[v(&[0.0]), v(&[1.0])], &[v(&[1.0]), v(&[0.0])]).unwrap(), 0.0);
        assert!(w2_exact(&a, &a[..5]).is_err());
        let big = cloud(W2_MAX_POINTS + 1, 0.0, 6);
        assert!(w2_exact(&big, &big).is_err());
    }

    #[test]
    fn w2_matches_brute_force() {
        for seed in 0..20 {
            let a = cloud(6, 0.0, 100 + seed);
            let b = cloud(6, 0.5, 200 + seed);
            let exact = w2_exact(&a, &b).unwrap();
            assert!((exact - w2_brute(&a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn w2_is_symmetric_and_triangular() {
        for seed in 0..100 {
            let a = cloud(8, 0.0, 3 * seed);
            let b = cloud(8, 1.0, 3 * seed + 1);
            let c = cloud(8, -1.0, 3 * seed + 2);
            let ab = w2_exact(&a, &b).unwrap();
            assert_eq!(ab, w2_exact(&b, &a).unwrap());
            let ac = w2_exact(&a, &c).unwrap();
            let cb = w2_exact(&c, &b).unwrap();
            assert!(ab <= ac + cb + 1e-9);
        }
    }

    #[test]
    fn gaussian_reference_mean() {
        let g = make_gaussian(v(&[1.0, -2.0]), DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5])).unwrap();
        let t = BuiltinTarget::Gaussian(g);
        let n = 4000;
        let s = reference_sample(&t, n, 7).unwrap();
        let (mean, _) = moments(&s);
        assert!((mean[0] - 1.0).abs() < 5.0 * 2f64.sqrt() / (n as f64).sqrt());
        assert!((mean[1] + 2.0).abs() < 5.0 * 0.5f64.sqrt() / (n as f64).sqrt());
        assert_eq!(s, reference_sample(&t, n, 7).unwrap());
    }

    #[test]
    fn synthetic_rejection_invariant() {
        let t = make_synthetic_2d();
        let draws = rejection_sample(&t, SYNTHETIC_BOX.0, SYNTHETIC_BOX.1, 500, 3).unwrap();
        assert!(draws.log_envelope.abs() < 1e-10, "max log p is 0 at the origin");
        for (x, thr) in draws.samples.iter().zip(&draws.thresholds) {
            assert!(t.log_density(x) >= *thr);
        }
        assert!(draws.acceptance_rate() > 1e-4);
        let again = reference_sample(&BuiltinTarget::Synthetic2d(t), 500, 3).unwrap();
        assert_eq!(again, draws.samples);
    }

    #[test]
    fn low_acceptance_is_an_error() {
        // a very peaked Gaussian in a huge box
        let g = Gaussian::new(v(&[0.0, 0.0]), DMatrix::identity(2, 2) * 1e-6).unwrap();
        let r = rejection_sample(&g, [-100.0, 100.0], [-100.0, 100.0], 10, 1);
        assert!(matches!(r, Err(Error::LowAcceptance(_))));
    }

    #[test]
    fn moments_and_report() {
        let pts = [v(&[0.0, 0.0]), v(&[2.0, 0.0]), v(&[0.0, 2.0]), v(&[2.0, 2.0])];
        let (m, c) = moments(&pts);
        assert_eq!(m, v(&[1.0, 1.0]));
        assert!((c[(0, 0)] - 4.0 / 3.0).abs() < 1e-15 && c[(0, 1)] == 0.0);
        let rep = metric_report(5, &pts, &pts, &KernelConfig::median()).unwrap();
        assert_eq!(rep.mmd, 0.0);
        assert_eq!(rep.w2, Some(0.0));
        assert_eq!(rep.cov.len(), 4);
    }
}
