//! Target distributions: unnormalised log-densities with analytic gradients,
//! plus an additive-noise stochastic-gradient wrapper.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;

/// An unnormalised target density `p` on `R^dim`.
///
/// Evaluation is pure, so one model may be shared across worker threads.
pub trait TargetModel: Send + Sync {
    fn dim(&self) -> usize;

    fn name(&self) -> &str;

    /// `log p(x)` up to an additive constant.
    fn log_density(&self, x: &DVector<f64>) -> f64;

    /// `∇ log p(x)`.
    fn grad_log_density(&self, x: &DVector<f64>) -> DVector<f64>;
}

/// Banana-shaped 2-D target
/// `log p(x) = -0.01 (½(x₁² + x₂²) + 0.4 (25 x₁ + x₂²)²)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Synthetic2d;

pub fn make_synthetic_2d() -> Synthetic2d {
    Synthetic2d
}

impl TargetModel for Synthetic2d {
    fn dim(&self) -> usize {
        2
    }

    fn name(&self) -> &str {
        "synthetic2d"
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let (x1, x2) = (x[0], x[1]);
        let u = 25.0 * x1 + x2 * x2;
        -0.01 * (0.5 * (x1 * x1 + x2 * x2) + 0.4 * u * u)
    }

    fn grad_log_density(&self, x: &DVector<f64>) -> DVector<f64> {
        let (x1, x2) = (x[0], x[1]);
        let u = 25.0 * x1 + x2 * x2;
        DVector::from_vec(vec![
            -0.01 * (x1 + 20.0 * u),
            -0.01 * (x2 + 1.6 * u * x2),
        ])
    }
}

/// Multivariate normal `N(mean, cov)` with the normalising constant dropped.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    precision: DMatrix<f64>,
    chol_lower: DMatrix<f64>,
}

pub fn make_gaussian(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Gaussian> {
    Gaussian::new(mean, cov)
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::Config("gaussian mean must be non-empty".into()));
        }
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Config(format!(
                "gaussian cov must be {n}x{n}, got {}x{}",
                cov.nrows(),
                cov.ncols(),
                n = mean.len()
            )));
        }
        let chol_lower = linalg::cholesky_lower(&cov, "gaussian cov")?;
        let precision = linalg::spd_inverse(&cov, "gaussian cov")?;
        Ok(Self {
            mean,
            cov,
            precision,
            chol_lower,
        })
    }

    pub fn standard(dim: usize) -> Self {
        Self::new(DVector::zeros(dim), DMatrix::identity(dim, dim)).expect("identity is SPD")
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// Draws one exact sample.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| StandardNormal.sample(rng));
        &self.mean + &self.chol_lower * z
    }
}

impl TargetModel for Gaussian {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn name(&self) -> &str {
        "gaussian"
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.mean;
        -0.5 * d.dot(&(&self.precision * &d))
    }

    fn grad_log_density(&self, x: &DVector<f64>) -> DVector<f64> {
        -(&self.precision * (x - &self.mean))
    }
}

/// Joint target `p(θ) N(r; 0, Σ)` on phase space `x = (θ, r)`.
///
/// This is the augmented density the momentum dynamics leave invariant.
pub struct MomentumAugmented<'a> {
    base: &'a dyn TargetModel,
    sigma_inv: DMatrix<f64>,
    name: String,
}

impl<'a> MomentumAugmented<'a> {
    pub fn new(base: &'a dyn TargetModel, sigma_inv: DMatrix<f64>) -> Result<Self> {
        if sigma_inv.nrows() != base.dim() {
            return Err(Error::Dimension(format!(
                "sigma_inv is {}x{} but target has dim {}",
                sigma_inv.nrows(),
                sigma_inv.ncols(),
                base.dim()
            )));
        }
        linalg::require_spd(&sigma_inv, "sigma_inv")?;
        let name = format!("{}+momentum", base.name());
        Ok(Self {
            base,
            sigma_inv,
            name,
        })
    }

    fn split(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let l = self.base.dim();
        (x.rows(0, l).into_owned(), x.rows(l, l).into_owned())
    }
}

impl TargetModel for MomentumAugmented<'_> {
    fn dim(&self) -> usize {
        2 * self.base.dim()
    }

    fn name(&self) -> &str {
        &self.name
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let (theta, r) = self.split(x);
        self.base.log_density(&theta) - 0.5 * r.dot(&(&self.sigma_inv * &r))
    }

    fn grad_log_density(&self, x: &DVector<f64>) -> DVector<f64> {
        let (theta, r) = self.split(x);
        let l = self.base.dim();
        let mut g = DVector::zeros(2 * l);
        g.rows_mut(0, l).copy_from(&self.base.grad_log_density(&theta));
        g.rows_mut(l, l).copy_from(&-(&self.sigma_inv * r));
        g
    }
}

/// The targets addressable by name from configuration files.
#[derive(Debug, Clone)]
pub enum BuiltinTarget {
    Synthetic2d(Synthetic2d),
    Gaussian(Gaussian),
}

impl TargetModel for BuiltinTarget {
    fn dim(&self) -> usize {
        match self {
            BuiltinTarget::Synthetic2d(t) => t.dim(),
            BuiltinTarget::Gaussian(t) => t.dim(),
        }
    }

    fn name(&self) -> &str {
        match self {
            BuiltinTarget::Synthetic2d(t) => t.name(),
            BuiltinTarget::Gaussian(t) => t.name(),
        }
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        match self {
            BuiltinTarget::Synthetic2d(t) => t.log_density(x),
            BuiltinTarget::Gaussian(t) => t.log_density(x),
        }
    }

    fn grad_log_density(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            BuiltinTarget::Synthetic2d(t) => t.grad_log_density(x),
            BuiltinTarget::Gaussian(t) => t.grad_log_density(x),
        }
    }
}

/// Adds independent `N(0, noise_std[i]²)` noise to each gradient coordinate.
pub fn perturb_gradient<R: rand::Rng + ?Sized>(
    grad: &mut DVector<f64>,
    noise_std: &[f64],
    rng: &mut R,
) {
    for (g, &s) in grad.iter_mut().zip(noise_std) {
        if s > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            *g += s * z;
        }
    }
}

/// Stochastic-gradient emulator around a base target.
pub struct NoisyGradient<'a> {
    base: &'a dyn TargetModel,
    noise_std: Vec<f64>,
    rng: ChaCha8Rng,
}

impl<'a> NoisyGradient<'a> {
    pub fn new(base: &'a dyn TargetModel, noise_std: Vec<f64>, seed: u64) -> Result<Self> {
        if noise_std.len() != base.dim() {
            return Err(Error::Dimension(format!(
                "noise_std has {} entries, target dim is {}",
                noise_std.len(),
                base.dim()
            )));
        }
        if noise_std.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config("noise_std must be finite and >= 0".into()));
        }
        Ok(Self {
            base,
            noise_std,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn isotropic(base: &'a dyn TargetModel, std: f64, seed: u64) -> Result<Self> {
        Self::new(base, vec![std; base.dim()], seed)
    }

    pub fn base(&self) -> &dyn TargetModel {
        self.base
    }

    /// Noisy estimate of `∇ log p(x)`; advances the internal generator.
    pub fn noisy_grad(&mut self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = self.base.grad_log_density(x);
        perturb_gradient(&mut g, &self.noise_std, &mut self.rng);
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn central_difference(t: &dyn TargetModel, x: &DVector<f64>, h: f64) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            (t.log_density(&xp) - t.log_density(&xm)) / (2.0 * h)
        })
    }

    fn assert_gradient_consistent(t: &dyn TargetModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..100 {
            // uniform in the ball |x| <= 10
            let mut x: DVector<f64> = DVector::from_fn(t.dim(), |_, _| rng.random_range(-1.0..1.0));
            let radius = 10.0 * rng.random::<f64>();
            x *= radius / x.norm().max(1e-12);
            let fd = central_difference(t, &x, 1e-4);
            let an = t.grad_log_density(&x);
            let rel = (&fd - &an).norm() / an.norm().max(1.0);
            assert!(rel < 1e-5, "{}: rel err {rel:e} at {x}", t.name());
            assert!(t.log_density(&x).is_finite());
        }
    }

    #[test]
    fn synthetic_values() {
        let t = make_synthetic_2d();
        assert_eq!(t.log_density(&DVector::from_vec(vec![0.0, 0.0])), 0.0);
        assert_eq!(
            t.grad_log_density(&DVector::from_vec(vec![0.0, 0.0])),
            DVector::from_vec(vec![0.0, 0.0])
        );
        let v = t.log_density(&DVector::from_vec(vec![1.0, 0.0]));
        assert!((v + 2.505).abs() < 1e-12, "{v}");
    }

    #[test]
    fn gaussian_gradients() {
        let g = make_gaussian(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        assert_eq!(
            g.grad_log_density(&DVector::from_vec(vec![1.0, 2.0])),
            DVector::from_vec(vec![-1.0, -2.0])
        );
        let g1 = make_gaussian(DVector::from_vec(vec![3.0]), DMatrix::from_element(1, 1, 4.0)).unwrap();
        assert_eq!(g1.grad_log_density(&DVector::from_vec(vec![3.0]))[0], 0.0);
        let g2 = make_gaussian(
            DVector::zeros(2),
            DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5])),
        )
        .unwrap();
        let v = g2.grad_log_density(&DVector::from_vec(vec![2.0, 1.0]));
        assert!((v[0] + 1.0).abs() < 1e-15 && (v[1] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn gaussian_rejects_non_spd() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(make_gaussian(DVector::zeros(2), bad), Err(Error::Config(_))));
        assert!(make_gaussian(DVector::zeros(2), DMatrix::identity(3, 3)).is_err());
    }

    #[test]
    fn gradient_consistency_of_builtins() {
        assert_gradient_consistent(&make_synthetic_2d(), 1);
        let cov = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5]);
        let g = make_gaussian(DVector::from_vec(vec![1.0, -2.0, 0.5]), cov).unwrap();
        assert_gradient_consistent(&g, 2);
        let base = make_synthetic_2d();
        let sigma_inv = DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.8]);
        let aug = MomentumAugmented::new(&base, sigma_inv).unwrap();
        assert_gradient_consistent(&aug, 3);
    }

    #[test]
    fn zero_noise_is_exact() {
        let t = make_synthetic_2d();
        let mut ng = NoisyGradient::isotropic(&t, 0.0, 5).unwrap();
        let x = DVector::from_vec(vec![0.3, -1.2]);
        assert_eq!(ng.noisy_grad(&x), t.grad_log_density(&x));
    }

    #[test]
    fn noisy_draws_differ() {
        let t = make_synthetic_2d();
        let mut ng = NoisyGradient::isotropic(&t, 1.0, 5).unwrap();
        let x = DVector::from_vec(vec![1.0, 0.0]);
        assert_ne!(ng.noisy_grad(&x), ng.noisy_grad(&x));
    }

    #[test]
    fn noise_is_unbiased() {
        // 1e5 draws, 5-sigma band per coordinate.
        let t = make_synthetic_2d();
        let mut ng = NoisyGradient::isotropic(&t, 1.0, 11).unwrap();
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let k = 100_000;
        let mut acc = DVector::zeros(2);
        for _ in 0..k {
            acc += ng.noisy_grad(&x);
        }
        acc /= k as f64;
        let exact = t.grad_log_density(&x);
        let band = 5.0 / (k as f64).sqrt();
        for i in 0..2 {
            assert!((acc[i] - exact[i]).abs() < band, "coord {i}: {} vs {}", acc[i], exact[i]);
        }
    }

    #[test]
    fn noise_mean_million_draws() {
        let t = make_synthetic_2d();
        let mut ng = NoisyGradient::isotropic(&t, 1.0, 12).unwrap();
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let k = 1_000_000;
        let mut acc = DVector::zeros(2);
        for _ in 0..k {
            acc += ng.noisy_grad(&x);
        }
        acc /= k as f64;
        assert!((acc - t.grad_log_density(&x)).amax() < 0.01);
    }
}
