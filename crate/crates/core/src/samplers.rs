//! Time stepping of the particle systems: Blob (Langevin flow), stochastic
//! SGHMC, and the two deterministic SGHMC flows (`psghmc-det`, `psghmc-fgh`).
//!
//! All steppers read an immutable snapshot of the previous ensemble and update
//! every particle simultaneously. Per-particle randomness comes from
//! [`rng::particle_rng`], so the parallel update is bit-identical to a serial
//! one.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;
use crate::smoothing::{blob_grad_log_q, KernelConfig};
use crate::targets::{perturb_gradient, TargetModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "blob")]
    Blob,
    #[serde(rename = "sghmc")]
    Sghmc,
    #[serde(rename = "psghmc-det")]
    PsghmcDet,
    #[serde(rename = "psghmc-fgh")]
    PsghmcFgh,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Blob,
        Method::Sghmc,
        Method::PsghmcDet,
        Method::PsghmcFgh,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Blob => "blob",
            Method::Sghmc => "sghmc",
            Method::PsghmcDet => "psghmc-det",
            Method::PsghmcFgh => "psghmc-fgh",
        }
    }

    pub fn uses_momentum(&self) -> bool {
        !matches!(self, Method::Blob)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method `{s}` (expected blob, sghmc, psghmc-det or psghmc-fgh)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub method: Method,
    /// Step size ε.
    pub eps: f64,
    /// Σ⁻¹, inverse covariance of the momentum.
    pub sigma_inv: DMatrix<f64>,
    /// Friction C.
    pub friction: DMatrix<f64>,
    pub kernel_theta: KernelConfig,
    pub kernel_r: KernelConfig,
    pub n_steps: u64,
    pub seed: u64,
    /// Std of additive gradient noise; zero means exact gradients.
    pub sg_noise_std: f64,
}

impl SamplerConfig {
    pub fn new(method: Method, dim: usize) -> Self {
        Self {
            method,
            eps: 0.01,
            sigma_inv: DMatrix::identity(dim, dim),
            friction: DMatrix::identity(dim, dim) * 0.5,
            kernel_theta: KernelConfig::median(),
            kernel_r: KernelConfig::median(),
            n_steps: 0,
            seed: 0,
            sg_noise_std: 0.0,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.sg_noise_std.is_finite() && self.sg_noise_std >= 0.0) {
            return Err(Error::Config("sg_noise_std must be >= 0".into()));
        }
        if self.method.uses_momentum() {
            for (m, what) in [(&self.sigma_inv, "sigma_inv"), (&self.friction, "C")] {
                if m.nrows() != dim {
                    return Err(Error::Dimension(format!("{what} must be {dim}x{dim}")));
                }
                linalg::require_spd(m, what)?;
            }
        }
        Ok(())
    }
}

/// Particles `θ⁽ⁱ⁾` and, for momentum samplers, `r⁽ⁱ⁾`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub theta: Vec<DVector<f64>>,
    pub momentum: Option<Vec<DVector<f64>>>,
    pub iteration: u64,
    /// Root seed; per-step streams are derived from `(seed, iteration, particle)`.
    pub seed: u64,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.theta.first().map_or(0, |t| t.len())
    }

    pub fn momentum(&self) -> Result<&[DVector<f64>]> {
        self.momentum
            .as_deref()
            .ok_or_else(|| Error::Config("sampler needs a momentum ensemble".into()))
    }
}

/// Draws `θ ~ N(init_mean, init_std² I)` and, when `momentum_cov` is given,
/// `r ~ N(0, Σ)`.
pub fn init_ensemble(
    n: usize,
    init_mean: &DVector<f64>,
    init_std: f64,
    momentum_cov: Option<&DMatrix<f64>>,
    seed: u64,
) -> Result<ParticleEnsemble> {
    if n == 0 {
        return Err(Error::Empty("ensemble needs at least one particle"));
    }
    if !(init_std.is_finite() && init_std >= 0.0) {
        return Err(Error::Config("init_std must be >= 0".into()));
    }
    let l = init_mean.len();
    let chol = momentum_cov
        .map(|c| linalg::cholesky_lower(c, "momentum covariance"))
        .transpose()?;
    let mut theta = Vec::with_capacity(n);
    let mut momentum = chol.as_ref().map(|_| Vec::with_capacity(n));
    for i in 0..n {
        let mut g = rng::particle_rng(seed, rng::INIT_STREAM, i as u64);
        let z = DVector::from_fn(l, |_, _| StandardNormal.sample(&mut g));
        theta.push(init_mean + z * init_std);
        if let (Some(l_factor), Some(m)) = (&chol, momentum.as_mut()) {
            let z = DVector::from_fn(l, |_, _| StandardNormal.sample(&mut g));
            m.push(l_factor * z);
        }
    }
    Ok(ParticleEnsemble {
        theta,
        momentum,
        iteration: 0,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Theta,
    Momentum,
}

/// Source of `∇log q` estimates on one coordinate block of the ensemble.
pub trait ScoreSource: Sync {
    fn grad_log_q(&self, block: Block, points: &[DVector<f64>]) -> Vec<DVector<f64>>;
}

/// Blob smoothing with separate kernels for the `θ` and `r` blocks.
#[derive(Debug, Clone, Copy)]
pub struct BlobScores {
    pub kernel_theta: KernelConfig,
    pub kernel_r: KernelConfig,
}

impl BlobScores {
    pub fn from_config(cfg: &SamplerConfig) -> Self {
        Self {
            kernel_theta: cfg.kernel_theta,
            kernel_r: cfg.kernel_r,
        }
    }
}

impl ScoreSource for BlobScores {
    fn grad_log_q(&self, block: Block, points: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let cfg = match block {
            Block::Theta => &self.kernel_theta,
            Block::Momentum => &self.kernel_r,
        };
        blob_grad_log_q(cfg, points)
    }
}

/// Closed-form scores, for oracle checks where `q` is known.
pub struct AnalyticScores<F>(pub F);

impl<F> ScoreSource for AnalyticScores<F>
where
    F: Fn(Block, &DVector<f64>) -> DVector<f64> + Sync,
{
    fn grad_log_q(&self, block: Block, points: &[DVector<f64>]) -> Vec<DVector<f64>> {
        points.iter().map(|p| (self.0)(block, p)).collect()
    }
}

fn check_finite(v: &DVector<f64>, iteration: u64, particle: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { iteration, particle })
    }
}

/// `∇log p(θ)`, perturbed when stochastic gradients are switched on.
fn target_grad<R: rand::Rng>(
    target: &dyn TargetModel,
    theta: &DVector<f64>,
    noise_std: f64,
    rng: &mut R,
) -> DVector<f64> {
    let mut g = target.grad_log_density(theta);
    if noise_std > 0.0 {
        let std = vec![noise_std; g.len()];
        perturb_gradient(&mut g, &std, rng);
    }
    g
}

fn finish(
    ens: &ParticleEnsemble,
    updates: Vec<(DVector<f64>, Option<DVector<f64>>)>,
) -> Result<ParticleEnsemble> {
    let mut theta = Vec::with_capacity(updates.len());
    let mut momentum = ens.momentum.as_ref().map(|_| Vec::with_capacity(updates.len()));
    for (i, (t, r)) in updates.into_iter().enumerate() {
        check_finite(&t, ens.iteration, i)?;
        theta.push(t);
        if let (Some(m), Some(r)) = (momentum.as_mut(), r) {
            check_finite(&r, ens.iteration, i)?;
            m.push(r);
        }
    }
    Ok(ParticleEnsemble {
        theta,
        momentum,
        iteration: ens.iteration + 1,
        seed: ens.seed,
    })
}

/// Euler step of the Langevin gradient flow with smoothed `-∇log q`:
/// `θ ← θ + ε(∇log p(θ) - ∇log q(θ))`.
pub fn step_blob_with(
    ens: &ParticleEnsemble,
    target: &dyn TargetModel,
    cfg: &SamplerConfig,
    scores: &dyn ScoreSource,
) -> Result<ParticleEnsemble> {
    let sq = scores.grad_log_q(Block::Theta, &ens.theta);
    let updates = (0..ens.len())
        .into_par_iter()
        .map(|i| {
            let mut g = rng::particle_rng(ens.seed, ens.iteration, i as u64);
            let theta = &ens.theta[i];
            let grad = target_grad(target, theta, cfg.sg_noise_std, &mut g);
            (theta + (grad - &sq[i]) * cfg.eps, None)
        })
        .collect();
    finish(ens, updates)
}

pub fn step_blob(
    ens: &ParticleEnsemble,
    target: &dyn TargetModel,
    cfg: &SamplerConfig,
) -> Result<ParticleEnsemble> {
    step_blob_with(ens, target, cfg, &BlobScores::from_config(cfg))
}

/// Euler–Maruyama step of SGHMC:
/// `θ ← θ + εΣ⁻¹r`, `r ← r + ε∇log p(θ) - εCΣ⁻¹r + ξ`, `ξ ~ N(0, 2Cε)`.
pub fn step_sghmc(
    ens: &ParticleEnsemble,
    target: &dyn TargetModel,
    cfg: &SamplerConfig,
) -> Result<ParticleEnsemble> {
    let momentum = ens.momentum()?;
    let noise_factor = linalg::psd_factor(&cfg.friction, "C")? * (2.0 * cfg.eps).sqrt();
    let eps = cfg.eps;
    let updates = (0..ens.len())
        .into_par_iter()
        .map(|i| {
            let mut g = rng::particle_rng(ens.seed, ens.iteration, i as u64);
            let theta = &ens.theta[i];
            let r = &momentum[i];
            let grad = target_grad(target, theta, cfg.sg_noise_std, &mut g);
            let velocity = &cfg.sigma_inv * r;
            let z = DVector::from_fn(r.len(), |_, _| StandardNormal.sample(&mut g));
            let new_theta = theta + &velocity * eps;
            let new_r = r + grad * eps - &cfg.friction * &velocity * eps + &noise_factor * z;
            (new_theta, Some(new_r))
        })
        .collect();
    finish(ens, updates)
}

/// Deterministic SGHMC flow:
/// `θ ← θ + εΣ⁻¹r`,
/// `r ← r + ε∇log p(θ) - εC(Σ⁻¹r + ∇log q(r))`.
pub fn step_psghmc_det_with(
    ens: &ParticleEnsemble,
    target: &dyn TargetModel,
    cfg: &SamplerConfig,
    scores: &dyn ScoreSource,
) -> Result<ParticleEnsemble> {
    let momentum = ens.momentum()?;
    let score_r = scores.grad_log_q(Block::Momentum, momentum);
    let eps = cfg.eps;
    let updates = (0..ens.len())
        .into_par_iter()
        .map(|i| {
            let mut g = rng::particle_rng(ens.seed, ens.iteration, i as u64);
            let theta = &ens.theta[i];
            let r = &momentum[i];
            let grad = target_grad(target, theta, cfg.sg_noise_std, &mut g);
            let velocity = &cfg.sigma_inv * r;
            let new_theta = theta + &velocity * eps;
            let new_r = r + grad * eps - &cfg.friction * (velocity + &score_r[i]) * eps;
            (new_theta, Some(new_r))
        })
        .collect();
    finish(ens, updates)
}

pub fn step_psghmc_det(
    ens: &ParticleEnsemble,
    target: &dyn TargetModel,
    cfg: &SamplerConfig,
) -> Result<ParticleEnsemble> {
    step_psghmc_det_with(ens, target, cfg, &BlobScores::from_config(cfg))
}

/// Fiber-gradient Hamiltonian SGHMC flow:
/// `θ ← θ + ε(Σ⁻¹r + ∇log q(r))`,
/// `r ← r + ε∇log p(θ) - ε∇log q(θ) - εC(Σ⁻¹r + ∇log q(r))`.
pub fn step_psghmc_fgh_with(
    ens: &ParticleEnsemble,
    target: &dyn TargetModel,
    cfg: &SamplerConfig,
    scores: &dyn ScoreSource,
) -> Result<ParticleEnsemble> {
    let momentum = ens.momentum()?;
    let score_r = scores.grad_log_q(Block::Momentum, momentum);
    let score_theta = scores.grad_log_q(Block::Theta, &ens.theta);
    let eps = cfg.eps;
    let updates = (0..ens.len())
        .into_par_iter()
        .map(|i| {
            let mut g = rng::particle_rng(ens.seed, ens.iteration, i as u64);
            let theta = &ens.theta[i];
            let r = &momentum[i];
            let grad = target_grad(target, theta, cfg.sg_noise_std, &mut g);
            let velocity = &cfg.sigma_inv * r;
            let new_theta = theta + (&velocity + &score_r[i]) * eps;
            let new_r = r + (grad - &score_theta[i]) * eps
                - &cfg.friction * (velocity + &score_r[i]) * eps;
            (new_theta, Some(new_r))
        })
        .collect();
    finish(ens, updates)
}

pub fn step_psghmc_fgh(
    ens: &ParticleEnsemble,
    target: &dyn TargetModel,
    cfg: &SamplerConfig,
) -> Result<ParticleEnsemble> {
    step_psghmc_fgh_with(ens, target, cfg, &BlobScores::from_config(cfg))
}

/// One step of the configured method.
pub fn step_with(
    ens: &ParticleEnsemble,
    target: &dyn TargetModel,
    cfg: &SamplerConfig,
    scores: &dyn ScoreSource,
) -> Result<ParticleEnsemble> {
    match cfg.method {
        Method::Blob => step_blob_with(ens, target, cfg, scores),
        Method::Sghmc => step_sghmc(ens, target, cfg),
        Method::PsghmcDet => step_psghmc_det_with(ens, target, cfg, scores),
        Method::PsghmcFgh => step_psghmc_fgh_with(ens, target, cfg, scores),
    }
}

pub fn step(ens: &ParticleEnsemble, target: &dyn TargetModel, cfg: &SamplerConfig) -> Result<ParticleEnsemble> {
    step_with(ens, target, cfg, &BlobScores::from_config(cfg))
}

/// Which iterations get a snapshot and a metrics callback.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub snapshot_every: u64,
    pub metrics_every: u64,
}

impl Schedule {
    /// Iterations `0, k, 2k, …` plus the final iteration.
    pub fn hits(every: u64, iteration: u64, n_steps: u64) -> bool {
        iteration == 0 || iteration == n_steps || (every > 0 && iteration.is_multiple_of(every))
    }

    pub fn snapshot_iterations(&self, n_steps: u64) -> Vec<u64> {
        (0..=n_steps)
            .filter(|&i| Self::hits(self.snapshot_every, i, n_steps))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub iteration: u64,
    pub theta: Vec<DVector<f64>>,
    pub momentum: Option<Vec<DVector<f64>>>,
}

impl Snapshot {
    fn of(ens: &ParticleEnsemble) -> Self {
        Self {
            iteration: ens.iteration,
            theta: ens.theta.clone(),
            momentum: ens.momentum.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub snapshots: Vec<Snapshot>,
    pub final_ensemble: ParticleEnsemble,
    pub wall_time: Duration,
}

/// A run that stopped early; `partial` holds everything recorded before the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub iteration: u64,
    pub partial: Trace,
}

/// Iterates the configured stepper `cfg.n_steps` times.
///
/// `hook` sees the ensemble at every metrics iteration (including the first
/// and last).
pub fn run(
    cfg: &SamplerConfig,
    target: &dyn TargetModel,
    scores: &dyn ScoreSource,
    ens: ParticleEnsemble,
    schedule: Schedule,
    hook: &mut dyn FnMut(&ParticleEnsemble),
) -> std::result::Result<Trace, Box<RunFailure>> {
    let start = Instant::now();
    let n_steps = cfg.n_steps;
    let base = ens.iteration;
    let mut current = ens;
    let mut snapshots = vec![Snapshot::of(&current)];
    hook(&current);
    for k in 1..=n_steps {
        match step_with(&current, target, cfg, scores) {
            Ok(next) => current = next,
            Err(error) => {
                return Err(Box::new(RunFailure {
                    error,
                    iteration: base + k,
                    partial: Trace {
                        snapshots,
                        final_ensemble: current,
                        wall_time: start.elapsed(),
                    },
                }))
            }
        }
        if Schedule::hits(schedule.snapshot_every, k, n_steps) {
            snapshots.push(Snapshot::of(&current));
        }
        if Schedule::hits(schedule.metrics_every, k, n_steps) {
            hook(&current);
        }
    }
    Ok(Trace {
        snapshots,
        final_ensemble: current,
        wall_time: start.elapsed(),
    })
}
