//! Finite-volume density evolution on rectangular 2-D grids.
//!
//! Two evolvers share the same conservative face-flux layout with zero flux
//! through the outer boundary:
//!
//! * [`evolve_fokker_planck`]: `∂ₜq = -∂ᵢ(q Vⁱ) + ∂ᵢ∂ⱼ(q Dⁱʲ)` for the stochastic
//!   recipe dynamics.
//! * [`evolve_continuity`]: `∂ₜq = -∂ᵢ(q Wⁱ)` where `W` may depend on `∇log q`,
//!   which is read off the current grid.
//!
//! Time stepping is explicit Euler; space is second-order central.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::recipe::{drift_fgh, drift_v, drift_w, DiffusionBlock, DynamicsSpec};
use crate::targets::TargetModel;

/// Safety factor in the explicit stability bound.
pub const CFL_FACTOR: f64 = 0.2;
/// Largest tolerated drift of total mass during a run.
pub const MASS_TOLERANCE: f64 = 1e-4;
/// Cells below this fraction of the peak cell are left out of drift evaluation.
pub const ACTIVE_FRACTION: f64 = 1e-12;
/// Floor inside `log(q + floor)`.
pub const LOG_FLOOR: f64 = 1e-300;
/// Cells more negative than this abort the run.
pub const NEGATIVE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridGeometry {
    pub nx: usize,
    pub ny: usize,
    pub x_lo: f64,
    pub x_hi: f64,
    pub y_lo: f64,
    pub y_hi: f64,
}

impl GridGeometry {
    pub fn new(nx: usize, ny: usize, x: (f64, f64), y: (f64, f64)) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::Config("grid needs at least 2 cells per axis".into()));
        }
        if !(x.1 > x.0 && y.1 > y.0) {
            return Err(Error::Config("grid domain bounds must be increasing".into()));
        }
        Ok(Self {
            nx,
            ny,
            x_lo: x.0,
            x_hi: x.1,
            y_lo: y.0,
            y_hi: y.1,
        })
    }

    /// `n × n` cells on the square `[-half_width, half_width]²`.
    pub fn square(n: usize, half_width: f64) -> Result<Self> {
        Self::new(n, n, (-half_width, half_width), (-half_width, half_width))
    }

    pub fn dx(&self) -> f64 {
        (self.x_hi - self.x_lo) / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        (self.y_hi - self.y_lo) / self.ny as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dy()
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.x_lo + (i as f64 + 0.5) * self.dx(),
            self.y_lo + (j as f64 + 0.5) * self.dy(),
        )
    }

    /// Same domain with twice the resolution on each axis.
    pub fn refined(&self) -> Self {
        Self {
            nx: 2 * self.nx,
            ny: 2 * self.ny,
            ..*self
        }
    }
}

/// Cell masses of a probability density on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    pub geom: GridGeometry,
    /// Row-major in `y`: `mass[j * nx + i]`.
    pub mass: Vec<f64>,
}

impl GridDensity {
    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn density(&self, idx: usize) -> f64 {
        self.mass[idx] / self.geom.cell_area()
    }

    pub fn min_mass(&self) -> f64 {
        self.mass.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn l1_distance(&self, other: &GridDensity) -> f64 {
        debug_assert_eq!(self.geom, other.geom);
        self.mass
            .iter()
            .zip(&other.mass)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    pub fn mean(&self) -> (f64, f64) {
        let g = &self.geom;
        let (mut mx, mut my, mut total) = (0.0, 0.0, 0.0);
        for j in 0..g.ny {
            for i in 0..g.nx {
                let m = self.mass[g.index(i, j)];
                let (x, y) = g.center(i, j);
                mx += m * x;
                my += m * y;
                total += m;
            }
        }
        (mx / total, my / total)
    }

    /// Covariance of the cell-centre point masses.
    pub fn covariance(&self) -> [[f64; 2]; 2] {
        let g = &self.geom;
        let (mx, my) = self.mean();
        let (mut sxx, mut sxy, mut syy, mut total) = (0.0, 0.0, 0.0, 0.0);
        for j in 0..g.ny {
            for i in 0..g.nx {
                let m = self.mass[g.index(i, j)];
                let (x, y) = g.center(i, j);
                sxx += m * (x - mx) * (x - mx);
                sxy += m * (x - mx) * (y - my);
                syy += m * (y - my) * (y - my);
                total += m;
            }
        }
        [[sxx / total, sxy / total], [sxy / total, syy / total]]
    }

    /// Mass in the outermost ring of cells, a proxy for domain truncation.
    pub fn boundary_ring_mass(&self) -> f64 {
        let g = &self.geom;
        let mut s = 0.0;
        for j in 0..g.ny {
            for i in 0..g.nx {
                if i == 0 || j == 0 || i == g.nx - 1 || j == g.ny - 1 {
                    s += self.mass[g.index(i, j)];
                }
            }
        }
        s
    }
}

/// Evaluates a non-negative density at cell centres and normalises to unit mass.
pub fn discretize<F>(density: F, geom: &GridGeometry) -> Result<GridDensity>
where
    F: Fn(f64, f64) -> f64,
{
    let mut mass = vec![0.0; geom.n_cells()];
    for j in 0..geom.ny {
        for i in 0..geom.nx {
            let (x, y) = geom.center(i, j);
            let v = density(x, y);
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "density must be finite and non-negative, got {v} at ({x}, {y})"
                )));
            }
            mass[geom.index(i, j)] = v;
        }
    }
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroDensity);
    }
    mass.iter_mut().for_each(|m| *m /= total);
    Ok(GridDensity { geom: *geom, mass })
}

/// Grid-normalised target, evaluated through `log p` shifted by its grid maximum.
pub fn discretize_target(target: &dyn TargetModel, geom: &GridGeometry) -> Result<GridDensity> {
    if target.dim() != 2 {
        return Err(Error::Dimension(format!(
            "grid oracle is 2-D, target has dim {}",
            target.dim()
        )));
    }
    let mut logs = vec![0.0; geom.n_cells()];
    for j in 0..geom.ny {
        for i in 0..geom.nx {
            let (x, y) = geom.center(i, j);
            logs[geom.index(i, j)] = target.log_density(&DVector::from_vec(vec![x, y]));
        }
    }
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut mass: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = mass.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::ZeroDensity);
    }
    mass.iter_mut().for_each(|m| *m /= total);
    Ok(GridDensity { geom: *geom, mass })
}

/// `Σ q log(q / p)` over cells, with `0 log 0 = 0`.
///
/// Returns `+∞` when `q` puts mass on a cell where `p` has none.
pub fn kl_between(q: &GridDensity, p: &GridDensity) -> f64 {
    let mut kl = 0.0;
    for (&qm, &pm) in q.mass.iter().zip(&p.mass) {
        if qm <= 0.0 {
            continue;
        }
        if pm <= 0.0 {
            return f64::INFINITY;
        }
        kl += qm * (qm / pm).ln();
    }
    kl
}

/// KL divergence of `q` from the grid-normalised target.
pub fn kl_to(q: &GridDensity, target: &dyn TargetModel) -> Result<f64> {
    let p = discretize_target(target, &q.geom)?;
    Ok(kl_between(q, &p))
}

/// Recorded states of an evolution.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<GridDensity>,
    pub dt: f64,
    pub n_steps: usize,
}

impl Trajectory {
    pub fn last(&self) -> &GridDensity {
        self.states.last().expect("trajectory holds the initial state")
    }

    /// `max_t ‖q_t - reference‖₁`.
    pub fn max_l1_from(&self, reference: &GridDensity) -> f64 {
        self.states
            .iter()
            .map(|s| s.l1_distance(reference))
            .fold(0.0, f64::max)
    }
}

/// Number of Euler steps covering `[0, t_end]` with steps no longer than `dt`.
fn step_count(dt: f64, t_end: f64) -> Result<(usize, f64)> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    if !(t_end.is_finite() && t_end >= 0.0) {
        return Err(Error::Config(format!("T must be non-negative, got {t_end}")));
    }
    let n = (t_end / dt - 1e-9).ceil().max(0.0) as usize;
    let dt_eff = if n == 0 { dt } else { t_end / n as f64 };
    Ok((n, dt_eff))
}

fn stability_bound(geom: &GridGeometry, max_diffusion: f64, max_speed: f64) -> f64 {
    let h = geom.dx().min(geom.dy());
    let diffusive = if max_diffusion > 0.0 {
        h * h / (2.0 * max_diffusion)
    } else {
        f64::INFINITY
    };
    let advective = if max_speed > 0.0 { h / max_speed } else { f64::INFINITY };
    CFL_FACTOR * diffusive.min(advective)
}

fn check_stability(dt: f64, bound: f64) -> Result<()> {
    if dt > bound {
        Err(Error::Stability { dt, bound })
    } else {
        Ok(())
    }
}

fn point(x: f64, y: f64) -> DVector<f64> {
    DVector::from_vec(vec![x, y])
}

/// Applies one conservative update given face fluxes.
///
/// `fx[j * (nx + 1) + i]` is the flux through the left face of cell `i`;
/// `fy[j * nx + i]` through the bottom face of row `j`. Boundary faces are zero.
fn apply_fluxes(q: &mut GridDensity, density: &[f64], fx: &[f64], fy: &[f64], dt: f64) {
    let g = q.geom;
    let (dx, dy, area) = (g.dx(), g.dy(), g.cell_area());
    for j in 0..g.ny {
        for i in 0..g.nx {
            let div = (fx[j * (g.nx + 1) + i + 1] - fx[j * (g.nx + 1) + i]) / dx
                + (fy[(j + 1) * g.nx + i] - fy[j * g.nx + i]) / dy;
            let idx = g.index(i, j);
            q.mass[idx] = (density[idx] - dt * div) * area;
        }
    }
}

fn guard(q: &GridDensity, initial_mass: f64, step: usize) -> Result<()> {
    let drift = (q.total_mass() - initial_mass).abs();
    if !drift.is_finite() || drift > MASS_TOLERANCE {
        return Err(Error::MassDrift { drift, step });
    }
    let low = q.min_mass();
    if low < -NEGATIVE_TOLERANCE {
        return Err(Error::NegativeMass { value: low, step });
    }
    Ok(())
}

/// Central difference along one axis at a cell, one-sided at the boundary.
fn axis_derivative(values: &[f64], g: &GridGeometry, i: usize, j: usize, along_x: bool) -> f64 {
    let (n, k, h) = if along_x { (g.nx, i, g.dx()) } else { (g.ny, j, g.dy()) };
    let at = |k: usize| {
        if along_x {
            values[g.index(k, j)]
        } else {
            values[g.index(i, k)]
        }
    };
    if k == 0 {
        (at(1) - at(0)) / h
    } else if k == n - 1 {
        (at(n - 1) - at(n - 2)) / h
    } else {
        (at(k + 1) - at(k - 1)) / (2.0 * h)
    }
}

/// Explicit solver for the Fokker–Planck equation of a recipe dynamics.
pub struct FokkerPlanck {
    geom: GridGeometry,
    /// Drift at x-faces and y-faces (normal components).
    vx: Vec<f64>,
    vy: Vec<f64>,
    /// Diffusion matrix entries at cell centres: `[dxx, dxy, dyx, dyy]`.
    d: Vec<[f64; 4]>,
    max_diffusion: f64,
    max_speed: f64,
}

impl FokkerPlanck {
    pub fn new(spec: &DynamicsSpec, target: &dyn TargetModel, geom: &GridGeometry) -> Result<Self> {
        if spec.dim() != 2 || target.dim() != 2 {
            return Err(Error::Dimension("grid oracle needs 2-D dynamics and target".into()));
        }
        let g = *geom;
        let mut vx = vec![0.0; (g.nx + 1) * g.ny];
        let mut vy = vec![0.0; g.nx * (g.ny + 1)];
        let mut max_speed = 0.0_f64;
        for j in 0..g.ny {
            for i in 1..g.nx {
                let (x, y) = g.center(i, j);
                let v = drift_v(spec, target, &point(x - 0.5 * g.dx(), y));
                max_speed = max_speed.max(v.norm());
                vx[j * (g.nx + 1) + i] = v[0];
            }
        }
        for j in 1..g.ny {
            for i in 0..g.nx {
                let (x, y) = g.center(i, j);
                let v = drift_v(spec, target, &point(x, y - 0.5 * g.dy()));
                max_speed = max_speed.max(v.norm());
                vy[j * g.nx + i] = v[1];
            }
        }
        let mut d = vec![[0.0; 4]; g.n_cells()];
        let mut max_diffusion = 0.0_f64;
        for j in 0..g.ny {
            for i in 0..g.nx {
                let (x, y) = g.center(i, j);
                let m = spec.d_at(&point(x, y));
                max_diffusion = max_diffusion.max(linalg::spectral_radius_sym(&m));
                d[g.index(i, j)] = [m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]];
            }
        }
        Ok(Self {
            geom: g,
            vx,
            vy,
            d,
            max_diffusion,
            max_speed,
        })
    }

    pub fn stability_bound(&self) -> f64 {
        stability_bound(&self.geom, self.max_diffusion, self.max_speed)
    }

    pub fn step(&self, q: &mut GridDensity, dt: f64) {
        let g = self.geom;
        let area = g.cell_area();
        let rho: Vec<f64> = q.mass.iter().map(|m| m / area).collect();
        let comp = |c: usize| -> Vec<f64> { rho.iter().zip(&self.d).map(|(r, d)| r * d[c]).collect() };
        let (qxx, qxy, qyx, qyy) = (comp(0), comp(1), comp(2), comp(3));

        let mut fx = vec![0.0; (g.nx + 1) * g.ny];
        let mut fy = vec![0.0; g.nx * (g.ny + 1)];
        for j in 0..g.ny {
            for i in 1..g.nx {
                let (a, b) = (g.index(i - 1, j), g.index(i, j));
                let q_face = 0.5 * (rho[a] + rho[b]);
                let d_xx = (qxx[b] - qxx[a]) / g.dx();
                let d_xy = 0.5
                    * (axis_derivative(&qxy, &g, i - 1, j, false) + axis_derivative(&qxy, &g, i, j, false));
                fx[j * (g.nx + 1) + i] = q_face * self.vx[j * (g.nx + 1) + i] - d_xx - d_xy;
            }
        }
        for j in 1..g.ny {
            for i in 0..g.nx {
                let (a, b) = (g.index(i, j - 1), g.index(i, j));
                let q_face = 0.5 * (rho[a] + rho[b]);
                let d_yy = (qyy[b] - qyy[a]) / g.dy();
                let d_yx = 0.5
                    * (axis_derivative(&qyx, &g, i, j - 1, true) + axis_derivative(&qyx, &g, i, j, true));
                fy[j * g.nx + i] = q_face * self.vy[j * g.nx + i] - d_yy - d_yx;
            }
        }
        apply_fluxes(q, &rho, &fx, &fy, dt);
    }
}

/// Drift as a function of position and the local `∇log q`.
pub type DriftField<'a> = dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Sync + 'a;

/// Explicit solver for the continuity equation `∂ₜq = -∇·(qW)`.
pub struct Continuity<'a> {
    geom: GridGeometry,
    drift: &'a DriftField<'a>,
    /// Largest diffusion implied by the `∇log q` dependence of the drift.
    diffusion_bound: f64,
}

struct FaceDrift {
    fx: Vec<f64>,
    fy: Vec<f64>,
    max_speed: f64,
}

impl<'a> Continuity<'a> {
    pub fn new(geom: &GridGeometry, drift: &'a DriftField<'a>, diffusion_bound: f64) -> Self {
        Self {
            geom: *geom,
            drift,
            diffusion_bound,
        }
    }

    fn fluxes(&self, q: &GridDensity) -> (Vec<f64>, FaceDrift) {
        let g = self.geom;
        let area = g.cell_area();
        let rho: Vec<f64> = q.mass.iter().map(|m| m / area).collect();
        let peak = rho.iter().copied().fold(0.0, f64::max);
        let active: Vec<bool> = rho.iter().map(|r| *r >= ACTIVE_FRACTION * peak && *r > 0.0).collect();
        let log_q: Vec<f64> = rho.iter().map(|r| (r.max(0.0) + LOG_FLOOR).ln()).collect();

        // derivative of log q along an axis, restricted to active cells
        let transverse = |i: usize, j: usize, along_x: bool| -> f64 {
            let (n, k, h) = if along_x { (g.nx, i, g.dx()) } else { (g.ny, j, g.dy()) };
            let cell = |k: usize| if along_x { g.index(k, j) } else { g.index(i, k) };
            let lo = (k > 0 && active[cell(k - 1)]).then(|| k - 1);
            let hi = (k + 1 < n && active[cell(k + 1)]).then_some(k + 1);
            match (lo, hi) {
                (Some(a), Some(b)) => (log_q[cell(b)] - log_q[cell(a)]) / (2.0 * h),
                (Some(a), None) => (log_q[cell(k)] - log_q[cell(a)]) / h,
                (None, Some(b)) => (log_q[cell(b)] - log_q[cell(k)]) / h,
                (None, None) => 0.0,
            }
        };

        let x_faces: Vec<(f64, f64)> = (0..g.ny)
            .into_par_iter()
            .flat_map_iter(|j| {
                let mut row = vec![(0.0, 0.0); g.nx + 1];
                for (i, slot) in row.iter_mut().enumerate().take(g.nx).skip(1) {
                    let (a, b) = (g.index(i - 1, j), g.index(i, j));
                    if !(active[a] && active[b]) {
                        continue;
                    }
                    let gx = (log_q[b] - log_q[a]) / g.dx();
                    let gy = 0.5 * (transverse(i - 1, j, false) + transverse(i, j, false));
                    let (x, y) = g.center(i, j);
                    let w = (self.drift)(&point(x - 0.5 * g.dx(), y), &point(gx, gy));
                    *slot = (0.5 * (rho[a] + rho[b]) * w[0], w.norm());
                }
                row
            })
            .collect();
        let y_faces: Vec<(f64, f64)> = (0..=g.ny)
            .into_par_iter()
            .flat_map_iter(|j| {
                let mut row = vec![(0.0, 0.0); g.nx];
                if j == 0 || j == g.ny {
                    return row;
                }
                for (i, slot) in row.iter_mut().enumerate() {
                    let (a, b) = (g.index(i, j - 1), g.index(i, j));
                    if !(active[a] && active[b]) {
                        continue;
                    }
                    let gy = (log_q[b] - log_q[a]) / g.dy();
                    let gx = 0.5 * (transverse(i, j - 1, true) + transverse(i, j, true));
                    let (x, y) = g.center(i, j);
                    let w = (self.drift)(&point(x, y - 0.5 * g.dy()), &point(gx, gy));
                    *slot = (0.5 * (rho[a] + rho[b]) * w[1], w.norm());
                }
                row
            })
            .collect();
        let max_speed = x_faces
            .iter()
            .chain(&y_faces)
            .map(|f| f.1)
            .fold(0.0, f64::max);
        let face = FaceDrift {
            fx: x_faces.into_iter().map(|f| f.0).collect(),
            fy: y_faces.into_iter().map(|f| f.0).collect(),
            max_speed,
        };
        (rho, face)
    }

    /// Stability bound evaluated at state `q`.
    pub fn stability_bound(&self, q: &GridDensity) -> f64 {
        let (_, face) = self.fluxes(q);
        stability_bound(&self.geom, self.diffusion_bound, face.max_speed)
    }

    pub fn step(&self, q: &mut GridDensity, dt: f64) {
        let (rho, face) = self.fluxes(q);
        apply_fluxes(q, &rho, &face.fx, &face.fy, dt);
    }
}

/// Record cadence so that roughly `n_records` states (plus the initial one) are kept.
fn record_every(n_steps: usize, n_records: usize) -> usize {
    if n_records == 0 {
        usize::MAX
    } else {
        n_steps.div_ceil(n_records).max(1)
    }
}

fn evolve<F>(
    q0: &GridDensity,
    dt: f64,
    t_end: f64,
    n_records: usize,
    mut step: F,
) -> Result<Trajectory>
where
    F: FnMut(&mut GridDensity, f64),
{
    let (n, dt) = step_count(dt, t_end)?;
    let every = record_every(n, n_records);
    let initial_mass = q0.total_mass();
    let mut q = q0.clone();
    let mut times = vec![0.0];
    let mut states = vec![q.clone()];
    for k in 1..=n {
        step(&mut q, dt);
        guard(&q, initial_mass, k)?;
        if k % every == 0 || k == n {
            times.push(k as f64 * dt);
            states.push(q.clone());
        }
    }
    Ok(Trajectory {
        times,
        states,
        dt,
        n_steps: n,
    })
}

/// Fokker–Planck evolution of `q0` under the recipe dynamics `spec`.
///
/// Keeps about `n_records` intermediate states besides the initial one.
pub fn evolve_fokker_planck(
    q0: &GridDensity,
    spec: &DynamicsSpec,
    target: &dyn TargetModel,
    dt: f64,
    t_end: f64,
    n_records: usize,
) -> Result<Trajectory> {
    let fp = FokkerPlanck::new(spec, target, &q0.geom)?;
    check_stability(step_count(dt, t_end)?.1, fp.stability_bound())?;
    evolve(q0, dt, t_end, n_records, |q, h| fp.step(q, h))
}

/// Continuity evolution of `q0` under `drift(x, ∇log q)`.
///
/// `diffusion_bound` bounds the diffusion that the `∇log q` term induces (for
/// `W = D∇log(p/q) + …` it is the largest eigenvalue of `D`).
pub fn evolve_continuity(
    q0: &GridDensity,
    drift: &DriftField<'_>,
    diffusion_bound: f64,
    dt: f64,
    t_end: f64,
    n_records: usize,
) -> Result<Trajectory> {
    let cont = Continuity::new(&q0.geom, drift, diffusion_bound);
    check_stability(step_count(dt, t_end)?.1, cont.stability_bound(q0))?;
    evolve(q0, dt, t_end, n_records, |q, h| cont.step(q, h))
}

fn max_diffusion(spec: &DynamicsSpec, geom: &GridGeometry) -> f64 {
    let mut worst = 0.0_f64;
    for j in 0..geom.ny {
        for i in 0..geom.nx {
            let (x, y) = geom.center(i, j);
            worst = worst.max(linalg::spectral_radius_sym(&spec.d_at(&point(x, y))));
        }
    }
    worst
}

/// Continuity evolution with the deterministic equivalent drift `W`.
pub fn evolve_deterministic_equivalent(
    q0: &GridDensity,
    spec: &DynamicsSpec,
    target: &dyn TargetModel,
    dt: f64,
    t_end: f64,
    n_records: usize,
) -> Result<Trajectory> {
    let drift = |x: &DVector<f64>, gq: &DVector<f64>| drift_w(spec, target, gq, x);
    evolve_continuity(q0, &drift, max_diffusion(spec, &q0.geom), dt, t_end, n_records)
}

/// Continuity evolution with the fiber-gradient Hamiltonian drift.
pub fn evolve_fgh(
    q0: &GridDensity,
    spec: &DynamicsSpec,
    target: &dyn TargetModel,
    dt: f64,
    t_end: f64,
    n_records: usize,
) -> Result<Trajectory> {
    let drift = |x: &DVector<f64>, gq: &DVector<f64>| drift_fgh(spec, target, gq, x);
    evolve_continuity(q0, &drift, max_diffusion(spec, &q0.geom), dt, t_end, n_records)
}

#[derive(Debug, Clone, Serialize)]
pub struct Lemma1Report {
    pub max_l1_gap: f64,
    pub final_l1_gap: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub nx: usize,
    pub ny: usize,
}

/// Runs the Fokker–Planck and deterministic-equivalent evolutions side by side
/// and reports the largest L1 gap between them.
pub fn compare_lemma1(
    spec: &DynamicsSpec,
    target: &dyn TargetModel,
    q0: &GridDensity,
    dt: f64,
    t_end: f64,
) -> Result<Lemma1Report> {
    let geom = q0.geom;
    let fp = FokkerPlanck::new(spec, target, &geom)?;
    let drift = |x: &DVector<f64>, gq: &DVector<f64>| drift_w(spec, target, gq, x);
    let cont = Continuity::new(&geom, &drift, max_diffusion(spec, &geom));
    let (n, dt) = step_count(dt, t_end)?;
    check_stability(dt, fp.stability_bound())?;
    check_stability(dt, cont.stability_bound(q0))?;

    let initial_mass = q0.total_mass();
    let mut a = q0.clone();
    let mut b = q0.clone();
    let mut max_gap = 0.0_f64;
    for k in 1..=n {
        fp.step(&mut a, dt);
        cont.step(&mut b, dt);
        guard(&a, initial_mass, k)?;
        guard(&b, initial_mass, k)?;
        max_gap = max_gap.max(a.l1_distance(&b));
    }
    Ok(Lemma1Report {
        max_l1_gap: max_gap,
        final_l1_gap: a.l1_distance(&b),
        dt,
        n_steps: n,
        nx: geom.nx,
        ny: geom.ny,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct KlReport {
    pub times: Vec<f64>,
    pub kl: Vec<f64>,
    pub kl_initial: f64,
    /// `max_t |KL(q_t) - KL(q_0)|`.
    pub max_abs_change: f64,
    /// Every recorded value is no larger than its predecessor.
    pub non_increasing: bool,
}

/// KL from the target along the fGH continuity evolution.
pub fn kl_evolution(
    spec: &DynamicsSpec,
    target: &dyn TargetModel,
    q0: &GridDensity,
    dt: f64,
    t_end: f64,
    n_records: usize,
) -> Result<KlReport> {
    let p = discretize_target(target, &q0.geom)?;
    let traj = evolve_fgh(q0, spec, target, dt, t_end, n_records)?;
    let kl: Vec<f64> = traj.states.iter().map(|s| kl_between(s, &p)).collect();
    let kl_initial = kl[0];
    let max_abs_change = kl.iter().map(|k| (k - kl_initial).abs()).fold(0.0, f64::max);
    let non_increasing = kl.windows(2).all(|w| w[1] <= w[0]);
    Ok(KlReport {
        times: traj.times,
        kl,
        kl_initial,
        max_abs_change,
        non_increasing,
    })
}

/// KL conservation for a pure-Hamiltonian (`D = 0`) dynamics.
pub fn kl_conservation_check(
    spec: &DynamicsSpec,
    target: &dyn TargetModel,
    q0: &GridDensity,
    dt: f64,
    t_end: f64,
    n_records: usize,
) -> Result<KlReport> {
    if spec.block() != DiffusionBlock::Zero {
        return Err(Error::Config(format!(
            "KL conservation needs D = 0, `{}` has block {:?}",
            spec.name(),
            spec.block()
        )));
    }
    kl_evolution(spec, target, q0, dt, t_end, n_records)
}

/// Constant `2 × 2` dynamics helper used by the oracle suites.
pub fn planar_spec(name: &str, diffusion: f64, rotation: f64) -> Result<DynamicsSpec> {
    let d = DMatrix::identity(2, 2) * diffusion;
    let q = DMatrix::from_row_slice(2, 2, &[0.0, -rotation, rotation, 0.0]);
    DynamicsSpec::constant(name, d, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recipe::make_ld_spec;
    use crate::targets::Gaussian;

    fn gaussian_2d(mx: f64, my: f64, var: f64) -> Gaussian {
        Gaussian::new(DVector::from_vec(vec![mx, my]), DMatrix::identity(2, 2) * var).unwrap()
    }

    #[test]
    fn uniform_and_zero_densities() {
        let g = GridGeometry::new(8, 5, (0.0, 1.0), (-1.0, 1.0)).unwrap();
        let q = discretize(|_, _| 3.0, &g).unwrap();
        assert!(q.mass.iter().all(|m| (m - 1.0 / 40.0).abs() < 1e-17));
        assert!(matches!(discretize(|_, _| 0.0, &g), Err(Error::ZeroDensity)));
        assert!(discretize(|_, _| -1.0, &g).is_err());
    }

    #[test]
    fn gaussian_tail_mass_matches_analytic_tail() {
        let g = GridGeometry::square(64, 3.0).unwrap();
        let q = discretize(|x, y| (-(x * x + y * y) / 0.5).exp(), &g).unwrap();
        let mut outside = 0.0;
        for j in 0..g.ny {
            for i in 0..g.nx {
                let (x, y) = g.center(i, j);
                if x * x + y * y > 2.5 * 2.5 {
                    outside += q.mass[g.index(i, j)];
                }
            }
        }
        // P(|x| > r) = exp(-r² / 2σ²) with σ² = 0.25
        let analytic = (-12.5f64).exp();
        assert!(outside > 0.5 * analytic && outside < 2.0 * analytic, "{outside} vs {analytic}");
    }

    #[test]
    fn kl_oracles() {
        let g = GridGeometry::square(128, 8.0).unwrap();
        let p = gaussian_2d(0.0, 0.0, 2.0);
        let p_hat = discretize_target(&p, &g).unwrap();
        assert!(kl_to(&p_hat, &p).unwrap().abs() < 1e-10);
        let q = discretize_target(&Gaussian::standard(2), &g).unwrap();
        let analytic = 2f64.ln() - 0.5;
        assert!((kl_to(&q, &p).unwrap() - analytic).abs() < 1e-3);

        let left = discretize(|x, _| if x < 0.0 { 1.0 } else { 0.0 }, &g).unwrap();
        let right = discretize(|x, _| if x > 0.0 { 1.0 } else { 0.0 }, &g).unwrap();
        assert_eq!(kl_between(&left, &right), f64::INFINITY);
    }

    #[test]
    fn zero_dynamics_is_constant() {
        let g = GridGeometry::square(32, 4.0).unwrap();
        let p = Gaussian::standard(2);
        let q0 = discretize_target(&gaussian_2d(1.0, 0.0, 0.5), &g).unwrap();
        let spec = planar_spec("zero", 0.0, 0.0).unwrap();
        let traj = evolve_fokker_planck(&q0, &spec, &p, 0.05, 1.0, 4).unwrap();
        assert!(traj.max_l1_from(&q0) < 1e-15);
        let zero = |x: &DVector<f64>, _: &DVector<f64>| DVector::zeros(x.len());
        let traj = evolve_continuity(&q0, &zero, 0.0, 0.05, 1.0, 4).unwrap();
        assert!(traj.max_l1_from(&q0) < 1e-15);
        assert_eq!(traj.states.len(), 5);
    }

    #[test]
    fn heat_kernel_variance_growth() {
        let g = GridGeometry::square(64, 6.0).unwrap();
        let flat = gaussian_2d(0.0, 0.0, 1e8);
        let q0 = discretize_target(&gaussian_2d(0.0, 0.0, 0.25), &g).unwrap();
        let spec = planar_spec("heat", 1.0, 0.0).unwrap();
        let t = 0.5;
        let traj = evolve_fokker_planck(&q0, &spec, &flat, 2e-3, t, 1).unwrap();
        let c0 = q0.covariance();
        let c1 = traj.last().covariance();
        for k in 0..2 {
            let growth = c1[k][k] - c0[k][k];
            assert!((growth - 2.0 * t).abs() < 0.02 * 2.0 * t, "growth {growth}");
        }
    }

    #[test]
    fn rigid_rotation_preserves_radial_density() {
        let g = GridGeometry::square(64, 5.0).unwrap();
        let q0 = discretize_target(&Gaussian::standard(2), &g).unwrap();
        let rotate = |x: &DVector<f64>, _: &DVector<f64>| DVector::from_vec(vec![-x[1], x[0]]);
        let traj = evolve_continuity(&q0, &rotate, 0.0, 2e-3, 1.0, 10).unwrap();
        assert!(traj.max_l1_from(&q0) < 5e-3, "{}", traj.max_l1_from(&q0));
    }

    #[test]
    fn stationarity_and_mass_conservation() {
        let g = GridGeometry::square(32, 5.0).unwrap();
        let p = Gaussian::standard(2);
        let p_hat = discretize_target(&p, &g).unwrap();
        let spec = make_ld_spec(2).unwrap();
        let fp = evolve_fokker_planck(&p_hat, &spec, &p, 4e-3, 1.0, 10).unwrap();
        let w = evolve_deterministic_equivalent(&p_hat, &spec, &p, 4e-3, 1.0, 10).unwrap();
        assert!(fp.max_l1_from(&p_hat) < 2e-2);
        assert!(w.max_l1_from(&p_hat) < 1e-12);
        for s in fp.states.iter().chain(&w.states) {
            assert!((s.total_mass() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn unstable_step_is_rejected() {
        let g = GridGeometry::square(32, 5.0).unwrap();
        let p = Gaussian::standard(2);
        let q0 = discretize_target(&p, &g).unwrap();
        let spec = make_ld_spec(2).unwrap();
        let r = evolve_fokker_planck(&q0, &spec, &p, 0.1, 1.0, 1);
        assert!(matches!(r, Err(Error::Stability { .. })));
        assert!(compare_lemma1(&spec, &p, &q0, 0.1, 0.5).is_err());
        assert!(evolve_fokker_planck(&q0, &spec, &p, -1.0, 1.0, 1).is_err());
    }

    #[test]
    fn kl_checks() {
        let g = GridGeometry::square(32, 5.0).unwrap();
        let p = Gaussian::standard(2);
        let q0 = discretize_target(&gaussian_2d(1.0, -0.5, 0.49), &g).unwrap();
        let ld = make_ld_spec(2).unwrap();
        assert!(kl_conservation_check(&ld, &p, &q0, 1e-3, 0.1, 5).is_err());
        let report = kl_evolution(&ld, &p, &q0, 4e-3, 0.5, 20).unwrap();
        assert!(report.non_increasing);
        assert!(report.kl.last().unwrap() < &(0.5 * report.kl_initial));
        // central advection needs the finer grid to stay non-negative
        let g = GridGeometry::square(64, 5.0).unwrap();
        let q0 = discretize_target(&gaussian_2d(1.0, -0.5, 0.49), &g).unwrap();
        let rot = planar_spec("rotation", 0.0, 1.0).unwrap();
        let report = kl_conservation_check(&rot, &p, &q0, 2e-3, 0.5, 20).unwrap();
        assert!(report.max_abs_change < 0.02 * report.kl_initial);
    }
}
