//! The complete recipe of diffusion-based MCMC dynamics.
//!
//! A dynamics is a pair `(D, Q)` of matrix fields, `D` symmetric PSD and `Q`
//! skew-symmetric. From it we derive the stochastic drift `V`, the
//! deterministic equivalent drift `W`, the fiber-gradient Hamiltonian drift,
//! and the generator acting on test functions.

use std::borrow::Cow;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::targets::TargetModel;

/// Step used for finite-difference divergences and Jacobi residuals.
pub const FD_STEP: f64 = 1e-5;

/// Eigenvalue floor below which `D` is declared indefinite.
pub const PSD_FLOOR: f64 = -1e-10;

pub type MatrixFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// A matrix-valued function of position.
#[derive(Clone)]
pub enum MatrixField {
    Constant(DMatrix<f64>),
    Varying {
        value: MatrixFn,
        /// Analytic row divergence `∂_j M^{ij}`; finite differences otherwise.
        divergence: Option<VectorFn>,
    },
}

impl fmt::Debug for MatrixField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatrixField::Constant(m) => f.debug_tuple("Constant").field(m).finish(),
            MatrixField::Varying { divergence, .. } => f
                .debug_struct("Varying")
                .field("analytic_divergence", &divergence.is_some())
                .finish(),
        }
    }
}

impl MatrixField {
    pub fn varying<F>(value: F) -> Self
    where
        F: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        MatrixField::Varying {
            value: Arc::new(value),
            divergence: None,
        }
    }

    pub fn varying_with_divergence<F, G>(value: F, divergence: G) -> Self
    where
        F: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        G: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        MatrixField::Varying {
            value: Arc::new(value),
            divergence: Some(Arc::new(divergence)),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, MatrixField::Constant(_))
    }

    pub fn at(&self, x: &DVector<f64>) -> Cow<'_, DMatrix<f64>> {
        match self {
            MatrixField::Constant(m) => Cow::Borrowed(m),
            MatrixField::Varying { value, .. } => Cow::Owned(value(x)),
        }
    }

    /// Row divergence `(∂_j M^{ij}(x))_i`.
    pub fn divergence(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            MatrixField::Constant(m) => DVector::zeros(m.nrows()),
            MatrixField::Varying {
                divergence: Some(div),
                ..
            } => div(x),
            MatrixField::Varying { value, .. } => {
                let n = x.len();
                let mut out = DVector::zeros(n);
                for j in 0..n {
                    let (mp, mm) = shifted(value, x, j);
                    for i in 0..n {
                        out[i] += (mp[(i, j)] - mm[(i, j)]) / (2.0 * FD_STEP);
                    }
                }
                out
            }
        }
    }

    /// `∂_l M(x)` by central differences (exactly zero for constant fields).
    fn partial(&self, x: &DVector<f64>, l: usize) -> DMatrix<f64> {
        match self {
            MatrixField::Constant(m) => DMatrix::zeros(m.nrows(), m.ncols()),
            MatrixField::Varying { value, .. } => {
                let (mp, mm) = shifted(value, x, l);
                (mp - mm) / (2.0 * FD_STEP)
            }
        }
    }
}

fn shifted(value: &MatrixFn, x: &DVector<f64>, axis: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut xp = x.clone();
    let mut xm = x.clone();
    xp[axis] += FD_STEP;
    xm[axis] -= FD_STEP;
    (value(&xp), value(&xm))
}

/// Rank structure of the diffusion matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionBlock {
    /// `D` positive definite everywhere.
    Full,
    /// `D = 0`.
    Zero,
    /// `D = diag(0, C)` with `C` an `n × n` positive definite block.
    LowerRight(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DynamicsType {
    /// Non-singular `D`: gradient flow plus Hamiltonian flow.
    Type1,
    /// `D = 0`: pure Hamiltonian flow, conserves KL.
    Type2,
    /// Singular non-zero `D`: fiber-wise stabilisation.
    Type3,
}

impl From<DiffusionBlock> for DynamicsType {
    fn from(b: DiffusionBlock) -> Self {
        match b {
            DiffusionBlock::Full => DynamicsType::Type1,
            DiffusionBlock::Zero => DynamicsType::Type2,
            DiffusionBlock::LowerRight(_) => DynamicsType::Type3,
        }
    }
}

/// A dynamics `(D, Q)` on `R^dim`.
#[derive(Clone, Debug)]
pub struct DynamicsSpec {
    name: String,
    dim: usize,
    diffusion: MatrixField,
    curl: MatrixField,
    block: DiffusionBlock,
}

impl DynamicsSpec {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        diffusion: MatrixField,
        curl: MatrixField,
        block: DiffusionBlock,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("dynamics dimension must be positive".into()));
        }
        for (label, field) in [("D", &diffusion), ("Q", &curl)] {
            if let MatrixField::Constant(m) = field {
                if m.nrows() != dim || m.ncols() != dim {
                    return Err(Error::Dimension(format!(
                        "{label} is {}x{}, expected {dim}x{dim}",
                        m.nrows(),
                        m.ncols()
                    )));
                }
            }
        }
        if let DiffusionBlock::LowerRight(n) = block {
            if n == 0 || n >= dim {
                return Err(Error::Config(format!(
                    "lower-right block size {n} must lie in 1..{dim}"
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            dim,
            diffusion,
            curl,
            block,
        })
    }

    /// Constant-matrix dynamics; the block tag is inferred from `D`.
    pub fn constant(name: impl Into<String>, d: DMatrix<f64>, q: DMatrix<f64>) -> Result<Self> {
        let dim = d.nrows();
        let block = infer_block(&d);
        Self::new(
            name,
            dim,
            MatrixField::Constant(d),
            MatrixField::Constant(q),
            block,
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn block(&self) -> DiffusionBlock {
        self.block
    }

    pub fn dynamics_type(&self) -> DynamicsType {
        self.block.into()
    }

    pub fn constant_matrices(&self) -> bool {
        self.diffusion.is_constant() && self.curl.is_constant()
    }

    pub fn diffusion(&self) -> &MatrixField {
        &self.diffusion
    }

    pub fn curl(&self) -> &MatrixField {
        &self.curl
    }

    pub fn d_at(&self, x: &DVector<f64>) -> Cow<'_, DMatrix<f64>> {
        self.diffusion.at(x)
    }

    pub fn q_at(&self, x: &DVector<f64>) -> Cow<'_, DMatrix<f64>> {
        self.curl.at(x)
    }

    pub fn div_d(&self, x: &DVector<f64>) -> DVector<f64> {
        self.diffusion.divergence(x)
    }

    pub fn div_q(&self, x: &DVector<f64>) -> DVector<f64> {
        self.curl.divergence(x)
    }
}

/// Block tag implied by a constant diffusion matrix.
///
/// Anything that is neither zero nor of the `diag(0, C)` form is tagged
/// `Full`; the regularity report then says whether it is actually definite.
pub fn infer_block(d: &DMatrix<f64>) -> DiffusionBlock {
    let n = d.nrows();
    if d.iter().all(|v| *v == 0.0) {
        return DiffusionBlock::Zero;
    }
    // leading zero rows/columns
    let mut lead = 0;
    while lead < n && (0..n).all(|k| d[(lead, k)] == 0.0 && d[(k, lead)] == 0.0) {
        lead += 1;
    }
    if lead == 0 {
        DiffusionBlock::Full
    } else {
        DiffusionBlock::LowerRight(n - lead)
    }
}

/// Langevin dynamics: `D = I`, `Q = 0`.
pub fn make_ld_spec(dim: usize) -> Result<DynamicsSpec> {
    DynamicsSpec::new(
        "ld",
        dim,
        MatrixField::Constant(DMatrix::identity(dim, dim)),
        MatrixField::Constant(DMatrix::zeros(dim, dim)),
        DiffusionBlock::Full,
    )
}

/// Canonical symplectic curl `((0, -I), (I, 0))` on `R^{2ℓ}`.
pub fn canonical_curl(l: usize) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(2 * l, 2 * l);
    for i in 0..l {
        q[(i, l + i)] = -1.0;
        q[(l + i, i)] = 1.0;
    }
    q
}

/// Hamiltonian dynamics on phase space `(θ, r)`: `D = 0`.
pub fn make_hmc_spec(l: usize) -> Result<DynamicsSpec> {
    if l == 0 {
        return Err(Error::Config("hmc needs at least one position dimension".into()));
    }
    DynamicsSpec::new(
        "hmc",
        2 * l,
        MatrixField::Constant(DMatrix::zeros(2 * l, 2 * l)),
        MatrixField::Constant(canonical_curl(l)),
        DiffusionBlock::Zero,
    )
}

/// SGHMC: same curl as HMC, friction `C` on the momentum block.
pub fn make_sghmc_spec(l: usize, c: &DMatrix<f64>) -> Result<DynamicsSpec> {
    if l == 0 {
        return Err(Error::Config("sghmc needs at least one position dimension".into()));
    }
    if c.nrows() != l {
        return Err(Error::Dimension(format!(
            "friction C is {}x{}, expected {l}x{l}",
            c.nrows(),
            c.ncols()
        )));
    }
    linalg::require_spd(c, "friction C")?;
    let mut d = DMatrix::zeros(2 * l, 2 * l);
    d.view_mut((l, l), (l, l)).copy_from(c);
    DynamicsSpec::new(
        "sghmc",
        2 * l,
        MatrixField::Constant(d),
        MatrixField::Constant(canonical_curl(l)),
        DiffusionBlock::LowerRight(l),
    )
}

fn check_point(spec: &DynamicsSpec, target: &dyn TargetModel, x: &DVector<f64>) {
    debug_assert_eq!(x.len(), spec.dim, "point dimension");
    debug_assert_eq!(target.dim(), spec.dim, "target dimension");
}

/// Drift of the recipe SDE: `V = (D + Q)∇log p + div D + div Q`.
pub fn drift_v(spec: &DynamicsSpec, target: &dyn TargetModel, x: &DVector<f64>) -> DVector<f64> {
    check_point(spec, target, x);
    let grad = target.grad_log_density(x);
    let dq = spec.d_at(x).as_ref() + spec.q_at(x).as_ref();
    dq * grad + spec.div_d(x) + spec.div_q(x)
}

/// Deterministic equivalent drift `W = D∇log(p/q) + Q∇log p + div Q`.
///
/// `grad_log_q` is the caller's estimate of `∇log q` at `x`.
pub fn drift_w(
    spec: &DynamicsSpec,
    target: &dyn TargetModel,
    grad_log_q: &DVector<f64>,
    x: &DVector<f64>,
) -> DVector<f64> {
    check_point(spec, target, x);
    let grad_p = target.grad_log_density(x);
    let log_ratio = &grad_p - grad_log_q;
    spec.d_at(x).as_ref() * log_ratio + spec.q_at(x).as_ref() * grad_p + spec.div_q(x)
}

/// Fiber-gradient Hamiltonian drift `(D + Q)∇log(p/q)`.
pub fn drift_fgh(
    spec: &DynamicsSpec,
    target: &dyn TargetModel,
    grad_log_q: &DVector<f64>,
    x: &DVector<f64>,
) -> DVector<f64> {
    check_point(spec, target, x);
    let log_ratio = target.grad_log_density(x) - grad_log_q;
    (spec.d_at(x).as_ref() + spec.q_at(x).as_ref()) * log_ratio
}

/// Outcome of probing a dynamics for the regularity conditions.
#[derive(Debug, Clone, Serialize)]
pub struct RegularityReport {
    pub dynamics_type: DynamicsType,
    pub block: DiffusionBlock,
    /// `max |Q + Qᵀ|` over probes.
    pub skew_residual: f64,
    /// `max |D - Dᵀ|` over probes.
    pub symmetry_residual: f64,
    /// Smallest eigenvalue of `D` seen at any probe.
    pub min_diffusion_eigenvalue: f64,
    pub psd_ok: bool,
    /// Jacobi-identity residual; exactly zero for constant `Q`.
    pub jacobi_residual: f64,
    pub jacobi_exact: bool,
    /// `D` matches its block tag (zero / full rank / `diag(0, C)` with `C` definite).
    pub block_conforms: bool,
    pub n_probes: usize,
}

impl RegularityReport {
    pub fn is_regular(&self, tol: f64) -> bool {
        self.skew_residual <= tol
            && self.symmetry_residual <= tol
            && self.psd_ok
            && self.block_conforms
            && self.jacobi_residual <= tol
    }
}

/// Probes skew-symmetry, PSD-ness, block structure and the Jacobi identity.
///
/// An empty probe list is treated as a single probe at the origin.
pub fn validate_regularity(spec: &DynamicsSpec, probe_points: &[DVector<f64>]) -> RegularityReport {
    let origin = [DVector::zeros(spec.dim)];
    let probes = if probe_points.is_empty() {
        &origin[..]
    } else {
        probe_points
    };
    let mut skew = 0.0_f64;
    let mut sym = 0.0_f64;
    let mut min_eig = f64::INFINITY;
    let mut jacobi = 0.0_f64;
    let mut block_ok = true;
    let jacobi_exact = spec.curl.is_constant();

    for x in probes {
        let d = spec.d_at(x);
        let q = spec.q_at(x);
        skew = skew.max(linalg::skew_residual(&q));
        sym = sym.max(linalg::asymmetry(&d));
        min_eig = min_eig.min(linalg::min_eigenvalue(&d));
        block_ok &= block_conforms(&d, spec.block);
        if !jacobi_exact {
            jacobi = jacobi.max(jacobi_residual_at(&spec.curl, x));
        }
    }

    let psd_ok = min_eig >= PSD_FLOOR;
    RegularityReport {
        dynamics_type: spec.dynamics_type(),
        block: spec.block,
        skew_residual: skew,
        symmetry_residual: sym,
        min_diffusion_eigenvalue: min_eig,
        psd_ok,
        jacobi_residual: jacobi,
        jacobi_exact,
        block_conforms: block_ok,
        n_probes: probes.len(),
    }
}

fn block_conforms(d: &DMatrix<f64>, block: DiffusionBlock) -> bool {
    let n = d.nrows();
    match block {
        DiffusionBlock::Zero => d.iter().all(|v| *v == 0.0),
        DiffusionBlock::Full => linalg::min_eigenvalue(d) > 0.0,
        DiffusionBlock::LowerRight(k) => {
            let m = n - k;
            let outside_zero = (0..n).all(|i| {
                (0..n).all(|j| (i >= m && j >= m) || d[(i, j)] == 0.0)
            });
            let c = d.view((m, m), (k, k)).into_owned();
            outside_zero && linalg::min_eigenvalue(&c) > 0.0
        }
    }
}

/// `max_{i,j,k} |Q^{il}∂_lQ^{jk} + Q^{jl}∂_lQ^{ki} + Q^{kl}∂_lQ^{ij}|` at `x`.
pub fn jacobi_residual_at(curl: &MatrixField, x: &DVector<f64>) -> f64 {
    if curl.is_constant() {
        return 0.0;
    }
    let n = x.len();
    let q = curl.at(x);
    let partials: Vec<DMatrix<f64>> = (0..n).map(|l| curl.partial(x, l)).collect();
    // s(a, b, c) = Σ_l Q^{al} ∂_l Q^{bc}
    let s = |a: usize, b: usize, c: usize| -> f64 {
        (0..n).map(|l| q[(a, l)] * partials[l][(b, c)]).sum()
    };
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                worst = worst.max((s(i, j, k) + s(j, k, i) + s(k, i, j)).abs());
            }
        }
    }
    worst
}

/// Lie–Poisson bivector of so(3): `Q(x) = [[0, x₃, -x₂], [-x₃, 0, x₁], [x₂, -x₁, 0]]`.
pub fn so3_curl() -> MatrixField {
    MatrixField::varying(|x: &DVector<f64>| {
        DMatrix::from_row_slice(3, 3, &[0.0, x[2], -x[1], -x[2], 0.0, x[0], x[1], -x[0], 0.0])
    })
}

/// A smooth test function with gradient and Hessian.
pub trait TestFunction {
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

/// `f(x) = ½ xᵀ A x + bᵀ x`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl TestFunction for Quadratic {
    fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.a * x)) + self.b.dot(x)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        0.5 * (&self.a + self.a.transpose()) * x + &self.b
    }

    fn hessian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        0.5 * (&self.a + self.a.transpose())
    }
}

/// Generator of the dynamics applied to `f` at `x`:
/// `V·∇f + D : ∇²f` (the `Q : ∇²f` term vanishes by skew-symmetry).
pub fn barbour_apply(
    spec: &DynamicsSpec,
    target: &dyn TargetModel,
    f: &dyn TestFunction,
    x: &DVector<f64>,
) -> f64 {
    let drift = drift_v(spec, target, x);
    let d = spec.d_at(x).into_owned();
    let h = f.hessian(x);
    drift.dot(&f.gradient(x)) + d.component_mul(&h).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{make_gaussian, make_synthetic_2d, Gaussian, MomentumAugmented};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    fn rotation() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0])
    }


    /// Position-dependent `D = diag(1 + x₁², 1 + x₂²)` with its analytic divergence.
    fn varying_diffusion_spec(with_div: bool) -> DynamicsSpec {
        let value = |x: &DVector<f64>| {
            DMatrix::from_diagonal(&v(&[1.0 + x[0] * x[0], 1.0 + x[1] * x[1]]))
        };
        let d = if with_div {
            MatrixField::varying_with_divergence(value, |x: &DVector<f64>| v(&[2.0 * x[0], 2.0 * x[1]]))
        } else {
            MatrixField::varying(value)
        };
        let q = MatrixField::varying(|x: &DVector<f64>| {
            let s = x[0].sin();
            DMatrix::from_row_slice(2, 2, &[0.0, -s, s, 0.0])
        });
        DynamicsSpec::new("varying", 2, d, q, DiffusionBlock::Full).unwrap()
    }

    #[test]
    fn ld_drift_is_score() {
        let t = make_synthetic_2d();
        let spec = make_ld_spec(2).unwrap();
        let x = v(&[0.4, -1.3]);
        assert_eq!(drift_v(&spec, &t, &x), t.grad_log_density(&x));
    }

    #[test]
    fn rotation_drift() {
        let t = Gaussian::standard(2);
        let spec = DynamicsSpec::constant("rot", DMatrix::zeros(2, 2), rotation()).unwrap();
        assert_eq!(drift_v(&spec, &t, &v(&[1.0, 2.0])), v(&[2.0, -1.0]));
        assert_eq!(spec.dynamics_type(), DynamicsType::Type2);
    }

    #[test]
    fn sghmc_drift_v() {
        let base = make_synthetic_2d();
        let aug = MomentumAugmented::new(&base, DMatrix::identity(2, 2)).unwrap();
        let spec = make_sghmc_spec(2, &(DMatrix::identity(2, 2) * 0.5)).unwrap();
        let out = drift_v(&spec, &aug, &v(&[0.0, 0.0, 1.0, 1.0]));
        assert_eq!(out, v(&[1.0, 1.0, -0.5, -0.5]));
    }

    #[test]
    fn drift_w_examples() {
        let p = Gaussian::standard(2);
        let ld = make_ld_spec(2).unwrap();
        let x = v(&[2.0, 0.0]);
        // q = N(0, 2I): ∇log q = -x/2
        let w = drift_w(&ld, &p, &(-&x / 2.0), &x);
        assert_eq!(w, v(&[-1.0, 0.0]));

        let zero = DynamicsSpec::constant("zero", DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(drift_w(&zero, &p, &v(&[3.0, -1.0]), &x), v(&[0.0, 0.0]));

        // q = p: D-term cancels
        let spec = DynamicsSpec::constant("c", DMatrix::identity(2, 2) * 0.5, rotation()).unwrap();
        let x = v(&[0.7, -0.2]);
        let gp = p.grad_log_density(&x);
        assert_eq!(drift_w(&spec, &p, &gp, &x), rotation() * &gp);
    }

    #[test]
    fn drift_fgh_examples() {
        let p = Gaussian::standard(4);
        let spec = make_sghmc_spec(2, &(DMatrix::identity(2, 2) * 0.5)).unwrap();
        let x = v(&[2.0, 0.0, 0.0, 2.0]);
        let grad_q = -&x / 2.0;
        // ∇log(p/q) = (-1, 0, 0, -1); θ̇ = -(r-part), ṙ = θ-part + C r-part
        let out = drift_fgh(&spec, &p, &grad_q, &x);
        assert_eq!(out, v(&[0.0, 1.0, -1.0, -0.5]));

        // q = p gives exactly zero
        let gp = p.grad_log_density(&x);
        assert!(drift_fgh(&spec, &p, &gp, &x).iter().all(|c| *c == 0.0));
    }

    #[test]
    fn fgh_minus_w_is_minus_q_grad_log_q() {
        let p = make_synthetic_2d();
        let spec = DynamicsSpec::constant("c", DMatrix::identity(2, 2) * 0.3, rotation() * 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = v(&[rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]);
            let gq = v(&[rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]);
            let diff = drift_fgh(&spec, &p, &gq, &x) - drift_w(&spec, &p, &gq, &x);
            let expected = -(rotation() * 2.0) * &gq;
            assert!((diff - expected).amax() < 1e-12);
        }
    }

    #[test]
    fn recipe_identity_v_minus_w0_is_div_d() {
        let p = make_synthetic_2d();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for spec in [
            varying_diffusion_spec(true),
            make_ld_spec(2).unwrap(),
            DynamicsSpec::constant("c", DMatrix::identity(2, 2) * 0.5, rotation()).unwrap(),
        ] {
            for _ in 0..100 {
                let x = v(&[rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]);
                let lhs = drift_v(&spec, &p, &x) - drift_w(&spec, &p, &DVector::zeros(2), &x);
                let rhs = spec.div_d(&x);
                let scale = 1.0 + drift_v(&spec, &p, &x).amax();
                assert!((lhs - rhs).amax() <= 1e-10 * scale, "{}", spec.name());
            }
        }
    }

    #[test]
    fn finite_difference_divergence_matches_analytic() {
        let a = varying_diffusion_spec(true);
        let b = varying_diffusion_spec(false);
        let x = v(&[0.3, -1.1]);
        assert!((a.div_d(&x) - b.div_d(&x)).amax() < 1e-8);
        // div Q for Q = sin(x₁)·J: row 1: ∂₂(-sin x₁) = 0; row 2: ∂₁ sin x₁ = cos x₁
        let dq = b.div_q(&x);
        assert!(dq[0].abs() < 1e-9 && (dq[1] - 0.3_f64.cos()).abs() < 1e-8);
    }

    #[test]
    fn constructors() {
        let s = make_sghmc_spec(1, &DMatrix::from_element(1, 1, 0.5)).unwrap();
        let x = v(&[0.0, 0.0]);
        assert_eq!(s.d_at(&x).into_owned(), DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.5]));
        assert_eq!(s.q_at(&x).into_owned(), DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]));
        assert_eq!(s.dynamics_type(), DynamicsType::Type3);
        assert_eq!(s.block(), DiffusionBlock::LowerRight(1));

        let h = make_hmc_spec(2).unwrap();
        assert_eq!(h.d_at(&DVector::zeros(4)).into_owned(), DMatrix::zeros(4, 4));
        assert_eq!(h.dynamics_type(), DynamicsType::Type2);

        let l = make_ld_spec(3).unwrap();
        assert_eq!(l.d_at(&DVector::zeros(3)).into_owned(), DMatrix::identity(3, 3));
        assert_eq!(l.q_at(&DVector::zeros(3)).into_owned(), DMatrix::zeros(3, 3));
        assert_eq!(l.dynamics_type(), DynamicsType::Type1);
        assert!(l.constant_matrices());
        assert_eq!(l.div_d(&DVector::zeros(3)), DVector::zeros(3));

        let bad = DMatrix::from_row_slice(1, 1, &[-0.5]);
        assert!(make_sghmc_spec(1, &bad).is_err());
    }

    #[test]
    fn block_inference() {
        assert_eq!(infer_block(&DMatrix::zeros(3, 3)), DiffusionBlock::Zero);
        assert_eq!(infer_block(&DMatrix::identity(3, 3)), DiffusionBlock::Full);
        let mut d = DMatrix::zeros(4, 4);
        d[(2, 2)] = 1.0;
        d[(3, 3)] = 2.0;
        assert_eq!(infer_block(&d), DiffusionBlock::LowerRight(2));
    }

    #[test]
    fn regularity_constant_and_so3() {
        let sghmc = make_sghmc_spec(2, &(DMatrix::identity(2, 2) * 0.5)).unwrap();
        let probes: Vec<_> = (0..5).map(|i| DVector::from_element(4, i as f64)).collect();
        let r = validate_regularity(&sghmc, &probes);
        assert_eq!(r.jacobi_residual, 0.0);
        assert!(r.jacobi_exact && r.psd_ok && r.block_conforms);
        assert!(r.is_regular(1e-12));

        let so3 = DynamicsSpec::new(
            "so3",
            3,
            MatrixField::Constant(DMatrix::zeros(3, 3)),
            so3_curl(),
            DiffusionBlock::Zero,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let probes: Vec<_> = (0..20)
            .map(|_| DVector::from_fn(3, |_, _| rng.random_range(-3.0..3.0)))
            .collect();
        let r = validate_regularity(&so3, &probes);
        assert!(r.jacobi_residual < 1e-8, "{}", r.jacobi_residual);
        assert!(!r.jacobi_exact);
    }

    #[test]
    fn non_jacobi_curl_detected() {
        // bivector of w = (-x₂, x₁, 1): w·curl w = 2, so the Jacobi identity fails
        let q = MatrixField::varying(|x: &DVector<f64>| {
            DMatrix::from_row_slice(3, 3, &[0.0, 1.0, -x[0], -1.0, 0.0, -x[1], x[0], x[1], 0.0])
        });
        let spec = DynamicsSpec::new("bad", 3, MatrixField::Constant(DMatrix::zeros(3, 3)), q, DiffusionBlock::Zero)
            .unwrap();
        let r = validate_regularity(&spec, &[v(&[1.0, 2.0, 0.5])]);
        assert!(r.jacobi_residual > 1e-3, "{}", r.jacobi_residual);
    }

    #[test]
    fn indefinite_diffusion_fails_psd() {
        let d = DMatrix::from_diagonal(&v(&[1.0, -1e-6]));
        let spec = DynamicsSpec::constant("neg", d, DMatrix::zeros(2, 2)).unwrap();
        let r = validate_regularity(&spec, &[v(&[0.0, 0.0])]);
        assert!(!r.psd_ok);
        assert!(!r.is_regular(1e-12));
    }

    #[test]
    fn symmetric_part_in_curl_detected() {
        let q = rotation() + DMatrix::from_row_slice(2, 2, &[0.0, 0.1, 0.1, 0.0]);
        let spec = DynamicsSpec::constant("broken", DMatrix::identity(2, 2), q).unwrap();
        let r = validate_regularity(&spec, &[]);
        assert!((r.skew_residual - 0.2).abs() < 1e-15);
        assert!(!r.is_regular(1e-12));
    }

    #[test]
    fn barbour_examples() {
        let p = Gaussian::standard(3);
        let ld = make_ld_spec(3).unwrap();
        let x = v(&[0.5, -1.0, 2.0]);
        // linear f = x_2
        let lin = Quadratic {
            a: DMatrix::zeros(3, 3),
            b: v(&[0.0, 1.0, 0.0]),
        };
        assert_eq!(barbour_apply(&ld, &p, &lin, &x), p.grad_log_density(&x)[1]);
        // f = ½|x|²: A f = -|x|² + M
        let half_sq = Quadratic {
            a: DMatrix::identity(3, 3),
            b: DVector::zeros(3),
        };
        let got = barbour_apply(&ld, &p, &half_sq, &x);
        assert!((got - (-x.norm_squared() + 3.0)).abs() < 1e-12);

        // D = 0: only the Hamiltonian part survives
        let t = make_gaussian(v(&[1.0, 0.0]), DMatrix::from_diagonal(&v(&[2.0, 0.5]))).unwrap();
        let spec = DynamicsSpec::constant("rot", DMatrix::zeros(2, 2), rotation()).unwrap();
        let f = Quadratic {
            a: DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]),
            b: v(&[0.1, -0.4]),
        };
        let x = v(&[0.2, 0.9]);
        let expect = (rotation() * t.grad_log_density(&x)).dot(&f.gradient(&x));
        assert!((barbour_apply(&spec, &t, &f, &x) - expect).abs() < 1e-12);
    }
}
