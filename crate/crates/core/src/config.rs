//! Experiment configuration: TOML schema, presets, validation and
//! serialization.
//!
//! ```toml
//! preset = "fig3"            # optional; the remaining keys override it
//!
//! [target]
//! name = "gaussian"          # or "synthetic2d"
//! mean = [0.0, 0.0]
//! cov = [[1.0, 0.0], [0.0, 1.0]]
//!
//! [sampler]
//! method = "psghmc-fgh"      # blob | sghmc | psghmc-det | psghmc-fgh
//! eps = 0.01
//! sigma_inv = 1.0            # scalar s means s·I
//! C = 0.5
//! n_particles = 50
//! n_steps = 10000
//! seed = 0
//! sg_noise_std = 0.0
//! init_mean = [-2.0, -7.0]
//! init_std = 0.5
//!
//! [kernel]
//! bandwidth = "median"       # or a positive number
//!
//! [output]
//! snapshot_every = 300
//! metrics_every = 300
//! reference_samples = 2000
//!
//! [dynamics]                 # optional regularity report
//! name = "custom"            # ld | hmc | sghmc | custom
//! D = [[1.0, 0.0], [0.0, 1.0]]
//! Q = [[0.0, -1.0], [1.0, 0.0]]
//! ```

use std::fmt;

use nalgebra::{DMatrix, DVector};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::linalg;
use crate::recipe::{make_hmc_spec, make_ld_spec, make_sghmc_spec, DynamicsSpec};
use crate::samplers::{Method, SamplerConfig};
use crate::smoothing::{Bandwidth, KernelConfig};
use crate::targets::{make_synthetic_2d, BuiltinTarget, Gaussian};

pub const PRESETS: [&str; 2] = ["fig3", "lda-params"];

#[derive(Debug, Clone, PartialEq)]
pub enum TargetConfig {
    Synthetic2d,
    Gaussian { mean: DVector<f64>, cov: DMatrix<f64> },
}

impl TargetConfig {
    pub fn name(&self) -> &'static str {
        match self {
            TargetConfig::Synthetic2d => "synthetic2d",
            TargetConfig::Gaussian { .. } => "gaussian",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TargetConfig::Synthetic2d => 2,
            TargetConfig::Gaussian { mean, .. } => mean.len(),
        }
    }

    pub fn build(&self) -> Result<BuiltinTarget> {
        Ok(match self {
            TargetConfig::Synthetic2d => BuiltinTarget::Synthetic2d(make_synthetic_2d()),
            TargetConfig::Gaussian { mean, cov } => {
                BuiltinTarget::Gaussian(Gaussian::new(mean.clone(), cov.clone())?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSettings {
    pub method: Method,
    pub eps: f64,
    pub sigma_inv: DMatrix<f64>,
    pub friction: DMatrix<f64>,
    pub n_particles: usize,
    pub n_steps: u64,
    pub seed: u64,
    pub sg_noise_std: f64,
    pub init_mean: DVector<f64>,
    pub init_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputSettings {
    /// 0 records only the initial and final ensembles.
    pub snapshot_every: u64,
    pub metrics_every: u64,
    pub reference_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DynamicsKind {
    Ld,
    Hmc,
    Sghmc,
    Custom,
}

impl DynamicsKind {
    fn as_str(&self) -> &'static str {
        match self {
            DynamicsKind::Ld => "ld",
            DynamicsKind::Hmc => "hmc",
            DynamicsKind::Sghmc => "sghmc",
            DynamicsKind::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsConfig {
    pub kind: DynamicsKind,
    /// Only for `custom`.
    pub matrices: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub target: TargetConfig,
    pub sampler: SamplerSettings,
    pub bandwidth: Bandwidth,
    pub output: OutputSettings,
    pub dynamics: Option<DynamicsConfig>,
}

impl ExperimentConfig {
    pub fn sampler_config(&self) -> SamplerConfig {
        let s = &self.sampler;
        let kernel = KernelConfig { bandwidth: self.bandwidth };
        SamplerConfig {
            method: s.method,
            eps: s.eps,
            sigma_inv: s.sigma_inv.clone(),
            friction: s.friction.clone(),
            kernel_theta: kernel,
            kernel_r: kernel,
            n_steps: s.n_steps,
            seed: s.seed,
            sg_noise_std: s.sg_noise_std,
        }
    }

    pub fn build_dynamics(&self) -> Option<Result<DynamicsSpec>> {
        let d = self.dynamics.as_ref()?;
        let l = self.target.dim();
        Some(match (&d.kind, &d.matrices) {
            (DynamicsKind::Ld, _) => make_ld_spec(l),
            (DynamicsKind::Hmc, _) => make_hmc_spec(l),
            (DynamicsKind::Sghmc, _) => make_sghmc_spec(l, &self.sampler.friction),
            (DynamicsKind::Custom, Some((dm, qm))) => DynamicsSpec::constant("custom", dm.clone(), qm.clone()),
            (DynamicsKind::Custom, None) => Err(Error::Config("custom dynamics needs D and Q".into())),
        })
    }

    pub fn with_method(&self, method: Method) -> Self {
        let mut c = self.clone();
        c.sampler.method = method;
        c
    }
}

/// Every problem found while reading a configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} configuration error(s):", self.0.len())?;
        for e in &self.0 {
            write!(f, "\n  - {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

impl From<ConfigErrors> for Error {
    fn from(e: ConfigErrors) -> Self {
        Error::Config(e.to_string())
    }
}

/// Named bundles of settings.
///
/// `lda-params` carries only the step size, mass, friction and ensemble
/// settings; its target is a standard 2-D Gaussian stand-in.
pub fn preset(name: &str) -> Option<ExperimentConfig> {
    match name {
        "fig3" => Some(ExperimentConfig {
            target: TargetConfig::Synthetic2d,
            sampler: SamplerSettings {
                method: Method::PsghmcFgh,
                eps: 0.01,
                sigma_inv: DMatrix::identity(2, 2),
                friction: DMatrix::identity(2, 2) * 0.5,
                n_particles: 50,
                n_steps: 10_000,
                seed: 0,
                sg_noise_std: 0.0,
                init_mean: DVector::from_vec(vec![-2.0, -7.0]),
                init_std: 0.5,
            },
            bandwidth: Bandwidth::Median,
            output: OutputSettings {
                snapshot_every: 300,
                metrics_every: 300,
                reference_samples: 2000,
            },
            dynamics: None,
        }),
        "lda-params" => Some(ExperimentConfig {
            target: TargetConfig::Gaussian {
                mean: DVector::zeros(2),
                cov: DMatrix::identity(2, 2),
            },
            sampler: SamplerSettings {
                method: Method::PsghmcFgh,
                eps: 1e-3,
                sigma_inv: DMatrix::identity(2, 2) * 300.0,
                friction: DMatrix::identity(2, 2) * 0.1,
                n_particles: 20,
                n_steps: 600,
                seed: 0,
                sg_noise_std: 0.0,
                init_mean: DVector::zeros(2),
                init_std: 1.0,
            },
            bandwidth: Bandwidth::Median,
            output: OutputSettings {
                snapshot_every: 100,
                metrics_every: 100,
                reference_samples: 2000,
            },
            dynamics: None,
        }),
        _ => None,
    }
}

struct Reader {
    errors: Vec<String>,
}

impl Reader {
    fn err(&mut self, msg: impl Into<String>) {
        self.errors.push(msg.into());
    }

    fn section<'a>(&mut self, root: &'a Table, name: &str, allowed: &[&str]) -> Option<&'a Table> {
        let value = root.get(name)?;
        let Some(table) = value.as_table() else {
            self.err(format!("[{name}] must be a table"));
            return None;
        };
        for key in table.keys() {
            if !allowed.contains(&key.as_str()) {
                self.err(format!("unknown key `{name}.{key}` (allowed: {})", allowed.join(", ")));
            }
        }
        Some(table)
    }

    fn f64(&mut self, t: Option<&Table>, sec: &str, key: &str) -> Option<f64> {
        let v = t?.get(key)?;
        match as_f64(v) {
            Some(x) => Some(x),
            None => {
                self.err(format!("`{sec}.{key}` must be a number"));
                None
            }
        }
    }

    fn u64(&mut self, t: Option<&Table>, sec: &str, key: &str) -> Option<u64> {
        let v = t?.get(key)?;
        match v.as_integer() {
            Some(i) if i >= 0 => Some(i as u64),
            _ => {
                self.err(format!("`{sec}.{key}` must be a non-negative integer"));
                None
            }
        }
    }

    fn str<'a>(&mut self, t: Option<&'a Table>, sec: &str, key: &str) -> Option<&'a str> {
        let v = t?.get(key)?;
        match v.as_str() {
            Some(s) => Some(s),
            None => {
                self.err(format!("`{sec}.{key}` must be a string"));
                None
            }
        }
    }

    fn vector(&mut self, t: Option<&Table>, sec: &str, key: &str) -> Option<DVector<f64>> {
        let v = t?.get(key)?;
        match as_vector(v) {
            Some(x) => Some(x),
            None => {
                self.err(format!("`{sec}.{key}` must be an array of numbers"));
                None
            }
        }
    }

    /// A matrix given as rows, or a scalar `s` meaning `s·I` of size `dim`.
    fn matrix(&mut self, t: Option<&Table>, sec: &str, key: &str, dim: Option<usize>) -> Option<DMatrix<f64>> {
        let v = t?.get(key)?;
        if let Some(s) = as_f64(v) {
            return match dim {
                Some(d) => Some(DMatrix::identity(d, d) * s),
                None => {
                    self.err(format!("`{sec}.{key}` is a scalar but the dimension is unknown"));
                    None
                }
            };
        }
        match as_matrix(v) {
            Some(m) => Some(m),
            None => {
                self.err(format!("`{sec}.{key}` must be a number or a square array of rows"));
                None
            }
        }
    }

    fn require<T>(&mut self, v: Option<T>, field: &str) -> Option<T> {
        if v.is_none() && !self.errors.iter().any(|e| e.contains(&format!("`{field}`"))) {
            self.err(format!("missing required field `{field}`"));
        }
        v
    }
}

fn as_f64(v: &Value) -> Option<f64> {
    v.as_float().or_else(|| v.as_integer().map(|i| i as f64))
}

fn as_vector(v: &Value) -> Option<DVector<f64>> {
    let items = v.as_array()?;
    let xs: Option<Vec<f64>> = items.iter().map(as_f64).collect();
    xs.map(DVector::from_vec)
}

fn as_matrix(v: &Value) -> Option<DMatrix<f64>> {
    let rows: Option<Vec<DVector<f64>>> = v.as_array()?.iter().map(as_vector).collect();
    let rows = rows?;
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return None;
    }
    Some(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Parses and validates a configuration, reporting every error found.
pub fn parse_config(text: &str) -> std::result::Result<ExperimentConfig, ConfigErrors> {
    let root: Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigErrors(vec![format!("invalid TOML: {}", e.message())]))?;
    let mut r = Reader { errors: Vec::new() };

    for key in root.keys() {
        if !["preset", "target", "sampler", "kernel", "output", "dynamics"].contains(&key.as_str()) {
            r.err(format!("unknown top-level key `{key}`"));
        }
    }
    let base = match root.get("preset") {
        None => None,
        Some(v) => match v.as_str().and_then(preset) {
            Some(p) => Some(p),
            None => {
                r.err(format!("unknown preset {v} (expected one of {})", PRESETS.join(", ")));
                None
            }
        },
    };

    let target_t = r.section(&root, "target", &["name", "mean", "cov"]);
    let sampler_t = r.section(
        &root,
        "sampler",
        &[
            "method",
            "eps",
            "sigma_inv",
            "C",
            "n_particles",
            "n_steps",
            "seed",
            "sg_noise_std",
            "init_mean",
            "init_std",
        ],
    );
    let kernel_t = r.section(&root, "kernel", &["bandwidth"]);
    let output_t = r.section(&root, "output", &["snapshot_every", "metrics_every", "reference_samples"]);
    let dynamics_t = r.section(&root, "dynamics", &["name", "D", "Q"]);

    // target
    let target = match (r.str(target_t, "target", "name"), &base) {
        (Some("synthetic2d"), _) => {
            for key in ["mean", "cov"] {
                if target_t.is_some_and(|t| t.contains_key(key)) {
                    r.err(format!("`target.{key}` only applies to the gaussian target"));
                }
            }
            Some(TargetConfig::Synthetic2d)
        }
        (Some("gaussian"), _) => {
            let mean = r.vector(target_t, "target", "mean");
            let dim = mean.as_ref().map(|m| m.len());
            let cov = r.matrix(target_t, "target", "cov", dim);
            let mean = r.require(mean, "target.mean");
            let cov = r.require(cov, "target.cov");
            match (mean, cov) {
                (Some(mean), Some(cov)) => {
                    if mean.is_empty() {
                        r.err("`target.mean` must not be empty");
                        None
                    } else if cov.nrows() != mean.len() {
                        r.err(format!("`target.cov` must be {0}x{0} to match `target.mean`", mean.len()));
                        None
                    } else if let Err(e) = linalg::require_spd(&cov, "`target.cov`") {
                        r.err(e.to_string());
                        None
                    } else {
                        Some(TargetConfig::Gaussian { mean, cov })
                    }
                }
                _ => None,
            }
        }
        (Some(other), _) => {
            r.err(format!("unknown target `{other}` (expected synthetic2d or gaussian)"));
            None
        }
        (None, Some(b)) => {
            if target_t.is_some_and(|t| t.contains_key("mean") || t.contains_key("cov")) {
                r.err("`target.mean`/`target.cov` need `target.name`");
            }
            Some(b.target.clone())
        }
        (None, None) => r.require(None, "target.name"),
    };
    let dim = target.as_ref().map(|t| t.dim());
    let bs = base.as_ref().map(|b| &b.sampler);

    // sampler
    let method = match r.str(sampler_t, "sampler", "method") {
        Some(s) => match s.parse::<Method>() {
            Ok(m) => Some(m),
            Err(e) => {
                r.err(format!("`sampler.method`: {e}"));
                None
            }
        },
        None => bs.map(|b| b.method),
    };
    let method = r.require(method, "sampler.method");
    let eps = r.f64(sampler_t, "sampler", "eps").or(bs.map(|b| b.eps));
    let eps = r.require(eps, "sampler.eps");
    if let Some(e) = eps {
        if !(e.is_finite() && e > 0.0) {
            r.err(format!("`sampler.eps` must be positive, got {e}"));
        }
    }
    let square = |r: &mut Reader, key: &str, fallback: Option<&DMatrix<f64>>, default: f64| {
        let m = r
            .matrix(sampler_t, "sampler", key, dim)
            .or_else(|| fallback.cloned())
            .or_else(|| dim.map(|d| DMatrix::identity(d, d) * default));
        if let (Some(m), Some(d)) = (&m, dim) {
            if m.nrows() != d {
                r.err(format!("`sampler.{key}` must be {d}x{d}"));
            } else if let Err(e) = linalg::require_spd(m, &format!("`sampler.{key}`")) {
                r.err(e.to_string());
            }
        }
        m
    };
    let sigma_inv = square(&mut r, "sigma_inv", bs.map(|b| &b.sigma_inv), 1.0);
    let friction = square(&mut r, "C", bs.map(|b| &b.friction), 0.5);
    let n_particles = r.u64(sampler_t, "sampler", "n_particles").map(|n| n as usize).or(bs.map(|b| b.n_particles));
    let n_particles = r.require(n_particles, "sampler.n_particles");
    if n_particles == Some(0) {
        r.err("`sampler.n_particles` must be at least 1");
    }
    let n_steps = r.u64(sampler_t, "sampler", "n_steps").or(bs.map(|b| b.n_steps));
    let n_steps = r.require(n_steps, "sampler.n_steps");
    let seed = r.u64(sampler_t, "sampler", "seed").or(bs.map(|b| b.seed)).unwrap_or(0);
    let sg_noise_std = r
        .f64(sampler_t, "sampler", "sg_noise_std")
        .or(bs.map(|b| b.sg_noise_std))
        .unwrap_or(0.0);
    if !(sg_noise_std.is_finite() && sg_noise_std >= 0.0) {
        r.err(format!("`sampler.sg_noise_std` must be >= 0, got {sg_noise_std}"));
    }
    let init_mean = r
        .vector(sampler_t, "sampler", "init_mean")
        .or_else(|| bs.map(|b| b.init_mean.clone()))
        .or_else(|| dim.map(DVector::zeros));
    if let (Some(m), Some(d)) = (&init_mean, dim) {
        if m.len() != d {
            r.err(format!("`sampler.init_mean` must have {d} entries"));
        }
    }
    let init_std = r.f64(sampler_t, "sampler", "init_std").or(bs.map(|b| b.init_std)).unwrap_or(1.0);
    if !(init_std.is_finite() && init_std >= 0.0) {
        r.err(format!("`sampler.init_std` must be >= 0, got {init_std}"));
    }

    // kernel
    let bandwidth = match kernel_t.and_then(|t| t.get("bandwidth")) {
        None => base.as_ref().map_or(Bandwidth::Median, |b| b.bandwidth),
        Some(Value::String(s)) if s == "median" => Bandwidth::Median,
        Some(v) => match as_f64(v) {
            Some(h) if h.is_finite() && h > 0.0 => Bandwidth::Fixed(h),
            _ => {
                r.err("`kernel.bandwidth` must be \"median\" or a positive number");
                Bandwidth::Median
            }
        },
    };

    // output
    let bo = base.as_ref().map(|b| b.output);
    let snapshot_every = r
        .u64(output_t, "output", "snapshot_every")
        .or(bo.map(|b| b.snapshot_every))
        .unwrap_or(0);
    let metrics_every = r
        .u64(output_t, "output", "metrics_every")
        .or(bo.map(|b| b.metrics_every))
        .unwrap_or(snapshot_every);
    let reference_samples = r
        .u64(output_t, "output", "reference_samples")
        .map(|n| n as usize)
        .or(bo.map(|b| b.reference_samples))
        .unwrap_or(2000);
    if reference_samples == 0 {
        r.err("`output.reference_samples` must be at least 1");
    }

    // dynamics
    let dynamics = match dynamics_t {
        None => base.as_ref().and_then(|b| b.dynamics.clone()),
        Some(t) => {
            let kind = match r.str(Some(t), "dynamics", "name") {
                Some("ld") => Some(DynamicsKind::Ld),
                Some("hmc") => Some(DynamicsKind::Hmc),
                Some("sghmc") => Some(DynamicsKind::Sghmc),
                Some("custom") => Some(DynamicsKind::Custom),
                Some(other) => {
                    r.err(format!("unknown dynamics `{other}` (expected ld, hmc, sghmc or custom)"));
                    None
                }
                None => r.require(None, "dynamics.name"),
            };
            let dm = r.matrix(Some(t), "dynamics", "D", None);
            let qm = r.matrix(Some(t), "dynamics", "Q", None);
            match kind {
                Some(DynamicsKind::Custom) => {
                    let dm = r.require(dm, "dynamics.D");
                    let qm = r.require(qm, "dynamics.Q");
                    match (dm, qm) {
                        (Some(dm), Some(qm)) if dm.nrows() == qm.nrows() => Some(DynamicsConfig {
                            kind: DynamicsKind::Custom,
                            matrices: Some((dm, qm)),
                        }),
                        (Some(_), Some(_)) => {
                            r.err("`dynamics.D` and `dynamics.Q` must have the same size");
                            None
                        }
                        _ => None,
                    }
                }
                Some(kind) => {
                    if dm.is_some() || qm.is_some() {
                        r.err("`dynamics.D`/`dynamics.Q` only apply to custom dynamics");
                    }
                    Some(DynamicsConfig { kind, matrices: None })
                }
                None => None,
            }
        }
    };

    if !r.errors.is_empty() {
        return Err(ConfigErrors(r.errors));
    }
    match (target, method, eps, sigma_inv, friction, n_particles, n_steps, init_mean) {
        (
            Some(target),
            Some(method),
            Some(eps),
            Some(sigma_inv),
            Some(friction),
            Some(n_particles),
            Some(n_steps),
            Some(init_mean),
        ) => Ok(ExperimentConfig {
            target,
            sampler: SamplerSettings {
                method,
                eps,
                sigma_inv,
                friction,
                n_particles,
                n_steps,
                seed,
                sg_noise_std,
                init_mean,
                init_std,
            },
            bandwidth,
            output: OutputSettings {
                snapshot_every,
                metrics_every,
                reference_samples,
            },
            dynamics,
        }),
        _ => Err(ConfigErrors(vec!["incomplete configuration".into()])),
    }
}

fn vector_value(v: &DVector<f64>) -> Value {
    Value::Array(v.iter().map(|x| Value::Float(*x)).collect())
}

fn matrix_value(m: &DMatrix<f64>) -> Value {
    Value::Array(
        (0..m.nrows())
            .map(|i| Value::Array((0..m.ncols()).map(|j| Value::Float(m[(i, j)])).collect()))
            .collect(),
    )
}

fn int(n: u64) -> Result<Value> {
    i64::try_from(n)
        .map(Value::Integer)
        .map_err(|_| Error::Config(format!("{n} does not fit a TOML integer")))
}

/// Fully resolved TOML; `parse_config(&serialize_config(c)?) == Ok(c)`.
pub fn serialize_config(cfg: &ExperimentConfig) -> Result<String> {
    let mut target = Table::new();
    target.insert("name".into(), Value::String(cfg.target.name().into()));
    if let TargetConfig::Gaussian { mean, cov } = &cfg.target {
        target.insert("mean".into(), vector_value(mean));
        target.insert("cov".into(), matrix_value(cov));
    }
    let s = &cfg.sampler;
    let mut sampler = Table::new();
    sampler.insert("method".into(), Value::String(s.method.as_str().into()));
    sampler.insert("eps".into(), Value::Float(s.eps));
    sampler.insert("sigma_inv".into(), matrix_value(&s.sigma_inv));
    sampler.insert("C".into(), matrix_value(&s.friction));
    sampler.insert("n_particles".into(), int(s.n_particles as u64)?);
    sampler.insert("n_steps".into(), int(s.n_steps)?);
    sampler.insert("seed".into(), int(s.seed)?);
    sampler.insert("sg_noise_std".into(), Value::Float(s.sg_noise_std));
    sampler.insert("init_mean".into(), vector_value(&s.init_mean));
    sampler.insert("init_std".into(), Value::Float(s.init_std));
    let mut kernel = Table::new();
    kernel.insert(
        "bandwidth".into(),
        match cfg.bandwidth {
            Bandwidth::Median => Value::String("median".into()),
            Bandwidth::Fixed(h) => Value::Float(h),
        },
    );
    let mut output = Table::new();
    output.insert("snapshot_every".into(), int(cfg.output.snapshot_every)?);
    output.insert("metrics_every".into(), int(cfg.output.metrics_every)?);
    output.insert("reference_samples".into(), int(cfg.output.reference_samples as u64)?);

    let mut root = Table::new();
    root.insert("target".into(), Value::Table(target));
    root.insert("sampler".into(), Value::Table(sampler));
    root.insert("kernel".into(), Value::Table(kernel));
    root.insert("output".into(), Value::Table(output));
    if let Some(d) = &cfg.dynamics {
        let mut dynamics = Table::new();
        dynamics.insert("name".into(), Value::String(d.kind.as_str().into()));
        if let Some((dm, qm)) = &d.matrices {
            dynamics.insert("D".into(), matrix_value(dm));
            dynamics.insert("Q".into(), matrix_value(qm));
        }
        root.insert("dynamics".into(), Value::Table(dynamics));
    }
    toml::to_string(&root).map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fig3_preset_values() {
        let c = parse_config("preset = \"fig3\"").unwrap();
        assert_eq!(c.sampler.eps, 0.01);
        assert_eq!(c.sampler.sigma_inv, DMatrix::identity(2, 2));
        assert_eq!(c.sampler.friction, DMatrix::identity(2, 2) * 0.5);
        assert_eq!(c.sampler.n_particles, 50);
        assert_eq!(c.sampler.init_mean, DVector::from_vec(vec![-2.0, -7.0]));
        assert_eq!(c.sampler.init_std, 0.5);
        assert_eq!(c.output.snapshot_every, 300);
        assert_eq!(c.sampler.n_steps, 10_000);
        assert_eq!(c.target, TargetConfig::Synthetic2d);
    }

    #[test]
    fn lda_preset_values() {
        let c = preset("lda-params").unwrap();
        assert_eq!(c.sampler.eps, 1e-3);
        assert_eq!(c.sampler.sigma_inv[(0, 0)], 300.0);
        assert_eq!(c.sampler.friction[(0, 0)], 0.1);
    }

    #[test]
    fn presets_round_trip() {
        for name in PRESETS {
            let c = preset(name).unwrap();
            let text = serialize_config(&c).unwrap();
            assert_eq!(parse_config(&text).unwrap(), c, "{name}");
            for m in Method::ALL {
                let c = c.with_method(m);
                assert_eq!(parse_config(&serialize_config(&c).unwrap()).unwrap(), c);
            }
        }
    }

    #[test]
    fn round_trip_with_gaussian_and_dynamics() {
        let text = r#"
            [target]
            name = "gaussian"
            mean = [0.1, -0.3]
            cov = [[2.0, 0.3], [0.3, 0.7]]
            [sampler]
            method = "sghmc"
            eps = 0.003
            sigma_inv = 2
            n_particles = 7
            n_steps = 11
            seed = 12345
            [kernel]
            bandwidth = 0.37
            [dynamics]
            name = "custom"
            D = [[1.0, 0.0], [0.0, 1.0]]
            Q = [[0.0, -1.0], [1.0, 0.0]]
        "#;
        let c = parse_config(text).unwrap();
        assert_eq!(c.sampler.sigma_inv, DMatrix::identity(2, 2) * 2.0);
        assert_eq!(c.bandwidth, Bandwidth::Fixed(0.37));
        assert_eq!(parse_config(&serialize_config(&c).unwrap()).unwrap(), c);
        assert!(c.build_dynamics().unwrap().is_ok());
    }

    #[test]
    fn empty_file_lists_required_fields() {
        let e = parse_config("").unwrap_err();
        for field in ["target.name", "sampler.method", "sampler.eps", "sampler.n_particles", "sampler.n_steps"] {
            assert!(e.0.iter().any(|m| m.contains(field)), "{field} missing from {e}");
        }
    }

    #[test]
    fn negative_eps_is_a_single_named_error() {
        let e = parse_config("preset = \"fig3\"\n[sampler]\neps = -1").unwrap_err();
        assert_eq!(e.0.len(), 1);
        assert!(e.0[0].contains("sampler.eps"));
    }

    #[test]
    fn collects_all_errors() {
        let text = r#"
            extra = 1
            [target]
            name = "banana"
            [sampler]
            method = "nuts"
            eps = 0.1
            C = [[1.0, 2.0], [2.0, 1.0]]
            n_particles = 0
            n_steps = 10
            colour = "red"
        "#;
        let e = parse_config(text).unwrap_err();
        let joined = e.to_string();
        for needle in ["extra", "banana", "nuts", "colour", "n_particles"] {
            assert!(joined.contains(needle), "{needle} not in {joined}");
        }
    }

    #[test]
    fn non_spd_friction_is_rejected() {
        let e = parse_config("preset = \"fig3\"\n[sampler]\nC = [[1.0, 2.0], [2.0, 1.0]]").unwrap_err();
        assert!(e.0[0].contains("sampler.C"));
    }
}
