//! Configuration-driven experiment runs and their on-disk artifacts.
//!
//! A run directory holds `trace.csv`, `metrics.csv`, `meta.json` and, with
//! plotting enabled, `plots/iter_NNNNN.png`. Every file is written to a
//! temporary sibling and renamed into place. `meta.json` is written with
//! status `running` before anything else, so an interrupted run is never
//! mistaken for a finished one.

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use nalgebra::DVector;
use serde::Serialize;
use serde_json::json;

use crate::config::{preset, serialize_config, ExperimentConfig, TargetConfig};
use crate::diagnostics::{metric_report, reference_sample, MetricReport};
use crate::error::{Error, Result};
use crate::linalg;
use crate::recipe::{validate_regularity, RegularityReport};
use crate::samplers::{self, init_ensemble, BlobScores, Method, Schedule, Snapshot, Trace};
use crate::smoothing::KernelConfig;

/// Offset separating the reference-sample stream from the sampler seed.
const REFERENCE_SEED_OFFSET: u64 = 0x0123_4567_89ab_cdef;

/// Everything a run produced, in memory.
#[derive(Debug)]
pub struct Simulation {
    pub trace: Trace,
    pub metrics: Vec<MetricReport>,
    pub reference: Vec<DVector<f64>>,
    /// `(iteration, message)` when a step was rejected.
    pub failure: Option<(u64, String)>,
    pub regularity: Option<RegularityReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub method: Method,
    pub out_dir: PathBuf,
    pub failure: Option<String>,
    pub n_snapshots: usize,
    pub final_metrics: Option<MetricReport>,
    pub wall_time_s: f64,
}

impl RunOutcome {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }
}

/// Seed used for the reference draw of a run with sampler seed `seed`.
pub fn reference_seed(seed: u64) -> u64 {
    seed ^ REFERENCE_SEED_OFFSET
}

/// Runs the configured sampler without touching the filesystem.
pub fn simulate(cfg: &ExperimentConfig) -> Result<Simulation> {
    let target = cfg.target.build()?;
    let scfg = cfg.sampler_config();
    let dim = cfg.target.dim();
    scfg.validate(dim)?;
    let regularity = cfg
        .build_dynamics()
        .transpose()?
        .map(|spec| validate_regularity(&spec, &[]));

    let reference = reference_sample(&target, cfg.output.reference_samples, reference_seed(cfg.sampler.seed))?;
    let momentum_cov = if scfg.method.uses_momentum() {
        Some(linalg::spd_inverse(&scfg.sigma_inv, "sigma_inv")?)
    } else {
        None
    };
    let ens = init_ensemble(
        cfg.sampler.n_particles,
        &cfg.sampler.init_mean,
        cfg.sampler.init_std,
        momentum_cov.as_ref(),
        cfg.sampler.seed,
    )?;
    let schedule = Schedule {
        snapshot_every: cfg.output.snapshot_every,
        metrics_every: cfg.output.metrics_every,
    };
    let metric_kernel = KernelConfig::median();
    let mut metrics = Vec::new();
    let mut metric_error = None;
    let mut hook = |e: &samplers::ParticleEnsemble| match metric_report(e.iteration, &e.theta, &reference, &metric_kernel) {
        Ok(m) => metrics.push(m),
        Err(err) => {
            metric_error.get_or_insert(err);
        }
    };
    let scores = BlobScores::from_config(&scfg);
    let result = samplers::run(&scfg, &target, &scores, ens, schedule, &mut hook);
    if let Some(err) = metric_error {
        return Err(err);
    }
    let (trace, failure) = match result {
        Ok(trace) => (trace, None),
        Err(f) => {
            let f = *f;
            (f.partial, Some((f.iteration, f.error.to_string())))
        }
    };
    Ok(Simulation {
        trace,
        metrics,
        reference,
        failure,
        regularity,
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Output(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let io = |source| Error::Io {
        path: path.display().to_string(),
        source,
    };
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

fn csv_error(e: impl std::fmt::Display) -> Error {
    Error::Output(format!("csv: {e}"))
}

/// `iter, particle_id, theta_1..theta_l[, r_1..r_l]`, one row per particle per snapshot.
pub fn trace_csv(snapshots: &[Snapshot]) -> Result<Vec<u8>> {
    let dim = snapshots.first().and_then(|s| s.theta.first()).map_or(0, |t| t.len());
    let momentum = snapshots.first().is_some_and(|s| s.momentum.is_some());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["iter".to_string(), "particle_id".to_string()];
    header.extend((1..=dim).map(|k| format!("theta_{k}")));
    if momentum {
        header.extend((1..=dim).map(|k| format!("r_{k}")));
    }
    w.write_record(&header).map_err(csv_error)?;
    for s in snapshots {
        for (i, t) in s.theta.iter().enumerate() {
            let mut row = vec![s.iteration.to_string(), i.to_string()];
            row.extend(t.iter().map(|x| x.to_string()));
            if let Some(m) = &s.momentum {
                row.extend(m[i].iter().map(|x| x.to_string()));
            }
            w.write_record(&row).map_err(csv_error)?;
        }
    }
    w.into_inner().map_err(csv_error)
}

/// `iter, mmd, w2, mean_1..mean_d, cov_11..cov_dd`; `w2` is empty when skipped.
pub fn metrics_csv(metrics: &[MetricReport], dim: usize) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["iter".to_string(), "mmd".into(), "w2".into()];
    header.extend((1..=dim).map(|k| format!("mean_{k}")));
    for a in 1..=dim {
        header.extend((1..=dim).map(|b| format!("cov_{a}{b}")));
    }
    w.write_record(&header).map_err(csv_error)?;
    for m in metrics {
        let mut row = vec![
            m.iteration.to_string(),
            m.mmd.to_string(),
            m.w2.map(|x| x.to_string()).unwrap_or_default(),
        ];
        row.extend(m.mean.iter().map(|x| x.to_string()));
        row.extend(m.cov.iter().map(|x| x.to_string()));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.into_inner().map_err(csv_error)
}

fn plot_window(target: &TargetConfig) -> ([f64; 2], [f64; 2]) {
    match target {
        TargetConfig::Synthetic2d => ([-7.0, 3.0], [-9.0, 9.0]),
        TargetConfig::Gaussian { mean, cov } => {
            let half = |k: usize| 4.0 * cov[(k, k)].sqrt();
            (
                [mean[0] - half(0), mean[0] + half(0)],
                [mean[1] - half(1), mean[1] + half(1)],
            )
        }
    }
}

/// Scatter of one snapshot over the reference cloud.
pub fn plot_snapshot(
    path: &Path,
    particles: &[DVector<f64>],
    reference: &[DVector<f64>],
    window: ([f64; 2], [f64; 2]),
) -> Result<()> {
    const SIZE: u32 = 400;
    let mut img = image::RgbImage::from_pixel(SIZE, SIZE, image::Rgb([255, 255, 255]));
    let (wx, wy) = window;
    let to_px = |p: &DVector<f64>| {
        let u = (p[0] - wx[0]) / (wx[1] - wx[0]);
        let v = (wy[1] - p[1]) / (wy[1] - wy[0]);
        let px = (u * SIZE as f64).floor();
        let py = (v * SIZE as f64).floor();
        (px >= 0.0 && py >= 0.0 && px < SIZE as f64 && py < SIZE as f64).then_some((px as i64, py as i64))
    };
    let mut dot = |x: i64, y: i64, r: i64, colour: [u8; 3]| {
        for dy in -r..=r {
            for dx in -r..=r {
                let (a, b) = (x + dx, y + dy);
                if a >= 0 && b >= 0 && a < SIZE as i64 && b < SIZE as i64 {
                    img.put_pixel(a as u32, b as u32, image::Rgb(colour));
                }
            }
        }
    };
    for p in reference {
        if let Some((x, y)) = to_px(p) {
            dot(x, y, 0, [190, 190, 190]);
        }
    }
    for p in particles {
        if let Some((x, y)) = to_px(p) {
            dot(x, y, 2, [200, 30, 30]);
        }
    }
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Output(format!("png: {e}")))?;
    write_atomic(path, &bytes)
}

fn meta_json(
    cfg: &ExperimentConfig,
    status: &str,
    sim: Option<&Simulation>,
    notes: &[String],
) -> Result<Vec<u8>> {
    let failure = sim
        .and_then(|s| s.failure.as_ref())
        .map(|(it, msg)| json!({ "iteration": it, "error": msg }));
    let value = json!({
        "status": status,
        "failure": failure,
        "method": cfg.sampler.method.as_str(),
        "seed": cfg.sampler.seed,
        "reference_seed": reference_seed(cfg.sampler.seed),
        "version": env!("CARGO_PKG_VERSION"),
        "config": serialize_config(cfg)?,
        "wall_time_s": sim.map(|s| s.trace.wall_time.as_secs_f64()),
        "snapshot_iterations": sim.map(|s| s.trace.snapshots.iter().map(|x| x.iteration).collect::<Vec<_>>()),
        "regularity": sim.and_then(|s| s.regularity.as_ref()),
        "notes": notes,
    });
    serde_json::to_vec_pretty(&value).map_err(|e| Error::Output(format!("json: {e}")))
}

/// Runs one experiment and writes its artifacts into `out`.
///
/// A rejected step is not an `Err`: partial outputs are written, `meta.json`
/// carries status `failed`, and the outcome records the failure.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, plot: bool) -> Result<RunOutcome> {
    fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.display().to_string(),
        source,
    })?;
    write_atomic(&out.join("meta.json"), &meta_json(cfg, "running", None, &[])?)?;
    let sim = simulate(cfg)?;
    let dim = cfg.target.dim();
    write_atomic(&out.join("trace.csv"), &trace_csv(&sim.trace.snapshots)?)?;
    write_atomic(&out.join("metrics.csv"), &metrics_csv(&sim.metrics, dim)?)?;

    let mut notes = Vec::new();
    if plot {
        if dim == 2 {
            let dir = out.join("plots");
            fs::create_dir_all(&dir).map_err(|source| Error::Io {
                path: dir.display().to_string(),
                source,
            })?;
            let window = plot_window(&cfg.target);
            for s in &sim.trace.snapshots {
                plot_snapshot(&dir.join(format!("iter_{:05}.png", s.iteration)), &s.theta, &sim.reference, window)?;
            }
        } else {
            notes.push(format!("plots skipped: target dimension {dim} is not 2"));
        }
    }
    let status = if sim.failure.is_some() { "failed" } else { "ok" };
    write_atomic(&out.join("meta.json"), &meta_json(cfg, status, Some(&sim), &notes)?)?;
    Ok(RunOutcome {
        method: cfg.sampler.method,
        out_dir: out.to_path_buf(),
        failure: sim.failure.as_ref().map(|(it, msg)| format!("iteration {it}: {msg}")),
        n_snapshots: sim.trace.snapshots.len(),
        final_metrics: sim.metrics.last().cloned(),
        wall_time_s: sim.trace.wall_time.as_secs_f64(),
    })
}

/// Runs all four methods on a preset concurrently, one subdirectory each.
pub fn compare(preset_name: &str, out: &Path, plot: bool) -> Result<Vec<Result<RunOutcome>>> {
    let base = preset(preset_name).ok_or_else(|| Error::Config(format!("unknown preset `{preset_name}`")))?;
    let results = thread::scope(|s| {
        let handles: Vec<_> = Method::ALL
            .into_iter()
            .map(|m| {
                let cfg = base.with_method(m);
                let dir = out.join(m.as_str());
                s.spawn(move || run_experiment(&cfg, &dir, plot))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Output("worker panicked".into()))))
            .collect()
    });
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn small(method: &str, n_steps: u64) -> ExperimentConfig {
        parse_config(&format!(
            "[target]\nname = \"gaussian\"\nmean = [0.0, 0.0]\ncov = 1.0\n\
             [sampler]\nmethod = \"{method}\"\neps = 0.05\nn_particles = 12\nn_steps = {n_steps}\nseed = 4\n\
             [output]\nsnapshot_every = 5\nreference_samples = 100\n"
        ))
        .unwrap()
    }

    #[test]
    fn zero_steps_writes_initial_snapshot_only() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&small("blob", 0), dir.path(), false).unwrap();
        assert!(out.succeeded());
        let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        assert_eq!(trace.lines().count(), 1 + 12);
        assert!(trace.starts_with("iter,particle_id,theta_1,theta_2\n"));
        let meta: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("meta.json")).unwrap()).unwrap();
        assert_eq!(meta["status"], "ok");
    }

    #[test]
    fn same_config_gives_identical_trace() {
        for method in ["sghmc", "psghmc-fgh"] {
            let a = tempfile::tempdir().unwrap();
            let b = tempfile::tempdir().unwrap();
            run_experiment(&small(method, 20), a.path(), false).unwrap();
            run_experiment(&small(method, 20), b.path(), false).unwrap();
            for f in ["trace.csv", "metrics.csv"] {
                assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
            }
            let trace = fs::read_to_string(a.path().join("trace.csv")).unwrap();
            assert!(trace.starts_with("iter,particle_id,theta_1,theta_2,r_1,r_2\n"));
            assert_eq!(trace.lines().count(), 1 + 5 * 12);
        }
    }

    #[test]
    fn failure_is_marked_and_partial_outputs_kept() {
        let mut cfg = small("blob", 10);
        cfg.sampler.eps = 1e300;
        cfg.sampler.init_std = 1e10;
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&cfg, dir.path(), false).unwrap();
        assert!(!out.succeeded());
        let meta: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("meta.json")).unwrap()).unwrap();
        assert_eq!(meta["status"], "failed");
        assert!(meta["failure"]["iteration"].as_u64().is_some());
        assert!(dir.path().join("trace.csv").exists());
        assert!(!fs::read_dir(dir.path()).unwrap().any(|e| e.unwrap().file_name().to_string_lossy().ends_with(".tmp")));
    }

    #[test]
    fn plots_are_png() {
        let dir = tempfile::tempdir().unwrap();
        run_experiment(&small("blob", 5), dir.path(), true).unwrap();
        let png = fs::read(dir.path().join("plots").join("iter_00005.png")).unwrap();
        assert_eq!(&png[1..4], b"PNG");
    }
}
