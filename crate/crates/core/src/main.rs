use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fghflow::config::parse_config;
use fghflow::runner::{compare, run_experiment};
use fghflow::validation::{run_validation, Level};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "fghflow", version, about = "Particle samplers for MCMC dynamics and their Wasserstein-flow equivalents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write PNG scatter plots of every snapshot.
        #[arg(long)]
        plot: bool,
    },
    /// Run the numerical self-checks and write a JSON report.
    Validate {
        #[arg(long, default_value = "fast")]
        level: Level,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all four methods of a preset concurrently.
    Compare {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plot: bool,
    },
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), String> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    }
    fs::write(path, bytes).map_err(|e| format!("{}: {e}", path.display()))
}

fn cmd_run(config: &Path, out: &Path, plot: bool) -> ExitCode {
    let text = match fs::read_to_string(config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read {}: {e}", config.display());
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    let cfg = match parse_config(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    match run_experiment(&cfg, out, plot) {
        Ok(o) if o.succeeded() => {
            println!(
                "{}: {} snapshots in {:.2}s -> {}",
                o.method,
                o.n_snapshots,
                o.wall_time_s,
                out.display()
            );
            ExitCode::SUCCESS
        }
        Ok(o) => {
            eprintln!("{}: run failed at {}", o.method, o.failure.unwrap_or_default());
            ExitCode::from(EXIT_RUNTIME)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn cmd_validate(level: Level, out: &Path) -> ExitCode {
    let report = run_validation(level);
    for c in &report.checks {
        println!(
            "{} {:<48} residual {:.3e} threshold {:.3e}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.residual,
            c.threshold
        );
    }
    let json = match serde_json::to_vec_pretty(&report) {
        Ok(j) => j,
        Err(e) => {
            eprintln!("cannot serialize report: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    };
    if let Err(e) = write_file(out, &json) {
        eprintln!("{e}");
        return ExitCode::from(EXIT_RUNTIME);
    }
    if report.pass {
        println!("all {} checks passed in {:.1}s", report.checks.len(), report.wall_time_s);
        ExitCode::SUCCESS
    } else {
        for c in report.failing() {
            eprintln!("failed check: {}", c.name);
        }
        ExitCode::from(EXIT_VALIDATION)
    }
}

fn cmd_compare(preset: &str, out: &Path, plot: bool) -> ExitCode {
    let results = match compare(preset, out, plot) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    let mut ok = true;
    for r in results {
        match r {
            Ok(o) => {
                let mmd = o.final_metrics.as_ref().map_or(f64::NAN, |m| m.mmd);
                match &o.failure {
                    None => println!("{:<11} final MMD {mmd:.4} ({:.2}s)", o.method.as_str(), o.wall_time_s),
                    Some(f) => {
                        ok = false;
                        eprintln!("{:<11} failed at {f}", o.method.as_str());
                    }
                }
            }
            Err(e) => {
                ok = false;
                eprintln!("{e}");
            }
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_RUNTIME)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out, plot } => cmd_run(&config, &out, plot),
        Command::Validate { level, out } => cmd_validate(level, &out),
        Command::Compare { preset, out, plot } => cmd_compare(&preset, &out, plot),
    }
}
