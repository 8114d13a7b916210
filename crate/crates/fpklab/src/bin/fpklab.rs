//! Command-line front end: reproducible particle experiments for nonlinear
//! Fokker-Planck-Kolmogorov equations, with residual and martingale checks.
//!
//! Configuration comes from an optional TOML file (`--config`); individual
//! flags override file values. The default output root is `$FPKLAB_OUT` or
//! `./runs`, with one deterministic subdirectory per command and seed.

use clap::{Args, Parser, Subcommand};
use fpklab::harness::runner::{run, Command as RunCommand};
use fpklab::harness::{report, ExperimentConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(
    name = "fpklab",
    version,
    about = "Particle laboratory for nonlinear Fokker-Planck-Kolmogorov equations"
)]
struct Cli {
    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Debug, Args)]
struct CommonOpts {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Model preset (zero, ou, meanfield, porous, tanh, p1, p2[:rho=..,tau=..]).
    #[arg(long)]
    model: Option<String>,

    #[arg(long)]
    n_particles: Option<usize>,

    #[arg(long, allow_negative_numbers = true)]
    dt: Option<f64>,

    #[arg(long, allow_negative_numbers = true)]
    t_final: Option<f64>,

    #[arg(long)]
    seed: Option<u64>,

    /// Save stride on the solver grid.
    #[arg(long)]
    save_stride: Option<usize>,

    /// Stochastic realizations (ensemble commands).
    #[arg(long)]
    k_paths: Option<usize>,

    /// Driving-noise dimension.
    #[arg(long)]
    noise_dim: Option<usize>,

    /// Directory of member paths (`*path.json`) for the lifted checks;
    /// omits the inline simulation.
    #[arg(long)]
    paths: Option<PathBuf>,

    /// Worker threads (0 = rayon default).
    #[arg(long)]
    threads: Option<usize>,

    /// Output directory (default: $FPKLAB_OUT/<command>-seed<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum CliCommand {
    /// Simulate the deterministic nonlinear equation and check residuals.
    SimulateNlfpk(CommonOpts),
    /// Simulate the coupled nonlinear-linear pair and check the product identity.
    Coupled(CommonOpts),
    /// Check the lifted continuity equation on a mixture ensemble.
    LiftCheck(CommonOpts),
    /// Assemble a path-space mixture and audit the superposition identity.
    SuperpositionAudit(CommonOpts),
    /// Simulate the common-noise stochastic equation.
    SimulateSnlfpk(CommonOpts),
    /// Run the coordinate martingale and covariation tests.
    MgpCheck(CommonOpts),
    /// Check the lifted second-order equation in expectation.
    LiftedCheck(CommonOpts),
    /// Render the summary of a finished run directory.
    Report { dir: PathBuf },
}

fn load_config(opts: &CommonOpts) -> Result<ExperimentConfig, fpklab::Error> {
    let mut cfg = match &opts.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(model) = &opts.model {
        cfg.model.preset = model.clone();
        // Stochastic presets need a noise channel even when the file or
        // defaults said otherwise.
        if (model.starts_with("p1") || model.starts_with("p2")) && cfg.model.noise_dim == 0 {
            cfg.model.noise_dim = 1;
        }
    }
    if let Some(n) = opts.n_particles {
        cfg.solver.n_particles = n;
    }
    if let Some(dt) = opts.dt {
        cfg.solver.dt = dt;
    }
    if let Some(t) = opts.t_final {
        cfg.solver.t_final = t;
    }
    if let Some(seed) = opts.seed {
        cfg.solver.seed = seed;
    }
    if let Some(stride) = opts.save_stride {
        cfg.solver.save_stride = stride;
    }
    if let Some(k) = opts.k_paths {
        cfg.ensemble.k_paths = k;
    }
    if let Some(d1) = opts.noise_dim {
        cfg.model.noise_dim = d1;
    }
    if let Some(paths) = &opts.paths {
        cfg.ensemble.paths_dir = paths.display().to_string();
    }
    if let Some(threads) = opts.threads {
        cfg.output.threads = threads;
    }
    Ok(cfg)
}

fn out_dir(opts: &CommonOpts, cmd: RunCommand, cfg: &ExperimentConfig) -> PathBuf {
    opts.out.clone().unwrap_or_else(|| {
        let root = std::env::var("FPKLAB_OUT").unwrap_or_else(|_| "runs".into());
        PathBuf::from(root).join(format!("{}-seed{}", cmd.name(), cfg.solver.seed))
    })
}

fn execute(cmd: RunCommand, opts: &CommonOpts) -> ExitCode {
    let cfg = match load_config(opts) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let dir = out_dir(opts, cmd, &cfg);
    match run(cmd, &cfg, &dir) {
        Ok(outcome) => {
            for row in &outcome.report.rows {
                println!(
                    "{}  {}  value={:.6e}",
                    if row.pass { "PASS" } else { "FAIL" },
                    row.name,
                    row.value
                );
            }
            println!(
                "{}: wrote {} artifacts to {}",
                if outcome.pass { "PASS" } else { "FAIL" },
                outcome.manifest.files.len(),
                dir.display()
            );
            if outcome.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        CliCommand::SimulateNlfpk(o) => execute(RunCommand::SimulateNlfpk, o),
        CliCommand::Coupled(o) => execute(RunCommand::Coupled, o),
        CliCommand::LiftCheck(o) => execute(RunCommand::LiftCheck, o),
        CliCommand::SuperpositionAudit(o) => execute(RunCommand::SuperpositionAudit, o),
        CliCommand::SimulateSnlfpk(o) => execute(RunCommand::SimulateSnlfpk, o),
        CliCommand::MgpCheck(o) => execute(RunCommand::MgpCheck, o),
        CliCommand::LiftedCheck(o) => execute(RunCommand::LiftedCheck, o),
        CliCommand::Report { dir } => match report::render(dir) {
            Ok((text, _, pass)) => {
                print!("{text}");
                if pass {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::FAILURE
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
    }
}
