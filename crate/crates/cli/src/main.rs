//! `truncmix`: experiments on the population EM dynamics of truncated
//! two-component Gaussian mixtures.
//!
//! Every command reads one TOML experiment config (see `config` module docs
//! and the repository README for the schema) and writes CSV/JSON artifacts
//! stamped with the tool version and the config hash. Identical config and
//! seed produce byte-identical outputs on one platform.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::ExperimentConfig;
use output::OutputWriter;

#[derive(Parser)]
#[command(
    name = "truncmix",
    version,
    about = "Population EM on truncated two-Gaussian mixtures"
)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// Override every RNG seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Override the inner Newton tolerance.
    #[arg(long, global = true)]
    tol_inner: Option<f64>,

    /// Override the outer fixed-point tolerance.
    #[arg(long, global = true)]
    tol_outer: Option<f64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run EM from one initialization; writes trajectory.csv and
    /// run_summary.json.
    Run {
        /// Initialization override, comma-separated (e.g. "0.3" or "1.0,0.5").
        #[arg(long, allow_hyphen_values = true)]
        lambda0: Option<String>,
    },
    /// 1-D fixed-point scan; writes fixed_points.json.
    Scan {
        #[arg(long, allow_hyphen_values = true)]
        lo: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        hi: Option<f64>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Multistart fixed-point search; writes fixed_points.json.
    Multistart {
        #[arg(long)]
        starts: Option<usize>,
        #[arg(long)]
        box_scale: Option<f64>,
    },
    /// 2-D EM displacement field; writes vector_field.csv.
    Field {
        /// Grid bounds "x_min,x_max,y_min,y_max".
        #[arg(long, allow_hyphen_values = true)]
        bounds: Option<String>,
        #[arg(long)]
        nx: Option<usize>,
        #[arg(long)]
        ny: Option<usize>,
    },
    /// Basin sampling from random initializations; writes basin.csv/json.
    Basin {
        #[arg(long)]
        inits: Option<usize>,
        #[arg(long)]
        init_scale: Option<f64>,
    },
    /// Rate measurements (contraction, identities, local radius, optional
    /// annulus sweep); writes rates.json and rate_sweep.csv.
    Rates,
    /// Invariant battery; exit code 2 on any hard failure.
    Verify,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_ref().context("--config PATH is required")?;
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg = ExperimentConfig::from_toml(&text)
        .with_context(|| format!("in config file {}", path.display()))?;

    if let Some(seed) = cli.seed {
        cfg.quad.rng_seed = seed;
        cfg.multistart.seed = seed;
        cfg.basin.seed = seed;
        if cfg.run.init_seed.is_some() {
            cfg.run.init_seed = Some(seed);
        }
    }
    if let Some(t) = cli.tol_inner {
        cfg.solver.inner_tol = t;
    }
    if let Some(t) = cli.tol_outer {
        cfg.solver.outer_tol = t;
    }

    match &cli.command {
        Command::Run { lambda0 } => {
            if let Some(raw) = lambda0 {
                let parsed: std::result::Result<Vec<f64>, _> =
                    raw.split(',').map(|s| s.trim().parse::<f64>()).collect();
                cfg.run.lambda0 =
                    Some(parsed.with_context(|| format!("parsing --lambda0 \"{raw}\""))?);
            }
        }
        Command::Scan { lo, hi, n } => {
            if let Some(v) = lo {
                cfg.scan.lo = *v;
            }
            if let Some(v) = hi {
                cfg.scan.hi = *v;
            }
            if let Some(v) = n {
                cfg.scan.n = *v;
            }
        }
        Command::Multistart { starts, box_scale } => {
            if let Some(v) = starts {
                cfg.multistart.n_starts = *v;
            }
            if let Some(v) = box_scale {
                cfg.multistart.box_scale = *v;
            }
        }
        Command::Field { bounds, nx, ny } => {
            if let Some(raw) = bounds {
                let parts: std::result::Result<Vec<f64>, _> =
                    raw.split(',').map(|s| s.trim().parse::<f64>()).collect();
                let parts = parts.with_context(|| format!("parsing --bounds \"{raw}\""))?;
                if parts.len() != 4 {
                    anyhow::bail!("--bounds needs x_min,x_max,y_min,y_max");
                }
                cfg.field.x_min = parts[0];
                cfg.field.x_max = parts[1];
                cfg.field.y_min = parts[2];
                cfg.field.y_max = parts[3];
            }
            if let Some(v) = nx {
                cfg.field.nx = *v;
            }
            if let Some(v) = ny {
                cfg.field.ny = *v;
            }
        }
        Command::Basin { inits, init_scale } => {
            if let Some(v) = inits {
                cfg.basin.n_inits = *v;
            }
            if let Some(v) = init_scale {
                cfg.basin.init_scale = *v;
            }
        }
        Command::Rates | Command::Verify => {}
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<i32> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    let cfg = load_config(cli)?;
    let out = OutputWriter::new(&cli.out, cfg.hash())?;
    match &cli.command {
        Command::Run { .. } => commands::cmd_run(&cfg, &out),
        Command::Scan { .. } => commands::cmd_scan(&cfg, &out),
        Command::Multistart { .. } => commands::cmd_multistart(&cfg, &out),
        Command::Field { .. } => commands::cmd_field(&cfg, &out),
        Command::Basin { .. } => commands::cmd_basin(&cfg, &out),
        Command::Rates => commands::cmd_rates(&cfg, &out),
        Command::Verify => commands::cmd_verify(&cfg, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
