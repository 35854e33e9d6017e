use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use merton_hjb_cli::commands::{self, BoundarySource, PortfolioSpec};
use merton_hjb_cli::config::{parse_list, parse_window, RunConfig};
use merton_hjb_cli::manifest::RunManifest;
use merton_hjb_cli::CliError;

#[derive(Parser)]
#[command(name = "merton-hjb", version, about = "Deep Galerkin and finite difference solvers for the reduced Merton HJB equation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key-value run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to `runs/<command>-<run id>`).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Plot window `y1_lo,y1_hi,y2_lo,y2_hi`.
    #[arg(long)]
    window: Option<String>,
    /// Surface times as comma-separated fractions of T.
    #[arg(long)]
    times: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the network and export u-surfaces.
    SolveDgm(Common),
    /// March the finite difference scheme from T down to 0.
    SolveFdm {
        #[command(flatten)]
        common: Common,
        /// Trained network file or solve-dgm run directory for edge values.
        #[arg(long, required_unless_present = "boundary_one", conflicts_with = "boundary_one")]
        model: Option<PathBuf>,
        /// Use u = 1 on the edges.
        #[arg(long)]
        boundary_one: bool,
    },
    /// Absolute error surfaces between two runs.
    Compare {
        /// First run directory (usually solve-dgm).
        dgm_run: PathBuf,
        /// Second run directory (usually solve-fdm).
        fdm_run: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Optimal weight surfaces from a solved run.
    Portfolio {
        /// Run directory of solve-dgm or solve-fdm.
        run: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        window: Option<String>,
        #[arg(long)]
        times: Option<String>,
        /// Cells per side of the output lattice.
        #[arg(long, default_value_t = commands::SURFACE_CELLS)]
        grid: usize,
    },
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(w) = &common.window {
        cfg.set_window(parse_window(w)?);
    }
    if let Some(t) = &common.times {
        cfg.set_time_fractions(parse_list(t)?);
    }
    Ok(cfg)
}

fn default_dir(kind: &str, id: &str) -> PathBuf {
    PathBuf::from("runs").join(format!("{kind}-{}", &id[..12]))
}

fn out_dir(given: &Option<PathBuf>, kind: &str, cfg: &RunConfig) -> PathBuf {
    given.clone().unwrap_or_else(|| {
        let m = RunManifest::new(kind, cfg.train.seed, &cfg.snapshot());
        default_dir(kind, &m.run_id)
    })
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    match cli.command {
        Command::SolveDgm(common) => {
            let cfg = load(&common)?;
            let dir = out_dir(&common.out_dir, "solve-dgm", &cfg);
            commands::solve_dgm(&cfg, &dir)?;
            Ok(dir)
        }
        Command::SolveFdm { common, model, boundary_one } => {
            let cfg = load(&common)?;
            let dir = out_dir(&common.out_dir, "solve-fdm", &cfg);
            let source = match (boundary_one, model) {
                (true, _) => BoundarySource::One,
                (false, Some(p)) => BoundarySource::Model(p),
                (false, None) => return Err(CliError::Usage("either --model or --boundary-one is required".into())),
            };
            commands::solve_fdm(&cfg, &source, &dir)?;
            Ok(dir)
        }
        Command::Compare { dgm_run, fdm_run, out_dir } => {
            let dir = out_dir.unwrap_or_else(|| fdm_run.join("compare"));
            commands::compare(&dgm_run, &fdm_run, &dir)?;
            Ok(dir)
        }
        Command::Portfolio { run, out_dir, window, times, grid } => {
            let spec = PortfolioSpec {
                times: times.as_deref().map(parse_list).transpose()?,
                window: window.as_deref().map(parse_window).transpose()?,
                cells: grid,
            };
            let dir = out_dir.unwrap_or_else(|| run.join("portfolio"));
            let m = commands::portfolio(&run, &spec, &dir)?;
            for d in m.details["degenerate"].as_array().into_iter().flatten() {
                if d["degenerate_nodes"].as_u64().unwrap_or(0) > 0 {
                    eprintln!("t = {}: {} degenerate nodes", d["t"], d["degenerate_nodes"]);
                }
            }
            Ok(dir)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("merton-hjb: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
