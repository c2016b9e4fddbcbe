//! `bspcopula`: fit, select, sample and tabulate B-spline copulas.

mod commands;
mod config;
mod error;
mod io;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Study;
use config::{parse_config_file, RunConfig};
use error::CliError;

#[derive(Parser)]
#[command(name = "bspcopula", version, about = "B-spline copula estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a copula to the columns of a CSV file.
    Fit,
    /// Cross-validation and pseudo-AIC over sizes and tuning pairs.
    Select,
    /// Draw from a fitted model.
    Sample,
    /// Tabulate the density of a bivariate model, and the joint density
    /// under kernel margins when `--input` is given.
    DensityGrid,
    /// Run one of the simulation studies.
    Reproduce {
        #[arg(value_enum)]
        study: Study,
    },
}

/// Every option may also be set in the `--config` file under the same name.
#[derive(Args)]
struct Opts {
    /// Flat `key = value` file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Input CSV with a header row.
    #[arg(long, global = true)]
    input: Option<String>,
    /// Model JSON written by `fit`.
    #[arg(long, global = true)]
    model: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<String>,
    /// Columns to use, by header name: `x,y[,z]`.
    #[arg(long, global = true)]
    cols: Option<String>,
    /// Spline degree, one value or one per axis.
    #[arg(long, global = true)]
    degree: Option<String>,
    /// Basis sizes `m,n[,k]`; ranges `a-b` and `;`-separated lists give a grid.
    #[arg(long, global = true)]
    size: Option<String>,
    /// SCAD alpha, or a comma list for a grid.
    #[arg(long, global = true)]
    alpha: Option<String>,
    /// SCAD beta, or a comma list for a grid.
    #[arg(long, global = true)]
    beta: Option<String>,
    #[arg(long, global = true)]
    folds: Option<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Stop when no entry moves by more than this.
    #[arg(long, global = true)]
    tol: Option<String>,
    #[arg(long, global = true)]
    max_iters: Option<String>,
    /// Also require the stationarity residual to fall below this.
    #[arg(long, global = true)]
    kkt_tol: Option<String>,
    /// Points per axis for density grids and the sampler's envelope search.
    #[arg(long, global = true)]
    grid: Option<String>,
    /// Worker threads; defaults to every core.
    #[arg(long, global = true)]
    threads: Option<String>,
    /// `rank` (default) or `identity` for data already on the unit scale.
    #[arg(long, global = true)]
    pseudo: Option<String>,
    /// Size selection method for `select`: cv, aic or both.
    #[arg(long, global = true)]
    method: Option<String>,
    /// Number of draws for `sample`.
    #[arg(long, global = true)]
    count: Option<String>,
    /// Replicate data sets per study cell.
    #[arg(long, global = true)]
    datasets: Option<String>,
    /// Observations per replicate; a comma list for study C.
    #[arg(long, global = true)]
    sample_size: Option<String>,
    /// Fixtures to include in a study.
    #[arg(long, global = true)]
    fixtures: Option<String>,
}

impl Opts {
    fn flags(&self) -> [(&'static str, &Option<String>); 21] {
        [
            ("input", &self.input),
            ("model", &self.model),
            ("out", &self.out),
            ("cols", &self.cols),
            ("degree", &self.degree),
            ("size", &self.size),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("folds", &self.folds),
            ("seed", &self.seed),
            ("tol", &self.tol),
            ("max-iters", &self.max_iters),
            ("kkt-tol", &self.kkt_tol),
            ("grid", &self.grid),
            ("threads", &self.threads),
            ("pseudo", &self.pseudo),
            ("method", &self.method),
            ("count", &self.count),
            ("datasets", &self.datasets),
            ("sample-size", &self.sample_size),
            ("fixtures", &self.fixtures),
        ]
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut values = BTreeMap::new();
    if let Some(path) = &cli.opts.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        values = parse_config_file(&text, path)?;
    }
    for (key, value) in cli.opts.flags() {
        if let Some(v) = value {
            values.insert(key.to_string(), v.clone());
        }
    }
    let name = match cli.command {
        Command::Fit => "fit",
        Command::Select => "select",
        Command::Sample => "sample",
        Command::DensityGrid => "density-grid",
        Command::Reproduce { .. } => "reproduce",
    };
    RunConfig::resolve(name, &values)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    eprintln!("{}", serde_json::to_string(&cfg).expect("serializable config"));
    match cli.command {
        Command::Fit => commands::fit(&cfg),
        Command::Select => commands::select(&cfg),
        Command::Sample => commands::sample(&cfg),
        Command::DensityGrid => commands::density_grid(&cfg),
        Command::Reproduce { study } => commands::reproduce(&cfg, study),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
