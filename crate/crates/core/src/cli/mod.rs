//! Command-line front end: `estimate`, `simulate` and `diagnose`.
//!
//! Settings come from flags, an optional TOML file (`--config`) whose keys mirror
//! the long flag names with underscores, and built-in defaults, in that order of
//! precedence. The thread count also reads `INCIV_THREADS`. Every artifact
//! carries the fully resolved configuration, so rerunning with it reproduces the
//! numbers. Exit codes: 0 ok, 1 usage or I/O, 2 identification, 3 numeric.

mod ingest;
mod run;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::disc::{PartitionSpec, Scheme, DEFAULT_PER_DIM_CELLS, DEFAULT_SCALAR_CELLS};
use crate::error::{Error, Result};
use crate::first_stage::{BandwidthGrid, FirstStageConfig, SplineDf, DEFAULT_CELL_CAP};
use crate::linear::EstimatorTag;
use crate::simulation::{DgpSpec, Family};

pub use ingest::{ingest_csv, read_csv, write_csv, Roles};
pub use run::{execute, Artifact};

const DEFAULT_TAU: f64 = 0.5;
const DEFAULT_SEED: u64 = 1;
const DEFAULT_REPS: usize = 200;
const DEFAULT_SIM_N: usize = 1000;
const DEFAULT_RHO: f64 = 0.5;

#[derive(Debug, Parser)]
#[command(name = "inciv", version, about = "Endogenous regression with included instruments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the requested estimators on a CSV dataset.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo study on a built-in design.
    Simulate(SimulateArgs),
    /// Report identification diagnostics for a CSV dataset.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
    Md,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmootherArg {
    Cells,
    Nw,
    Spline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionArg {
    /// Element-wise for cell means, otherwise quantile (scalar Z) or product quantiles.
    Auto,
    Element,
    Quantile,
    Product,
    /// Breakpoints from the `breakpoints` key of the config file.
    User,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML file with default settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for simulations.
    #[arg(long, env = "INCIV_THREADS")]
    pub threads: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Headed CSV file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Outcome column.
    #[arg(long)]
    pub y: Option<String>,
    /// Included exogenous columns, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub z: Option<Vec<String>>,
    /// Endogenous columns, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub x: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SmoothingArgs {
    #[arg(long = "first-stage", value_enum)]
    pub first_stage: Option<SmootherArg>,
    /// Fixed Nadaraya-Watson bandwidth candidates; cross-validated grid when absent.
    #[arg(long, value_delimiter = ',')]
    pub bandwidth: Option<Vec<f64>>,
    /// Fixed spline degrees of freedom; cross-validated when absent.
    #[arg(long)]
    pub df: Option<usize>,
    /// Maximum distinct Z rows for cell means.
    #[arg(long = "cell-cap")]
    pub cell_cap: Option<usize>,
    #[arg(long, value_enum)]
    pub partition: Option<PartitionArg>,
    /// Cells for quantile partitions, per dimension for product partitions.
    #[arg(long)]
    pub cells: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub smoothing: SmoothingArgs,
    /// Any of theta, theta_star, disc, ols, tsls, quantile, nonlinear, nonlinear_star.
    #[arg(long, value_delimiter = ',')]
    pub estimators: Option<Vec<String>>,
    /// Quantile level for the quantile estimator.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Built-in model for the nonlinear estimator: linear or exp-index.
    #[arg(long)]
    pub model: Option<String>,
    /// Z columns treated as excluded instruments by 2SLS (default: all of them).
    #[arg(long, value_delimiter = ',')]
    pub excluded: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub smoothing: SmoothingArgs,
    /// Design: sim1, sim2 or sim3.
    #[arg(long)]
    pub dgp: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Correlation between the structural and first-stage errors.
    #[arg(long, allow_hyphen_values = true)]
    pub rho: Option<f64>,
    /// Direct effects of Z; a single value applies to every instrument.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub beta: Option<Vec<f64>>,
    /// Monte Carlo replications.
    #[arg(long = "B", visible_alias = "reps")]
    pub reps: Option<usize>,
    /// Any of theta, theta_star, disc, tsls, ols, infeasible.
    #[arg(long, value_delimiter = ',')]
    pub estimators: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub smoothing: SmoothingArgs,
}

/// Contents of a `--config` file. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub command: Option<String>,
    pub data: Option<PathBuf>,
    pub y: Option<String>,
    pub z: Option<Vec<String>>,
    pub x: Option<Vec<String>>,
    pub first_stage: Option<SmootherArg>,
    pub bandwidth: Option<Vec<f64>>,
    pub df: Option<usize>,
    pub cell_cap: Option<usize>,
    pub partition: Option<PartitionArg>,
    pub cells: Option<usize>,
    pub breakpoints: Option<Vec<Vec<f64>>>,
    pub merge_map: Option<Vec<(Vec<usize>, usize)>>,
    pub estimators: Option<Vec<String>>,
    pub tau: Option<f64>,
    pub model: Option<String>,
    pub excluded: Option<Vec<String>>,
    pub dgp: Option<String>,
    pub n: Option<usize>,
    pub rho: Option<f64>,
    pub beta: Option<Vec<f64>>,
    pub reps: Option<usize>,
    pub format: Option<Format>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Estimate,
    Simulate,
    Diagnose,
}

impl CommandKind {
    fn name(self) -> &'static str {
        match self {
            CommandKind::Estimate => "estimate",
            CommandKind::Simulate => "simulate",
            CommandKind::Diagnose => "diagnose",
        }
    }
}

/// Partition choice before the data dimension is known.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PartitionChoice {
    arg: PartitionArg,
    cells: Option<usize>,
    spec: Option<PartitionSpec>,
}

impl PartitionChoice {
    /// Concrete scheme and cell count for a first stage and Z dimension.
    pub(crate) fn resolve(&self, first_stage: &FirstStageConfig, d_z: usize) -> Result<(Scheme, usize)> {
        let arg = match self.arg {
            PartitionArg::Auto if self.spec.is_some() => PartitionArg::User,
            PartitionArg::Auto if matches!(first_stage, FirstStageConfig::Cells { .. }) => PartitionArg::Element,
            PartitionArg::Auto if d_z == 1 => PartitionArg::Quantile,
            PartitionArg::Auto => PartitionArg::Product,
            other => other,
        };
        Ok(match arg {
            PartitionArg::Element => (Scheme::ElementWise, 0),
            PartitionArg::Quantile => (Scheme::QuantileRanges, self.cells.unwrap_or(DEFAULT_SCALAR_CELLS)),
            PartitionArg::Product => (Scheme::ProductQuantiles, self.cells.unwrap_or(DEFAULT_PER_DIM_CELLS)),
            PartitionArg::User => match &self.spec {
                Some(spec) => (Scheme::UserSupplied(spec.clone()), 0),
                None => return Err(Error::invalid("partition `user` needs a `breakpoints` key in the config file")),
            },
            PartitionArg::Auto => unreachable!("auto resolved above"),
        })
    }
}

/// Settings after merging flags, file and defaults.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: CommandKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub roles: Option<Roles>,
    pub first_stage: FirstStageConfig,
    pub estimators: Vec<EstimatorTag>,
    /// Filled in once the data dimension is known.
    pub partition: Option<Scheme>,
    pub cells: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub excluded: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dgp: Option<DgpSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    pub seed: u64,
    pub format: Format,
    /// Not echoed: the destination does not affect results.
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// Not echoed: results are identical for every thread count.
    #[serde(skip)]
    pub threads: usize,
    #[serde(skip)]
    pub(crate) partition_choice: Option<PartitionChoice>,
}

pub fn parse_estimator(name: &str) -> Result<EstimatorTag> {
    Ok(match name.trim().to_ascii_lowercase().as_str() {
        "theta" | "theta_hat" => EstimatorTag::ThetaHat,
        "theta_star" => EstimatorTag::ThetaStar,
        "disc" | "theta_disc" => EstimatorTag::Disc,
        "ols" => EstimatorTag::Ols,
        "tsls" | "2sls" => EstimatorTag::Tsls,
        "infeasible" => EstimatorTag::Infeasible,
        "nonlinear" => EstimatorTag::Nonlinear,
        "nonlinear_star" => EstimatorTag::NonlinearStar,
        "quantile" => EstimatorTag::Quantile,
        other => return Err(Error::invalid(format!("unknown estimator `{other}`"))),
    })
}

fn parse_estimators(names: &[String]) -> Result<Vec<EstimatorTag>> {
    let mut out = Vec::new();
    for n in names {
        let tag = parse_estimator(n)?;
        if !out.contains(&tag) {
            out.push(tag);
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("the estimator list is empty"));
    }
    Ok(out)
}

fn first_stage_config(
    s: &SmoothingArgs,
    file: &FileConfig,
    default: FirstStageConfig,
) -> Result<FirstStageConfig> {
    let bandwidth = s.bandwidth.clone().or_else(|| file.bandwidth.clone());
    let df = s.df.or(file.df);
    let cap = s.cell_cap.or(file.cell_cap);
    let method = s.first_stage.or(file.first_stage);
    let cfg = match method {
        None => default,
        Some(SmootherArg::Cells) => FirstStageConfig::Cells {
            cap: cap.unwrap_or(DEFAULT_CELL_CAP),
        },
        Some(SmootherArg::Nw) => FirstStageConfig::Nw {
            grid: bandwidth.clone().map_or(BandwidthGrid::Auto, BandwidthGrid::Fixed),
        },
        Some(SmootherArg::Spline) => FirstStageConfig::Spline {
            df: df.map_or(SplineDf::Auto, SplineDf::Fixed),
        },
    };
    let mismatch = |what: &str, method: &str| {
        Err(Error::invalid(format!("{what} applies only to the {method} first stage")))
    };
    match &cfg {
        FirstStageConfig::Cells { .. } | FirstStageConfig::Spline { .. } if bandwidth.is_some() => {
            return mismatch("bandwidth", "nw")
        }
        FirstStageConfig::Cells { .. } | FirstStageConfig::Nw { .. } if df.is_some() => return mismatch("df", "spline"),
        FirstStageConfig::Nw { .. } | FirstStageConfig::Spline { .. } if cap.is_some() => {
            return mismatch("cell-cap", "cells")
        }
        _ => {}
    }
    Ok(cfg)
}

fn partition_choice(s: &SmoothingArgs, file: &FileConfig) -> PartitionChoice {
    PartitionChoice {
        arg: s.partition.or(file.partition).unwrap_or(PartitionArg::Auto),
        cells: s.cells.or(file.cells),
        spec: file.breakpoints.clone().map(|breakpoints| PartitionSpec {
            breakpoints,
            merge_map: file.merge_map.clone(),
        }),
    }
}

fn roles(d: &DataArgs, file: &FileConfig) -> Result<(PathBuf, Roles)> {
    let path = d
        .data
        .clone()
        .or_else(|| file.data.clone())
        .ok_or_else(|| Error::invalid("--data is required"))?;
    let y = d.y.clone().or_else(|| file.y.clone()).ok_or_else(|| Error::invalid("--y is required"))?;
    let z = d.z.clone().or_else(|| file.z.clone()).ok_or_else(|| Error::invalid("--z is required"))?;
    let x = d.x.clone().or_else(|| file.x.clone()).ok_or_else(|| Error::invalid("--x is required"))?;
    let roles = Roles { y, z, x };
    roles.validate()?;
    Ok((path, roles))
}

fn load_file(common: &CommonArgs, kind: CommandKind) -> Result<FileConfig> {
    let file = match &common.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    if let Some(c) = &file.command {
        if c != kind.name() {
            return Err(Error::invalid(format!(
                "config file is for `{c}` but the command is `{}`",
                kind.name()
            )));
        }
    }
    Ok(file)
}

fn threads(common: &CommonArgs, file: &FileConfig) -> Result<usize> {
    let t = common
        .threads
        .or(file.threads)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if t == 0 {
        return Err(Error::invalid("--threads must be at least 1"));
    }
    Ok(t)
}

fn base(kind: CommandKind, common: &CommonArgs, file: &FileConfig, first_stage: FirstStageConfig) -> Result<RunConfig> {
    Ok(RunConfig {
        command: kind,
        data: None,
        roles: None,
        first_stage,
        estimators: Vec::new(),
        partition: None,
        cells: 0,
        tau: None,
        model: None,
        excluded: None,
        dgp: None,
        reps: None,
        seed: common.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
        format: common.format.or(file.format).unwrap_or(Format::Csv),
        out: common.out.clone().or_else(|| file.out.clone()),
        threads: threads(common, file)?,
        partition_choice: None,
    })
}

impl RunConfig {
    pub fn from_command(cmd: &Command) -> Result<Self> {
        match cmd {
            Command::Estimate(a) => {
                let file = load_file(&a.common, CommandKind::Estimate)?;
                let fs = first_stage_config(&a.smoothing, &file, FirstStageConfig::default())?;
                let mut cfg = base(CommandKind::Estimate, &a.common, &file, fs)?;
                let (path, roles) = roles(&a.data, &file)?;
                cfg.data = Some(path);
                cfg.roles = Some(roles);
                let names = a.estimators.clone().or_else(|| file.estimators.clone());
                cfg.estimators = match names {
                    Some(n) => parse_estimators(&n)?,
                    None => vec![
                        EstimatorTag::ThetaHat,
                        EstimatorTag::ThetaStar,
                        EstimatorTag::Disc,
                        EstimatorTag::Ols,
                    ],
                };
                if cfg.estimators.contains(&EstimatorTag::Infeasible) {
                    return Err(Error::invalid("the infeasible estimator needs the true first stage and is only available in simulate"));
                }
                if cfg.estimators.contains(&EstimatorTag::Quantile) {
                    let tau = a.tau.or(file.tau).unwrap_or(DEFAULT_TAU);
                    if !(tau > 0.0 && tau < 1.0) {
                        return Err(Error::invalid(format!("tau must lie in (0, 1), got {tau}")));
                    }
                    cfg.tau = Some(tau);
                }
                if cfg
                    .estimators
                    .iter()
                    .any(|e| matches!(e, EstimatorTag::Nonlinear | EstimatorTag::NonlinearStar))
                {
                    cfg.model = Some(a.model.clone().or_else(|| file.model.clone()).unwrap_or_else(|| "linear".into()));
                }
                if cfg.estimators.contains(&EstimatorTag::Tsls) {
                    let z = &cfg.roles.as_ref().expect("roles set").z;
                    cfg.excluded = Some(a.excluded.clone().or_else(|| file.excluded.clone()).unwrap_or_else(|| z.clone()));
                }
                cfg.partition_choice = Some(partition_choice(&a.smoothing, &file));
                Ok(cfg)
            }
            Command::Diagnose(a) => {
                let file = load_file(&a.common, CommandKind::Diagnose)?;
                let fs = first_stage_config(&a.smoothing, &file, FirstStageConfig::default())?;
                let mut cfg = base(CommandKind::Diagnose, &a.common, &file, fs)?;
                let (path, roles) = roles(&a.data, &file)?;
                cfg.data = Some(path);
                cfg.roles = Some(roles);
                cfg.partition_choice = Some(partition_choice(&a.smoothing, &file));
                Ok(cfg)
            }
            Command::Simulate(a) => {
                let file = load_file(&a.common, CommandKind::Simulate)?;
                let family = Family::parse(
                    &a.dgp
                        .clone()
                        .or_else(|| file.dgp.clone())
                        .ok_or_else(|| Error::invalid("--dgp is required"))?,
                )?;
                let fs = first_stage_config(&a.smoothing, &file, family.default_first_stage())?;
                let mut cfg = base(CommandKind::Simulate, &a.common, &file, fs)?;
                let dgp = DgpSpec {
                    family,
                    n: a.n.or(file.n).unwrap_or(DEFAULT_SIM_N),
                    rho: a.rho.or(file.rho).unwrap_or(DEFAULT_RHO),
                    beta: a.beta.clone().or_else(|| file.beta.clone()).unwrap_or_else(|| vec![1.0]),
                    seed: cfg.seed,
                };
                dgp.validate()?;
                let reps = a.reps.or(file.reps).unwrap_or(DEFAULT_REPS);
                if reps == 0 {
                    return Err(Error::invalid("--B must be at least 1"));
                }
                let standard = crate::simulation::McConfig::standard(dgp.clone(), reps);
                cfg.estimators = match a.estimators.clone().or_else(|| file.estimators.clone()) {
                    Some(n) => parse_estimators(&n)?,
                    None => standard.estimators,
                };
                let choice = partition_choice(&a.smoothing, &file);
                let (scheme, cells) = match choice.arg {
                    PartitionArg::Auto if choice.spec.is_none() => {
                        let scheme = family.default_scheme();
                        let cells = match scheme {
                            Scheme::ProductQuantiles => choice.cells.unwrap_or(DEFAULT_PER_DIM_CELLS),
                            Scheme::QuantileRanges => choice.cells.unwrap_or(DEFAULT_SCALAR_CELLS),
                            _ => 0,
                        };
                        (scheme, cells)
                    }
                    _ => choice.resolve(&cfg.first_stage, family.d_z())?,
                };
                cfg.partition = Some(scheme);
                cfg.cells = cells;
                cfg.dgp = Some(dgp);
                cfg.reps = Some(reps);
                Ok(cfg)
            }
        }
    }
}

/// Parses arguments, runs the command and returns the process exit status.
/// Results go to `--out` or standard output; failures print a JSON error body
/// on standard error.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => return fail(&Error::invalid(e.to_string().trim_end())),
    };
    match RunConfig::from_command(&cli.command).and_then(|cfg| execute(&cfg).map(|a| (cfg, a))) {
        Ok((cfg, artifact)) => {
            let text = artifact.render(cfg.format);
            match &cfg.out {
                Some(path) => match std::fs::write(path, text) {
                    Ok(()) => 0,
                    Err(source) => fail(&Error::Io {
                        path: path.display().to_string(),
                        source,
                    }),
                },
                None => {
                    print!("{text}");
                    0
                }
            }
        }
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> i32 {
    let body = serde_json::to_string(&e.payload()).unwrap_or_else(|_| format!("{{\"message\":{:?}}}", e.to_string()));
    eprintln!("{body}");
    e.exit_code()
}
