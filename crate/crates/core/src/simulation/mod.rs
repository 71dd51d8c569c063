//! Seeded Monte Carlo designs and the estimator-comparison harness.
//!
//! Replication r draws from `ChaCha8Rng::seed_from_u64(base_seed + r)` with stream 0
//! for the instruments and stream 1 for the errors, so every replication is a pure
//! function of (config, r) and results do not depend on the worker count.

mod report;

pub use report::{provenance, summary_csv, summary_markdown, summary_table};

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::disc::{fit_theta_disc, make_partition, Scheme, DEFAULT_SCALAR_CELLS};
use crate::error::{Error, Result};
use crate::first_stage::{fit_first_stage, BandwidthGrid, FirstStageConfig, SplineDf};
use crate::linear::{fit_infeasible, fit_ols, fit_theta_hat, fit_theta_star, fit_tsls_excluded, EstimateResult, EstimatorTag};

/// Standard deviation of Z in the binary-X, continuous-Z design.
pub const SIM2_Z_SD: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Binary X with two independent Bernoulli(0.5) instruments.
    Sim1,
    /// Binary X = 1{2Z ≥ u} with Z normal.
    Sim2,
    /// X = cos Z + sqrt(0.5|Z| + 0.5)·u with Z uniform on [−π, π].
    Sim3,
}

impl Family {
    pub fn d_z(&self) -> usize {
        match self {
            Family::Sim1 => 2,
            Family::Sim2 | Family::Sim3 => 1,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sim1" => Ok(Family::Sim1),
            "sim2" => Ok(Family::Sim2),
            "sim3" => Ok(Family::Sim3),
            other => Err(Error::invalid(format!("unknown design `{other}` (expected sim1, sim2 or sim3)"))),
        }
    }

    pub fn default_first_stage(&self) -> FirstStageConfig {
        match self {
            Family::Sim1 => FirstStageConfig::Cells { cap: 1024 },
            Family::Sim2 => FirstStageConfig::Nw { grid: BandwidthGrid::Auto },
            Family::Sim3 => FirstStageConfig::Spline { df: SplineDf::Auto },
        }
    }

    pub fn default_scheme(&self) -> Scheme {
        match self {
            Family::Sim1 => Scheme::ElementWise,
            Family::Sim2 | Family::Sim3 => Scheme::QuantileRanges,
        }
    }

    /// π₀(z) = E[X | Z = z].
    pub fn pi0(&self, z: &[f64]) -> f64 {
        let phi = |v: f64| Normal::standard().cdf(v);
        match self {
            Family::Sim1 => phi(2.0 * z[0] * z[1] + 2.0 * (1.0 - z[0]) * (1.0 - z[1]) - 1.0),
            Family::Sim2 => phi(2.0 * z[0]),
            Family::Sim3 => z[0].cos(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub family: Family,
    pub n: usize,
    /// Corr(ε, u).
    pub rho: f64,
    /// Direct effects of Z on Y; one value is broadcast to every instrument.
    pub beta: Vec<f64>,
    pub seed: u64,
}

impl DgpSpec {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(Error::invalid(format!("rho must lie in [-1, 1], got {}", self.rho)));
        }
        if self.n < 50 {
            return Err(Error::invalid(format!("simulation n must be at least 50, got {}", self.n)));
        }
        let dz = self.family.d_z();
        if self.beta.len() != 1 && self.beta.len() != dz {
            return Err(Error::dim("beta length", dz, self.beta.len()));
        }
        Ok(())
    }

    pub fn beta_full(&self) -> Vec<f64> {
        let dz = self.family.d_z();
        if self.beta.len() == dz {
            self.beta.clone()
        } else {
            vec![self.beta[0]; dz]
        }
    }

    /// θ₀ = (α₀, β₀, γ₀) with α₀ = γ₀ = 1.
    pub fn theta0(&self) -> Vec<f64> {
        let mut t = vec![1.0];
        t.extend(self.beta_full());
        t.push(1.0);
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub data: Dataset,
    pub theta0: Vec<f64>,
}

fn rng_for(seed: u64, rep: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(rep));
    rng.set_stream(stream);
    rng
}

/// Replication `rep` of the design.
pub fn generate(spec: &DgpSpec, rep: u64) -> Result<Draw> {
    spec.validate()?;
    let n = spec.n;
    let mut zr = rng_for(spec.seed, rep, 0);
    let mut er = rng_for(spec.seed, rep, 1);
    let dz = spec.family.d_z();
    let beta = spec.beta_full();
    let c = (1.0 - spec.rho * spec.rho).max(0.0).sqrt();
    let mut z = DMatrix::zeros(n, dz);
    let mut x = DVector::zeros(n);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let eps: f64 = er.sample(StandardNormal);
        let v: f64 = er.sample(StandardNormal);
        let u = spec.rho * eps + c * v;
        let zi: Vec<f64> = match spec.family {
            Family::Sim1 => vec![f64::from(u8::from(zr.random_bool(0.5))), f64::from(u8::from(zr.random_bool(0.5)))],
            Family::Sim2 => vec![SIM2_Z_SD * zr.sample::<f64, _>(StandardNormal)],
            Family::Sim3 => vec![zr.random_range(-std::f64::consts::PI..=std::f64::consts::PI)],
        };
        let xi = match spec.family {
            Family::Sim1 => {
                let idx = 2.0 * zi[0] * zi[1] + 2.0 * (1.0 - zi[0]) * (1.0 - zi[1]) - 1.0;
                f64::from(u8::from(idx >= u))
            }
            Family::Sim2 => f64::from(u8::from(2.0 * zi[0] >= u)),
            Family::Sim3 => zi[0].cos() + (0.5 * zi[0].abs() + 0.5).sqrt() * u,
        };
        let mut yi = 1.0 + xi + eps;
        for j in 0..dz {
            z[(i, j)] = zi[j];
            yi += beta[j] * zi[j];
        }
        x[i] = xi;
        y[i] = yi;
    }
    let data = Dataset::new(y, z, DMatrix::from_column_slice(n, 1, x.as_slice()))?;
    Ok(Draw {
        data,
        theta0: spec.theta0(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub dgp: DgpSpec,
    pub reps: usize,
    pub estimators: Vec<EstimatorTag>,
    pub first_stage: FirstStageConfig,
    pub scheme: Scheme,
    /// Cell count for quantile partitions.
    pub cells: usize,
}

impl McConfig {
    /// The five-estimator comparison with the design's default smoother and partition.
    pub fn standard(dgp: DgpSpec, reps: usize) -> Self {
        let family = dgp.family;
        Self {
            dgp,
            reps,
            estimators: vec![
                EstimatorTag::ThetaHat,
                EstimatorTag::ThetaStar,
                EstimatorTag::Disc,
                EstimatorTag::Tsls,
                EstimatorTag::Ols,
            ],
            first_stage: family.default_first_stage(),
            scheme: family.default_scheme(),
            cells: DEFAULT_SCALAR_CELLS,
        }
    }
}

/// Supported estimators for the harness.
pub const MC_ESTIMATORS: [EstimatorTag; 6] = [
    EstimatorTag::ThetaHat,
    EstimatorTag::ThetaStar,
    EstimatorTag::Disc,
    EstimatorTag::Tsls,
    EstimatorTag::Ols,
    EstimatorTag::Infeasible,
];

#[derive(Debug, Clone, PartialEq)]
pub struct RepFit {
    pub names: Vec<String>,
    pub coef: Vec<f64>,
    pub se: Vec<f64>,
    pub covers: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub index: usize,
    pub theta0: Vec<f64>,
    /// In the order of `McConfig::estimators`; errors keep their kind label.
    pub fits: Vec<std::result::Result<RepFit, &'static str>>,
}

fn to_rep_fit(r: &EstimateResult, truth: &BTreeMap<String, f64>) -> RepFit {
    let coef: Vec<f64> = r.coef().iter().copied().collect();
    let covers = r
        .names
        .iter()
        .enumerate()
        .map(|(j, name)| truth.get(name).is_some_and(|&t| r.covers(j, t)))
        .collect();
    RepFit {
        names: r.names.clone(),
        coef,
        se: r.se.iter().copied().collect(),
        covers,
    }
}

pub fn replicate(cfg: &McConfig, rep: usize) -> Result<Replication> {
    let draw = generate(&cfg.dgp, rep as u64)?;
    let data = &draw.data;
    let names = data.coefficient_names();
    let truth: BTreeMap<String, f64> = names.iter().cloned().zip(draw.theta0.iter().copied()).collect();
    let needs_fs = cfg.estimators.iter().any(|e| matches!(e, EstimatorTag::ThetaHat | EstimatorTag::ThetaStar));
    let fs = if needs_fs { Some(fit_first_stage(data, &cfg.first_stage).map_err(|e| e.kind())) } else { None };
    let family = cfg.dgp.family;
    let fits = cfg
        .estimators
        .iter()
        .map(|tag| {
            let first = || fs.as_ref().expect("first stage fitted").as_ref().map_err(|k| *k);
            let r: Result<EstimateResult> = match tag {
                EstimatorTag::ThetaHat => match first() {
                    Ok(f) => fit_theta_hat(data, f),
                    Err(kind) => return Err(kind),
                },
                EstimatorTag::ThetaStar => match first() {
                    Ok(f) => fit_theta_star(data, f),
                    Err(kind) => return Err(kind),
                },
                EstimatorTag::Disc => make_partition(data, &cfg.scheme, cfg.cells).and_then(|p| fit_theta_disc(data, &p)),
                EstimatorTag::Tsls => fit_tsls_excluded(data, &(0..data.d_z()).collect::<Vec<_>>()),
                EstimatorTag::Ols => fit_ols(data, true),
                EstimatorTag::Infeasible => fit_infeasible(data, &|z| vec![family.pi0(z)]),
                other => Err(Error::invalid(format!("{} is not available in the simulation harness", other.label()))),
            };
            r.map(|r| to_rep_fit(&r, &truth)).map_err(|e| e.kind())
        })
        .collect();
    Ok(Replication {
        index: rep,
        theta0: draw.theta0,
        fits,
    })
}

/// All replications in index order, computed on `threads` workers.
pub fn run_replications(cfg: &McConfig, threads: usize) -> Result<Vec<Replication>> {
    if cfg.reps == 0 {
        return Err(Error::invalid("the replication count must be at least 1"));
    }
    cfg.dgp.validate()?;
    for e in &cfg.estimators {
        if !MC_ESTIMATORS.contains(e) {
            return Err(Error::invalid(format!("{} is not available in the simulation harness", e.label())));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    pool.install(|| (0..cfg.reps).into_par_iter().map(|r| replicate(cfg, r)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefSummary {
    pub coefficient: String,
    pub truth: f64,
    pub bias: f64,
    /// Standard deviation with the 1/B denominator.
    pub sd: f64,
    pub rmse: f64,
    pub cp: f64,
    pub median_bias: f64,
    /// Median absolute deviation around the median.
    pub mad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub estimator: EstimatorTag,
    /// Replications that succeeded.
    pub used: usize,
    pub failures: usize,
    pub failure_kinds: BTreeMap<String, usize>,
    /// False when every replication failed.
    pub available: bool,
    pub coefficients: Vec<CoefSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub config: McConfig,
    pub reps: usize,
    pub estimators: Vec<EstimatorSummary>,
}

impl McSummary {
    pub fn get(&self, tag: EstimatorTag, coefficient: &str) -> Option<&CoefSummary> {
        self.estimators
            .iter()
            .find(|e| e.estimator == tag)?
            .coefficients
            .iter()
            .find(|c| c.coefficient == coefficient)
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Summary statistics of one coefficient's draws (sums run in replication order).
pub fn coef_summary(coefficient: &str, truth: f64, draws: &[f64], covers: &[bool]) -> CoefSummary {
    let b = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / b;
    let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / b).sqrt();
    let rmse = (draws.iter().map(|v| (v - truth).powi(2)).sum::<f64>() / b).sqrt();
    let cp = covers.iter().filter(|&&c| c).count() as f64 / b;
    let mut sorted = draws.to_vec();
    let med = median(&mut sorted);
    let mut dev: Vec<f64> = draws.iter().map(|v| (v - med).abs()).collect();
    CoefSummary {
        coefficient: coefficient.to_string(),
        truth,
        bias: mean - truth,
        sd,
        rmse,
        cp,
        median_bias: med - truth,
        mad: median(&mut dev),
    }
}

pub fn summarize(cfg: &McConfig, reps: &[Replication]) -> McSummary {
    let names = generate(&cfg.dgp, 0).map(|d| d.data.coefficient_names()).unwrap_or_default();
    let truth: BTreeMap<String, f64> = names.iter().cloned().zip(cfg.dgp.theta0()).collect();
    let estimators = cfg
        .estimators
        .iter()
        .enumerate()
        .map(|(k, &tag)| {
            let mut failure_kinds: BTreeMap<String, usize> = BTreeMap::new();
            let ok: Vec<&RepFit> = reps
                .iter()
                .filter_map(|r| match &r.fits[k] {
                    Ok(f) => Some(f),
                    Err(kind) => {
                        *failure_kinds.entry(kind.to_string()).or_default() += 1;
                        None
                    }
                })
                .collect();
            let coefficients = match ok.first() {
                None => Vec::new(),
                Some(first) => first
                    .names
                    .iter()
                    .enumerate()
                    .filter_map(|(j, name)| {
                        let t = *truth.get(name)?;
                        let draws: Vec<f64> = ok.iter().map(|f| f.coef[j]).collect();
                        let covers: Vec<bool> = ok.iter().map(|f| f.covers[j]).collect();
                        Some(coef_summary(name, t, &draws, &covers))
                    })
                    .collect(),
            };
            EstimatorSummary {
                estimator: tag,
                used: ok.len(),
                failures: reps.len() - ok.len(),
                failure_kinds,
                available: !ok.is_empty(),
                coefficients,
            }
        })
        .collect();
    McSummary {
        config: cfg.clone(),
        reps: reps.len(),
        estimators,
    }
}

pub fn run_mc(cfg: &McConfig, threads: usize) -> Result<McSummary> {
    let reps = run_replications(cfg, threads)?;
    Ok(summarize(cfg, &reps))
}
