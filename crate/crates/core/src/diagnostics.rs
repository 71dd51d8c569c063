//! Identification checks on a fitted design.
//!
//! Nonlinearity of π̂ is measured by the R² of each π̂ column on (1, Z); values
//! above 0.999 are reported as marginal. This is a numeric surrogate, not a test.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{AugmentedDesign, Dataset};
use crate::disc::Partition;
use crate::error::{Error, Result};
use crate::first_stage::distinct_rows;
use crate::linalg;

pub const FAIL_COND: f64 = 1e10;
pub const MARGINAL_R2: f64 = 0.999;
/// Largest support for which every d-subset of support rows is searched.
pub const BRUTE_FORCE_SUPPORT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Ok,
    Marginal,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderCondition {
    /// Distinct Z rows, or the number of cells when a partition is given.
    pub support_points: usize,
    pub parameters: usize,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionRank {
    pub ok: bool,
    pub eigenvalues: Vec<f64>,
    pub condition_number: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentificationReport {
    /// Spectrum of (1/n) Σ ŴŴ′, descending.
    pub gram_eigenvalues: Vec<f64>,
    pub condition_number: f64,
    /// R² of each π̂ column on (1, Z).
    pub nonlinearity_stat: Vec<f64>,
    pub partition_rank: Option<PartitionRank>,
    pub order_condition: OrderCondition,
    /// For small finite supports: whether some d support rows are linearly independent.
    pub support_subset_rank: Option<bool>,
    /// One verdict per endogenous component.
    pub component_verdicts: Vec<Verdict>,
    pub verdict: Verdict,
    pub note: &'static str,
}

fn clean_spectrum(m: &DMatrix<f64>) -> Vec<f64> {
    let (mut s, _) = linalg::sym_eigen_desc(m);
    // roundoff negatives inside the tolerance are reported as zero
    for v in s.iter_mut() {
        if *v < 0.0 && *v >= -1e-8 {
            *v = 0.0;
        }
    }
    s
}

fn has_full_rank_subset(rows: &DMatrix<f64>, d: usize) -> bool {
    let m = rows.nrows();
    if m < d {
        return false;
    }
    let mut idx: Vec<usize> = (0..d).collect();
    loop {
        let sub = DMatrix::from_fn(d, d, |i, j| rows[(idx[i], j)]);
        let sv = linalg::singular_values_desc(&sub);
        if sv[d - 1] > linalg::SINGULAR_TOL * sv[0].max(1.0) {
            return true;
        }
        // next combination in lexicographic order
        let mut i = d;
        loop {
            if i == 0 {
                return false;
            }
            i -= 1;
            if idx[i] != i + m - d {
                break;
            }
            if i == 0 {
                return false;
            }
        }
        idx[i] += 1;
        for j in i + 1..d {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Never errors: every failure mode is reported through the verdict.
pub fn check_identification(design: &AugmentedDesign, part: Option<&Partition>) -> IdentificationReport {
    let d = design.d();
    let dz = design.d_z;
    let gram = linalg::gram(&design.w);
    let gram_eigenvalues = clean_spectrum(&gram);
    let condition_number = linalg::condition_number(&gram_eigenvalues);

    let zblock = DMatrix::from_fn(design.n(), 1 + dz, |i, j| design.w[(i, j)]);
    let nonlinearity_stat: Vec<f64> = (0..design.d_x)
        .map(|j| {
            let col: DVector<f64> = design.w.column(1 + dz + j).into_owned();
            linalg::r_squared(&zblock, &col)
        })
        .collect();

    let z = design.w.columns(1, dz).into_owned();
    let support = distinct_rows(&z, usize::MAX).map(|(k, l)| (k.len(), l)).ok();
    let distinct = support.as_ref().map_or(design.n(), |s| s.0);
    let support_points = part.map_or(distinct, |p| p.k());
    let order_condition = OrderCondition {
        support_points,
        parameters: d,
        satisfied: support_points >= d,
    };

    let support_subset_rank = support.as_ref().filter(|s| s.0 <= BRUTE_FORCE_SUPPORT).map(|(k, labels)| {
        let mut rows = DMatrix::zeros(*k, d);
        let mut seen = vec![false; *k];
        for (i, &c) in labels.iter().enumerate() {
            if !seen[c] {
                seen[c] = true;
                rows.set_row(c, &design.w.row(i));
            }
        }
        has_full_rank_subset(&rows, d)
    });

    let partition_rank = part.map(|p| {
        let eigenvalues = clean_spectrum(&p.weighted_gram(None));
        let cn = linalg::condition_number(&eigenvalues);
        PartitionRank {
            ok: cn <= FAIL_COND,
            eigenvalues,
            condition_number: cn,
        }
    });

    let fail = !(condition_number <= FAIL_COND)
        || !order_condition.satisfied
        || partition_rank.as_ref().is_some_and(|p| !p.ok);
    let component_verdicts: Vec<Verdict> = nonlinearity_stat
        .iter()
        .map(|&r2| {
            if fail {
                Verdict::Fail
            } else if r2 > MARGINAL_R2 {
                Verdict::Marginal
            } else {
                Verdict::Ok
            }
        })
        .collect();
    let verdict = component_verdicts.iter().copied().max().unwrap_or(if fail { Verdict::Fail } else { Verdict::Ok });
    IdentificationReport {
        gram_eigenvalues,
        condition_number,
        nonlinearity_stat,
        partition_rank,
        order_condition,
        support_subset_rank,
        component_verdicts,
        verdict,
        note: "nonlinearity_stat is the R^2 of pi_hat on (1, Z); values above 0.999 are a heuristic marginal threshold",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstrumentRankReport {
    /// Rows: (1, Z, g(Z)) moments against columns (1, Z, X).
    pub h: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
    pub min_singular_value: f64,
}

/// Sample version of E[(1, Z, g(Z))′ (1, Z, X)] for scalar Z and X.
pub fn check_instrument_function(data: &Dataset, g: &dyn Fn(f64) -> f64) -> Result<InstrumentRankReport> {
    if data.d_z() != 1 || data.d_x() != 1 {
        return Err(Error::invalid("instrument-function check needs scalar Z and scalar X"));
    }
    let n = data.n();
    let mut h = DMatrix::zeros(3, 3);
    for i in 0..n {
        let z = data.z()[(i, 0)];
        let gz = g(z);
        if !gz.is_finite() {
            return Err(Error::NonFinite {
                what: "g(Z)".into(),
                row: i,
                col: 0,
            });
        }
        let inst = [1.0, z, gz];
        let reg = [1.0, z, data.x()[(i, 0)]];
        for a in 0..3 {
            for b in 0..3 {
                h[(a, b)] += inst[a] * reg[b];
            }
        }
    }
    h /= n as f64;
    let singular_values = linalg::singular_values_desc(&h);
    Ok(InstrumentRankReport {
        h: (0..3).map(|a| (0..3).map(|b| h[(a, b)]).collect()).collect(),
        min_singular_value: singular_values[2],
        singular_values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Definiteness {
    Zero,
    PositiveDefinite,
    PositiveSemidefinite,
    NegativeDefinite,
    NegativeSemidefinite,
    Indefinite,
}

/// Conditional moments at a set of support points (or sample rows) with weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GapMoments {
    /// Row i is W_i = (1, z_i′, π₀(z_i)′).
    pub w: DMatrix<f64>,
    /// Cov(ε, u | Z = z_i), length d_x each.
    pub cov_eps_u: Vec<DVector<f64>>,
    /// Var(u | Z = z_i), d_x × d_x each.
    pub var_u: Vec<DMatrix<f64>>,
    pub gamma: DVector<f64>,
    /// Probabilities; uniform when None.
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceGap {
    /// Ω_inf − Ω₀.
    pub gap: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub definiteness: Definiteness,
}

/// Ω_inf − Ω₀ = E[(2 Cov(ε,u|Z)′γ₀ + γ₀′ Var(u|Z) γ₀) W W′].
pub fn infeasible_variance_gap(m: &GapMoments) -> Result<VarianceGap> {
    let rows = m.w.nrows();
    let dx = m.gamma.len();
    if m.cov_eps_u.len() != rows {
        return Err(Error::dim("Cov(eps, u | Z) entries", rows, m.cov_eps_u.len()));
    }
    if m.var_u.len() != rows {
        return Err(Error::dim("Var(u | Z) entries", rows, m.var_u.len()));
    }
    if let Some(w) = &m.weights {
        if w.len() != rows {
            return Err(Error::dim("weights", rows, w.len()));
        }
    }
    let d = m.w.ncols();
    let mut gap = DMatrix::zeros(d, d);
    for i in 0..rows {
        if m.cov_eps_u[i].len() != dx {
            return Err(Error::dim("Cov(eps, u | Z) length", dx, m.cov_eps_u[i].len()));
        }
        if m.var_u[i].shape() != (dx, dx) {
            return Err(Error::dim("Var(u | Z) size", dx, m.var_u[i].nrows()));
        }
        let scale = 2.0 * m.cov_eps_u[i].dot(&m.gamma) + (m.gamma.transpose() * &m.var_u[i] * &m.gamma)[0];
        let p = m.weights.as_ref().map_or(1.0 / rows as f64, |w| w[i]);
        let wi = m.w.row(i).transpose();
        gap += &wi * wi.transpose() * (scale * p);
    }
    let eigenvalues = linalg::sym_eigen_desc(&gap).0;
    let tol = 1e-10 * gap.amax().max(1e-300);
    let pos = eigenvalues.iter().filter(|&&v| v > tol).count();
    let neg = eigenvalues.iter().filter(|&&v| v < -tol).count();
    let definiteness = match (pos, neg) {
        (0, 0) => Definiteness::Zero,
        (p, 0) if p == d => Definiteness::PositiveDefinite,
        (_, 0) => Definiteness::PositiveSemidefinite,
        (0, q) if q == d => Definiteness::NegativeDefinite,
        (0, _) => Definiteness::NegativeSemidefinite,
        _ => Definiteness::Indefinite,
    };
    let definiteness = if gap.amax() == 0.0 { Definiteness::Zero } else { definiteness };
    Ok(VarianceGap {
        gap: (0..d).map(|a| (0..d).map(|b| gap[(a, b)]).collect()).collect(),
        eigenvalues,
        definiteness,
    })
}
