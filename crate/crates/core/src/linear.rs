//! Two-step estimators θ̂ and θ̂* plus the OLS, excluded-instrument 2SLS and
//! infeasible-oracle comparators. All variances are HC0 sandwiches.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{build_design, AugmentedDesign, Dataset, Theta};
use crate::error::{Error, Result};
use crate::first_stage::FirstStageFit;
use crate::flag::{self, Flag};
use crate::inference::{self, confidence_intervals};
use crate::linalg;

/// Condition number above which a solvable Gram matrix is flagged.
pub const NEAR_SINGULAR_COND: f64 = 1e8;
/// Weak-instrument flag threshold on σ_min(projected design) / σ_min(design).
pub const WEAK_IV_RATIO: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorTag {
    ThetaHat,
    ThetaStar,
    Disc,
    Ols,
    Tsls,
    Infeasible,
    Nonlinear,
    NonlinearStar,
    Quantile,
}

impl EstimatorTag {
    pub fn label(&self) -> &'static str {
        match self {
            EstimatorTag::ThetaHat => "theta_hat",
            EstimatorTag::ThetaStar => "theta_star",
            EstimatorTag::Disc => "theta_disc",
            EstimatorTag::Ols => "ols",
            EstimatorTag::Tsls => "2sls",
            EstimatorTag::Infeasible => "infeasible",
            EstimatorTag::Nonlinear => "nonlinear",
            EstimatorTag::NonlinearStar => "nonlinear_star",
            EstimatorTag::Quantile => "quantile",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateResult {
    pub estimator: EstimatorTag,
    /// Coefficient labels in (α, β, γ) order.
    pub names: Vec<String>,
    pub theta: Theta,
    /// Asymptotic variance V of √n(θ̂ − θ₀).
    pub vcov: DMatrix<f64>,
    /// sqrt(V_jj / n)
    pub se: DVector<f64>,
    pub ci_lower: DVector<f64>,
    pub ci_upper: DVector<f64>,
    pub n: usize,
    /// Condition number of the Gram matrix that was solved.
    pub condition_number: f64,
    pub flags: Vec<Flag>,
}

impl EstimateResult {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn assemble(
        estimator: EstimatorTag,
        names: Vec<String>,
        coef: &DVector<f64>,
        d_beta: usize,
        vcov: DMatrix<f64>,
        n: usize,
        condition_number: f64,
        mut flags: Vec<Flag>,
    ) -> Result<Self> {
        let ci = confidence_intervals(coef, &vcov, n)?;
        if ci.clamped {
            flag::raise(&mut flags, Flag::ClampedVariance);
        }
        if condition_number > NEAR_SINGULAR_COND {
            flag::raise(&mut flags, Flag::NearSingular);
        }
        Ok(Self {
            estimator,
            names,
            theta: Theta::from_flat(coef.as_slice(), d_beta)?,
            vcov,
            se: ci.se,
            ci_lower: ci.lower,
            ci_upper: ci.upper,
            n,
            condition_number,
            flags,
        })
    }

    pub fn coef(&self) -> DVector<f64> {
        self.theta.flatten()
    }

    /// Whether the 95% interval for coefficient `j` contains `value`.
    pub fn covers(&self, j: usize, value: f64) -> bool {
        self.ci_lower[j] <= value && value <= self.ci_upper[j]
    }
}

/// θ̂: OLS of Y on (1, Z, π̂(Z)).
pub fn fit_theta_hat(data: &Dataset, fit: &FirstStageFit) -> Result<EstimateResult> {
    let design = build_design(data, fit)?;
    theta_from_design(data, &design, data.y(), EstimatorTag::ThetaHat)
}

/// θ̂*: OLS of ĥ(Z) on (1, Z, π̂(Z)).
pub fn fit_theta_star(data: &Dataset, fit: &FirstStageFit) -> Result<EstimateResult> {
    let design = build_design(data, fit)?;
    let h = fit.eval_h(data.z())?;
    theta_from_design(data, &design, &h, EstimatorTag::ThetaStar)
}

/// Regresses `target` on a prebuilt design; the variance uses raw-X residuals from `data.y()`.
pub fn theta_from_design(
    data: &Dataset,
    design: &AugmentedDesign,
    target: &DVector<f64>,
    tag: EstimatorTag,
) -> Result<EstimateResult> {
    if target.len() != design.n() {
        return Err(Error::dim("regression target length", design.n(), target.len()));
    }
    let sigma = linalg::gram(&design.w);
    let cond = linalg::check_gram(&sigma, "Gram matrix of (1, Z, pi_hat(Z))")?;
    let coef = linalg::lstsq(&design.w, target)?;
    let theta = Theta::from_flat(coef.as_slice(), data.d_z())?;
    let parts = inference::variance_semiparametric(data, design, &theta, false)?;
    EstimateResult::assemble(
        tag,
        data.coefficient_names(),
        &coef,
        data.d_z(),
        parts.v,
        data.n(),
        cond,
        design.flags.clone(),
    )
}

/// OLS of Y on (1, Z, X), or on (1, Z) when `include_x` is false.
pub fn fit_ols(data: &Dataset, include_x: bool) -> Result<EstimateResult> {
    let mut names = data.coefficient_names();
    let r = if include_x {
        data.raw_design()
    } else {
        names.truncate(1 + data.d_z());
        data.raw_design().columns(0, 1 + data.d_z()).into_owned()
    };
    let sigma = linalg::gram(&r);
    let cond = linalg::check_gram(&sigma, "OLS Gram matrix")?;
    let coef = linalg::lstsq(&r, data.y())?;
    let resid = data.y() - &r * &coef;
    let parts = inference::sandwich_parts(&r, &resid, false)?;
    EstimateResult::assemble(
        EstimatorTag::Ols,
        names,
        &coef,
        data.d_z(),
        parts.v,
        data.n(),
        cond,
        Vec::new(),
    )
}

/// Classical 2SLS treating the Z columns in `excluded` as excluded instruments.
///
/// Regressors are (1, Z_included, X) and instruments are (1, Z). The weak-instrument
/// flag fires when σ_min of the projected regressors falls below 0.1·σ_min of the
/// regressors themselves.
pub fn fit_tsls_excluded(data: &Dataset, excluded: &[usize]) -> Result<EstimateResult> {
    let dz = data.d_z();
    let mut excl = excluded.to_vec();
    excl.sort_unstable();
    excl.dedup();
    if let Some(&bad) = excl.iter().find(|&&j| j >= dz) {
        return Err(Error::invalid(format!("excluded column {bad} is out of range (d_z = {dz})")));
    }
    if excl.len() < data.d_x() {
        return Err(Error::Identification {
            message: format!(
                "2SLS under-identified: {} excluded instruments for {} endogenous regressors",
                excl.len(),
                data.d_x()
            ),
            spectrum: Vec::new(),
            eigenvector: None,
        });
    }
    let included: Vec<usize> = (0..dz).filter(|j| !excl.contains(j)).collect();
    let all_names = data.coefficient_names();
    let mut names = vec![all_names[0].clone()];
    names.extend(included.iter().map(|&j| all_names[1 + j].clone()));
    names.extend(all_names[1 + dz..].iter().cloned());

    let n = data.n();
    let k = 1 + included.len() + data.d_x();
    let r = DMatrix::from_fn(n, k, |i, j| match j {
        0 => 1.0,
        j if j <= included.len() => data.z()[(i, included[j - 1])],
        j => data.x()[(i, j - 1 - included.len())],
    });
    let q = DMatrix::from_fn(n, 1 + dz, |i, j| if j == 0 { 1.0 } else { data.z()[(i, j - 1)] });
    linalg::check_gram(&linalg::gram(&q), "2SLS instrument Gram matrix")?;
    let r_hat = &q * linalg::lstsq_multi(&q, &r)?;
    let sigma = linalg::gram(&r_hat);
    let cond = linalg::check_gram(&sigma, "2SLS projected design")?;
    let coef = linalg::lstsq(&r_hat, data.y())?;
    let resid = data.y() - &r * &coef;
    let parts = inference::sandwich_parts(&r_hat, &resid, false)?;

    let mut flags = Vec::new();
    let sv_hat = linalg::singular_values_desc(&r_hat);
    let sv_raw = linalg::singular_values_desc(&r);
    let (lo_hat, lo_raw) = (sv_hat[k - 1], sv_raw[k - 1]);
    if !(lo_raw > 0.0) || lo_hat / lo_raw < WEAK_IV_RATIO {
        flag::raise(&mut flags, Flag::WeakInstrument);
    }
    EstimateResult::assemble(
        EstimatorTag::Tsls,
        names,
        &coef,
        included.len(),
        parts.v,
        n,
        cond,
        flags,
    )
}

/// Infeasible oracle: OLS of Y on (1, Z, π₀(Z)) with the true π₀.
pub fn fit_infeasible(
    data: &Dataset,
    true_pi: &dyn Fn(&[f64]) -> Vec<f64>,
) -> Result<EstimateResult> {
    let (n, dz, dx) = (data.n(), data.d_z(), data.d_x());
    let mut w = DMatrix::zeros(n, 1 + dz + dx);
    for i in 0..n {
        let zi: Vec<f64> = data.z().row(i).iter().copied().collect();
        let pi = true_pi(&zi);
        if pi.len() != dx {
            return Err(Error::dim("true pi output", dx, pi.len()));
        }
        w[(i, 0)] = 1.0;
        for j in 0..dz {
            w[(i, 1 + j)] = zi[j];
        }
        for j in 0..dx {
            if !pi[j].is_finite() {
                return Err(Error::NonFinite {
                    what: "true pi".into(),
                    row: i,
                    col: j,
                });
            }
            w[(i, 1 + dz + j)] = pi[j];
        }
    }
    let sigma = linalg::gram(&w);
    let cond = linalg::check_gram(&sigma, "Gram matrix of (1, Z, pi_0(Z))")?;
    let coef = linalg::lstsq(&w, data.y())?;
    let resid = data.y() - &w * &coef;
    let parts = inference::sandwich_parts(&w, &resid, false)?;
    EstimateResult::assemble(
        EstimatorTag::Infeasible,
        data.coefficient_names(),
        &coef,
        dz,
        parts.v,
        n,
        cond,
        Vec::new(),
    )
}
