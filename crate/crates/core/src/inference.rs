//! Sandwich variances and normal-approximation confidence intervals.
//!
//! Residuals always use the raw regressors: ε̂ᵢ = Yᵢ − α̂ − Zᵢ′β̂ − Xᵢ′γ̂. Reusing the
//! design residuals Yᵢ − Ŵᵢ′θ̂ would fold the first-stage error u into Ω̂ and
//! overstate the variance of the two-step estimators.

use nalgebra::{DMatrix, DVector};

use crate::data::{AugmentedDesign, Dataset, Theta};
use crate::disc::Partition;
use crate::error::{Error, Result};
use crate::linalg;

/// Normal quantile for two-sided 95% intervals.
pub const Z_975: f64 = 1.96;
/// Diagonals below this are treated as genuinely negative.
pub const NEGATIVE_TOL: f64 = -1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SandwichParts {
    /// (1/n) Σ ŴŴ′
    pub sigma: DMatrix<f64>,
    /// (1/n) Σ ε̂² ŴŴ′, or mean(ε̂²)·Σ̂ under homoskedasticity
    pub omega: DMatrix<f64>,
    /// Σ̂⁻¹ Ω̂ Σ̂⁻¹
    pub v: DMatrix<f64>,
}

/// Sandwich for a regressor matrix `w` and residuals `resid`.
pub fn sandwich_parts(
    w: &DMatrix<f64>,
    resid: &DVector<f64>,
    homoskedastic: bool,
) -> Result<SandwichParts> {
    if w.nrows() != resid.len() {
        return Err(Error::dim("residual length", w.nrows(), resid.len()));
    }
    let sigma = linalg::gram(w);
    linalg::check_gram(&sigma, "Gram matrix (1/n) sum W W'")?;
    let sq: Vec<f64> = resid.iter().map(|e| e * e).collect();
    let omega = if homoskedastic {
        &sigma * (sq.iter().sum::<f64>() / sq.len() as f64)
    } else {
        linalg::weighted_gram(w, &sq)
    };
    let v = linalg::sandwich(&sigma, &omega)?;
    Ok(SandwichParts { sigma, omega, v })
}

/// Residuals Y − (1, Z, X)θ.
pub fn structural_residuals(data: &Dataset, theta: &Theta) -> Result<DVector<f64>> {
    if theta.beta.len() != data.d_z() || theta.gamma.len() != data.d_x() {
        return Err(Error::dim("theta length", data.d(), theta.dim()));
    }
    Ok(data.y() - data.raw_design() * theta.flatten())
}

/// Variance of θ̂ or θ̂* from the augmented design, with raw-X residuals.
pub fn variance_semiparametric(
    data: &Dataset,
    design: &AugmentedDesign,
    theta: &Theta,
    homoskedastic: bool,
) -> Result<SandwichParts> {
    if design.n() != data.n() {
        return Err(Error::dim("design rows", data.n(), design.n()));
    }
    let resid = structural_residuals(data, theta)?;
    sandwich_parts(&design.w, &resid, homoskedastic)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscVarianceParts {
    /// Within-cell mean squared residual σ̄²_k (pooled value repeated when homoskedastic).
    pub cell_sigma2: Vec<f64>,
    /// Σ_k p̂_k W̄_k W̄_k′
    pub gram: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

pub fn variance_disc(
    data: &Dataset,
    part: &Partition,
    theta: &Theta,
    homoskedastic: bool,
) -> Result<DiscVarianceParts> {
    if part.labels.len() != data.n() {
        return Err(Error::dim("partition labels", data.n(), part.labels.len()));
    }
    let resid = structural_residuals(data, theta)?;
    let k = part.k();
    let mut ss = vec![0.0; k];
    for (i, &c) in part.labels.iter().enumerate() {
        ss[c] += resid[i] * resid[i];
    }
    let cell_sigma2: Vec<f64> = if homoskedastic {
        let pooled = ss.iter().sum::<f64>() / data.n() as f64;
        vec![pooled; k]
    } else {
        ss.iter()
            .zip(&part.counts)
            .map(|(s, &c)| s / c as f64)
            .collect()
    };
    let gram = part.weighted_gram(None);
    linalg::check_gram(&gram, "partition Gram matrix sum p_k Wbar_k Wbar_k'")?;
    let meat = part.weighted_gram(Some(&cell_sigma2));
    let v = linalg::sandwich(&gram, &meat)?;
    Ok(DiscVarianceParts {
        cell_sigma2,
        gram,
        v,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Intervals {
    pub se: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    /// Whether a tiny negative diagonal was clamped to zero.
    pub clamped: bool,
}

/// θ̂_j ∓ 1.96·sqrt(V_jj / n).
pub fn confidence_intervals(theta: &DVector<f64>, v: &DMatrix<f64>, n: usize) -> Result<Intervals> {
    if v.nrows() != theta.len() || v.ncols() != theta.len() {
        return Err(Error::dim("variance matrix size", theta.len(), v.nrows()));
    }
    let mut clamped = false;
    let mut se = DVector::zeros(theta.len());
    for j in 0..theta.len() {
        let d = v[(j, j)];
        if !d.is_finite() || d < NEGATIVE_TOL {
            return Err(Error::numeric(format!(
                "variance diagonal {j} is {d:.3e}, below the tolerance"
            )));
        }
        if d < 0.0 {
            clamped = true;
        }
        se[j] = (d.max(0.0) / n as f64).sqrt();
    }
    let lower = theta - &se * Z_975;
    let upper = theta + &se * Z_975;
    Ok(Intervals {
        se,
        lower,
        upper,
        clamped,
    })
}
