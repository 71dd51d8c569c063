//! Numeric containers and the augmented design (1, Z, π̂(Z)).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::first_stage::{FirstStageFit, Method};
use crate::flag::{self, Flag};

/// Optional labels for the outcome, exogenous and endogenous columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnNames {
    pub y: String,
    pub z: Vec<String>,
    pub x: Vec<String>,
}

/// Outcome `y`, included exogenous regressors `z` (n×d_z) and endogenous regressors `x` (n×d_x).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DVector<f64>,
    z: DMatrix<f64>,
    x: DMatrix<f64>,
    names: Option<ColumnNames>,
}

impl Dataset {
    pub fn new(y: DVector<f64>, z: DMatrix<f64>, x: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        if z.nrows() != n {
            return Err(Error::dim("rows of Z", n, z.nrows()));
        }
        if x.nrows() != n {
            return Err(Error::dim("rows of X", n, x.nrows()));
        }
        let d = 1 + z.ncols() + x.ncols();
        if n < d {
            return Err(Error::invalid(format!(
                "n = {n} is smaller than the parameter dimension {d}"
            )));
        }
        check_finite("y", &DMatrix::from_column_slice(n, 1, y.as_slice()))?;
        check_finite("Z", &z)?;
        check_finite("X", &x)?;
        Ok(Self {
            y,
            z,
            x,
            names: None,
        })
    }

    /// Convenience constructor for scalar Z and scalar X.
    pub fn from_columns(y: &[f64], z: &[f64], x: &[f64]) -> Result<Self> {
        Self::new(
            DVector::from_column_slice(y),
            DMatrix::from_column_slice(z.len(), 1, z),
            DMatrix::from_column_slice(x.len(), 1, x),
        )
    }

    pub fn with_names(mut self, names: ColumnNames) -> Result<Self> {
        if names.z.len() != self.d_z() {
            return Err(Error::dim("Z column names", self.d_z(), names.z.len()));
        }
        if names.x.len() != self.d_x() {
            return Err(Error::dim("X column names", self.d_x(), names.x.len()));
        }
        self.names = Some(names);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
    pub fn d_z(&self) -> usize {
        self.z.ncols()
    }
    pub fn d_x(&self) -> usize {
        self.x.ncols()
    }
    /// Parameter dimension 1 + d_z + d_x.
    pub fn d(&self) -> usize {
        1 + self.d_z() + self.d_x()
    }
    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }
    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn names(&self) -> Option<&ColumnNames> {
        self.names.as_ref()
    }

    /// Same Z and X with a replacement outcome.
    pub fn with_y(&self, y: DVector<f64>) -> Result<Self> {
        let mut out = Self::new(y, self.z.clone(), self.x.clone())?;
        out.names = self.names.clone();
        Ok(out)
    }

    /// Raw regressor matrix (1, Z, X).
    pub fn raw_design(&self) -> DMatrix<f64> {
        let (n, dz, dx) = (self.n(), self.d_z(), self.d_x());
        DMatrix::from_fn(n, 1 + dz + dx, |i, j| match j {
            0 => 1.0,
            j if j <= dz => self.z[(i, j - 1)],
            j => self.x[(i, j - 1 - dz)],
        })
    }

    /// Rows reordered as `perm[0], perm[1], ...`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n() {
            return Err(Error::dim("permutation length", self.n(), perm.len()));
        }
        let y = DVector::from_fn(self.n(), |i, _| self.y[perm[i]]);
        let z = DMatrix::from_fn(self.n(), self.d_z(), |i, j| self.z[(perm[i], j)]);
        let x = DMatrix::from_fn(self.n(), self.d_x(), |i, j| self.x[(perm[i], j)]);
        let mut out = Self::new(y, z, x)?;
        out.names = self.names.clone();
        Ok(out)
    }

    /// Coefficient labels in (α, β, γ) order.
    pub fn coefficient_names(&self) -> Vec<String> {
        let (z, x) = match &self.names {
            Some(n) => (n.z.clone(), n.x.clone()),
            None => (
                (1..=self.d_z()).map(|j| format!("z{j}")).collect(),
                (1..=self.d_x()).map(|j| format!("x{j}")).collect(),
            ),
        };
        std::iter::once("(intercept)".to_string())
            .chain(z)
            .chain(x)
            .collect()
    }
}

fn check_finite(what: &str, m: &DMatrix<f64>) -> Result<()> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Err(Error::NonFinite {
                    what: what.to_string(),
                    row: i,
                    col: j,
                });
            }
        }
    }
    Ok(())
}

/// Coefficients θ = (α, β′, γ′)′.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl Theta {
    pub fn new(alpha: f64, beta: Vec<f64>, gamma: Vec<f64>) -> Self {
        Self { alpha, beta, gamma }
    }

    pub fn from_flat(v: &[f64], d_beta: usize) -> Result<Self> {
        if v.len() < 1 + d_beta {
            return Err(Error::dim("flattened theta", 1 + d_beta, v.len()));
        }
        Ok(Self {
            alpha: v[0],
            beta: v[1..1 + d_beta].to_vec(),
            gamma: v[1 + d_beta..].to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        1 + self.beta.len() + self.gamma.len()
    }

    pub fn flatten(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            std::iter::once(self.alpha)
                .chain(self.beta.iter().copied())
                .chain(self.gamma.iter().copied()),
        )
    }
}

/// Rows (1, Z_i′, π̂(Z_i)′).
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedDesign {
    pub w: DMatrix<f64>,
    /// Smoother that produced the last d_x columns.
    pub source: Method,
    pub d_z: usize,
    pub d_x: usize,
    pub flags: Vec<Flag>,
}

impl AugmentedDesign {
    pub fn n(&self) -> usize {
        self.w.nrows()
    }
    pub fn d(&self) -> usize {
        self.w.ncols()
    }
    /// The π̂ block.
    pub fn pi_hat(&self) -> DMatrix<f64> {
        self.w.columns(1 + self.d_z, self.d_x).into_owned()
    }
}

/// Evaluates the fitted first stage at every row of `data` and stacks (1, Z, π̂(Z)).
pub fn build_design(data: &Dataset, fit: &FirstStageFit) -> Result<AugmentedDesign> {
    if fit.d_z() != data.d_z() {
        return Err(Error::dim("d_z of first-stage fit", data.d_z(), fit.d_z()));
    }
    if fit.d_x() != data.d_x() {
        return Err(Error::dim("d_x of first-stage fit", data.d_x(), fit.d_x()));
    }
    let pi = fit.eval_pi(data.z())?;
    let mut flags = Vec::new();
    if fit.outside_support(data.z()) {
        flag::raise(&mut flags, Flag::Extrapolation);
    }
    let (n, dz, dx) = (data.n(), data.d_z(), data.d_x());
    let w = DMatrix::from_fn(n, 1 + dz + dx, |i, j| match j {
        0 => 1.0,
        j if j <= dz => data.z()[(i, j - 1)],
        j => pi[(i, j - 1 - dz)],
    });
    Ok(AugmentedDesign {
        w,
        source: fit.method(),
        d_z: dz,
        d_x: dx,
        flags,
    })
}
