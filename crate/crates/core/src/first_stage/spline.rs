//! Least-squares cubic B-spline regression on scalar Z.
//!
//! `df` counts basis functions: df − 4 interior knots sit at empirical quantiles
//! (linear interpolation) and the boundary knots at min/max Z repeat four times.
//! Outside the boundary the end polynomial pieces are continued.

use nalgebra::{DMatrix, DVector};

use super::{argmin_first, BandwidthSelection, Candidate, LoocvScore};
use crate::error::{Error, Result};

pub const DEFAULT_DF_GRID: std::ops::RangeInclusive<usize> = 4..=20;

const DEGREE: usize = 3;
const HAT_SATURATION: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    knots: Vec<f64>,
    df: usize,
}

fn quantile_linear(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

impl SplineBasis {
    pub fn new(z: &DVector<f64>, df: usize) -> Result<Self> {
        if df < DEGREE + 1 {
            return Err(Error::invalid(format!("cubic spline needs df >= 4, got {df}")));
        }
        if df > z.len() {
            return Err(Error::invalid(format!("spline df {df} exceeds n = {}", z.len())));
        }
        let mut sorted: Vec<f64> = z.iter().copied().collect();
        sorted.sort_by(f64::total_cmp);
        let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
        if !(hi > lo) {
            return Err(Error::invalid("spline needs at least two distinct Z values"));
        }
        let interior = df - DEGREE - 1;
        let mut knots = vec![lo; DEGREE + 1];
        for j in 1..=interior {
            knots.push(quantile_linear(&sorted, j as f64 / (interior + 1) as f64));
        }
        knots.extend(std::iter::repeat_n(hi, DEGREE + 1));
        Ok(Self { knots, df })
    }

    pub fn df(&self) -> usize {
        self.df
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Boundary knots (min, max of training Z).
    pub fn boundary(&self) -> (f64, f64) {
        (self.knots[0], self.knots[self.knots.len() - 1])
    }

    fn span(&self, x: f64) -> usize {
        let (first, last) = (DEGREE, self.df - 1);
        if x < self.knots[first + 1] {
            return first;
        }
        if x >= self.knots[last] {
            return last;
        }
        // largest mu in [first, last] with knots[mu] <= x, which skips tied knots
        let mut mu = first;
        let (mut a, mut b) = (first, last);
        while a <= b {
            let mid = (a + b) / 2;
            if self.knots[mid] <= x {
                mu = mid;
                a = mid + 1;
            } else {
                b = mid - 1;
            }
        }
        mu
    }

    /// Nonzero basis values at `x`, written into `out` (length df).
    pub fn row_into(&self, x: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let mu = self.span(x);
        let t = &self.knots;
        let mut n = [0.0; DEGREE + 1];
        let mut left = [0.0; DEGREE + 1];
        let mut right = [0.0; DEGREE + 1];
        n[0] = 1.0;
        for j in 1..=DEGREE {
            left[j] = x - t[mu + 1 - j];
            right[j] = t[mu + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let den = right[r + 1] + left[j - r];
                let temp = if den != 0.0 { n[r] / den } else { 0.0 };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        for (k, v) in n.iter().enumerate() {
            out[mu - DEGREE + k] = *v;
        }
    }

    pub fn design(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(z.len(), self.df);
        let mut row = vec![0.0; self.df];
        for i in 0..z.len() {
            self.row_into(z[i], &mut row);
            for (j, v) in row.iter().enumerate() {
                b[(i, j)] = *v;
            }
        }
        b
    }
}

/// Fitted spline for one or more response columns.
#[derive(Debug, Clone)]
pub struct Spline {
    basis: SplineBasis,
    coef: DMatrix<f64>,
    q: DMatrix<f64>,
}

struct Fitted {
    spline: Spline,
    score: LoocvScore,
}

fn fit_one(z: &DVector<f64>, r: &DMatrix<f64>, df: usize) -> Result<Fitted> {
    let basis = SplineBasis::new(z, df)?;
    let b = basis.design(z);
    let qr = b.qr();
    let rmat = qr.r();
    let diag_max = (0..df).map(|j| rmat[(j, j)].abs()).fold(0.0, f64::max);
    if (0..df).any(|j| rmat[(j, j)].abs() <= 1e-10 * diag_max) {
        return Err(Error::numeric(format!(
            "spline basis is rank deficient at df = {df} (tied knots)"
        )));
    }
    let q = qr.q();
    let qtr = q.tr_mul(r);
    let coef = rmat
        .solve_upper_triangular(&qtr)
        .ok_or_else(|| Error::numeric("spline triangular solve failed"))?;
    let fitted = &q * &qtr;
    let n = z.len();
    let mut sums = vec![0.0; r.ncols()];
    let mut used = 0usize;
    for i in 0..n {
        let hii: f64 = q.row(i).iter().map(|v| v * v).sum();
        if 1.0 - hii <= HAT_SATURATION {
            continue;
        }
        used += 1;
        for (k, s) in sums.iter_mut().enumerate() {
            *s += ((r[(i, k)] - fitted[(i, k)]) / (1.0 - hii)).powi(2);
        }
    }
    let score = if used == 0 {
        f64::INFINITY
    } else {
        sums.iter().sum::<f64>() / used as f64
    };
    Ok(Fitted {
        spline: Spline { basis, coef, q },
        score: LoocvScore {
            score,
            saturated: n - used,
        },
    })
}

pub(crate) fn loocv(z: &DVector<f64>, r: &DMatrix<f64>, df: usize) -> Result<LoocvScore> {
    Ok(fit_one(z, r, df)?.score)
}

impl Spline {
    pub fn fit(z: &DVector<f64>, r: &DMatrix<f64>, df: usize) -> Result<Self> {
        Ok(fit_one(z, r, df)?.spline)
    }

    /// Fits every df in `grid` and keeps the leave-one-out minimizer.
    pub fn select(
        z: &DVector<f64>,
        r: &DMatrix<f64>,
        grid: &[usize],
    ) -> Result<(Self, BandwidthSelection)> {
        if grid.len() == 1 {
            let f = fit_one(z, r, grid[0])?;
            let sel = BandwidthSelection {
                grid: vec![Candidate::Df(grid[0])],
                criterion_values: vec![f.score.score],
                chosen: 0,
                saturated: f.score.saturated > 0,
            };
            return Ok((f.spline, sel));
        }
        let mut values = Vec::with_capacity(grid.len());
        let mut fits: Vec<Option<Spline>> = Vec::with_capacity(grid.len());
        let mut saturated = false;
        for &df in grid {
            match fit_one(z, r, df) {
                Ok(f) => {
                    saturated |= f.score.saturated > 0;
                    values.push(f.score.score);
                    fits.push(Some(f.spline));
                }
                Err(Error::Numeric(_)) => {
                    values.push(f64::INFINITY);
                    fits.push(None);
                }
                Err(e) => return Err(e),
            }
        }
        let chosen = argmin_first(&values)
            .ok_or_else(|| Error::numeric("no spline df candidate produced a usable fit"))?;
        let spline = fits[chosen].take().expect("chosen fit exists");
        Ok((
            spline,
            BandwidthSelection {
                grid: grid.iter().map(|&d| Candidate::Df(d)).collect(),
                criterion_values: values,
                chosen,
                saturated,
            },
        ))
    }

    pub fn basis(&self) -> &SplineBasis {
        &self.basis
    }

    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.coef
    }

    pub(crate) fn training_q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn eval(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if z.ncols() != 1 {
            return Err(Error::dim("columns of spline evaluation Z", 1, z.ncols()));
        }
        let zc = z.column(0).into_owned();
        Ok(self.basis.design(&zc) * &self.coef)
    }
}
