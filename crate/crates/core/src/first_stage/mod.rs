//! Nonparametric first stage: π̂(z) ≈ E[X | Z = z] and ĥ(z) ≈ E[Y | Z = z].
//!
//! Three interchangeable smoothers are provided. Cell means need finite support,
//! Nadaraya–Watson uses a product Gaussian kernel with leave-one-out CV, and the
//! cubic B-spline (scalar Z only) selects its degrees of freedom the same way.
//! π̂ and ĥ tune their hyperparameters independently.

mod cells;
mod nw;
mod spline;

pub use cells::{distinct_rows, CellTable, DEFAULT_CELL_CAP};
pub use nw::{Kernel, KernelCv, AUTO_GRID_HI, AUTO_GRID_LO, AUTO_GRID_LEN};
pub use spline::{Spline, SplineBasis, DEFAULT_DF_GRID};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flag::{self, Flag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    CellMeans,
    NadarayaWatson,
    CubicSpline,
}

/// Candidate bandwidths for Nadaraya–Watson.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthGrid {
    /// 30 log-spaced multiples in [0.05, 3] of σ_j·n^(−1/5), shared across dimensions.
    #[default]
    Auto,
    /// Absolute bandwidths, each applied to every dimension of Z.
    Fixed(Vec<f64>),
}

/// Degrees of freedom (number of basis functions) for the cubic spline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplineDf {
    /// Leave-one-out CV over 4..=20.
    #[default]
    Auto,
    Fixed(usize),
    Grid(Vec<usize>),
}

/// Smoother choice plus hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum FirstStageConfig {
    Cells {
        #[serde(default = "default_cap")]
        cap: usize,
    },
    Nw {
        #[serde(default)]
        grid: BandwidthGrid,
    },
    Spline {
        #[serde(default)]
        df: SplineDf,
    },
}

fn default_cap() -> usize {
    DEFAULT_CELL_CAP
}

impl Default for FirstStageConfig {
    /// Nadaraya–Watson with the automatic bandwidth grid.
    fn default() -> Self {
        FirstStageConfig::Nw {
            grid: BandwidthGrid::Auto,
        }
    }
}

impl FirstStageConfig {
    pub fn method(&self) -> Method {
        match self {
            FirstStageConfig::Cells { .. } => Method::CellMeans,
            FirstStageConfig::Nw { .. } => Method::NadarayaWatson,
            FirstStageConfig::Spline { .. } => Method::CubicSpline,
        }
    }
}

/// A smoothing hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Candidate {
    Bandwidth(Vec<f64>),
    Df(usize),
}

/// Outcome of leave-one-out CV over a candidate grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandwidthSelection {
    pub grid: Vec<Candidate>,
    /// Mean squared leave-one-out error per candidate (infinite when no term was usable).
    pub criterion_values: Vec<f64>,
    pub chosen: usize,
    /// Whether any candidate skipped saturated leave-one-out terms.
    pub saturated: bool,
}

/// Picks the first minimum, so ties go to the earlier (smaller) candidate.
pub(crate) fn argmin_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if !s.is_finite() {
            continue;
        }
        match best {
            Some(b) if scores[b] <= s => {}
            _ => best = Some(i),
        }
    }
    best
}

/// A fitted smoother over one or more response columns.
#[derive(Debug, Clone)]
pub enum Smoother {
    Cells(CellTable),
    Kernel(Kernel),
    Spline(Spline),
}

impl Smoother {
    pub fn eval(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Smoother::Cells(c) => c.eval(z),
            Smoother::Kernel(k) => k.eval(z),
            Smoother::Spline(s) => s.eval(z),
        }
    }
}

/// Fitted π̂ and ĥ with their tuning metadata.
#[derive(Debug, Clone)]
pub struct FirstStageFit {
    method: Method,
    pi: Smoother,
    h: Smoother,
    d_z: usize,
    d_x: usize,
    /// Per-dimension (min, max) of the training Z.
    pub training_support: Vec<(f64, f64)>,
    /// CV results for π̂ and ĥ, in that order, when a grid was searched.
    pub selection: Vec<BandwidthSelection>,
    pub flags: Vec<Flag>,
}

impl FirstStageFit {
    pub fn method(&self) -> Method {
        self.method
    }
    pub fn d_z(&self) -> usize {
        self.d_z
    }
    pub fn d_x(&self) -> usize {
        self.d_x
    }
    pub fn pi_smoother(&self) -> &Smoother {
        &self.pi
    }
    pub fn h_smoother(&self) -> &Smoother {
        &self.h
    }

    /// π̂ evaluated at each row of `z` (rows × d_x).
    pub fn eval_pi(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dz(z)?;
        self.pi.eval(z)
    }

    /// ĥ evaluated at each row of `z`.
    pub fn eval_h(&self, z: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_dz(z)?;
        Ok(self.h.eval(z)?.column(0).into_owned())
    }

    fn check_dz(&self, z: &DMatrix<f64>) -> Result<()> {
        if z.ncols() != self.d_z {
            return Err(Error::dim("columns of evaluation Z", self.d_z, z.ncols()));
        }
        Ok(())
    }

    /// Bandwidths of π̂ and ĥ (Nadaraya–Watson only).
    pub fn bandwidths(&self) -> Option<(&[f64], &[f64])> {
        match (&self.pi, &self.h) {
            (Smoother::Kernel(a), Smoother::Kernel(b)) => Some((a.bandwidth(), b.bandwidth())),
            _ => None,
        }
    }

    /// Degrees of freedom of π̂ and ĥ (spline only).
    pub fn spline_df(&self) -> Option<(usize, usize)> {
        match (&self.pi, &self.h) {
            (Smoother::Spline(a), Smoother::Spline(b)) => Some((a.basis().df(), b.basis().df())),
            _ => None,
        }
    }

    /// True when some row of `z` lies outside the training box (never for cell means).
    pub fn outside_support(&self, z: &DMatrix<f64>) -> bool {
        if self.method == Method::CellMeans {
            return false;
        }
        (0..z.nrows()).any(|i| {
            self.training_support
                .iter()
                .enumerate()
                .any(|(j, &(lo, hi))| z[(i, j)] < lo || z[(i, j)] > hi)
        })
    }
}

pub(crate) fn support_of(z: &DMatrix<f64>) -> Vec<(f64, f64)> {
    (0..z.ncols())
        .map(|j| {
            z.column(j)
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
        })
        .collect()
}

/// Cell-mean first stage on finite-support Z with the default distinct-row cap.
pub fn fit_cell_means(data: &Dataset) -> Result<FirstStageFit> {
    fit_cell_means_capped(data, DEFAULT_CELL_CAP)
}

pub fn fit_cell_means_capped(data: &Dataset, cap: usize) -> Result<FirstStageFit> {
    let pi = CellTable::fit(data.z(), data.x(), cap)?;
    let h = CellTable::fit(data.z(), &column(data.y()), cap)?;
    Ok(FirstStageFit {
        method: Method::CellMeans,
        pi: Smoother::Cells(pi),
        h: Smoother::Cells(h),
        d_z: data.d_z(),
        d_x: data.d_x(),
        training_support: support_of(data.z()),
        selection: Vec::new(),
        flags: Vec::new(),
    })
}

/// Nadaraya–Watson first stage; π̂ and ĥ each get their own CV-selected bandwidth.
pub fn fit_nadaraya_watson(data: &Dataset, grid: &BandwidthGrid) -> Result<FirstStageFit> {
    if data.n() < 10 {
        return Err(Error::invalid("Nadaraya-Watson needs at least 10 observations"));
    }
    let cv = KernelCv::new(data.z(), grid)?;
    let (sel_pi, sel_h) = cv.select_pair(data.x(), data.y())?;
    let h_pi = cv.candidate_bandwidth(sel_pi.chosen);
    let h_h = cv.candidate_bandwidth(sel_h.chosen);
    let mut flags = Vec::new();
    if sel_pi.saturated || sel_h.saturated {
        flag::raise(&mut flags, Flag::SaturatedLoo);
    }
    Ok(FirstStageFit {
        method: Method::NadarayaWatson,
        pi: Smoother::Kernel(Kernel::new(data.z().clone(), data.x().clone(), h_pi)?),
        h: Smoother::Kernel(Kernel::new(data.z().clone(), column(data.y()), h_h)?),
        d_z: data.d_z(),
        d_x: data.d_x(),
        training_support: support_of(data.z()),
        selection: vec![sel_pi, sel_h],
        flags,
    })
}

/// Cubic B-spline first stage for scalar Z.
pub fn fit_cubic_spline(data: &Dataset, df: &SplineDf) -> Result<FirstStageFit> {
    if data.d_z() != 1 {
        return Err(Error::invalid(
            "the cubic spline smoother needs scalar Z; use Nadaraya-Watson for d_z > 1",
        ));
    }
    let z = data.z().column(0).into_owned();
    let grid = spline_grid(df, data.n())?;
    let (pi, sel_pi) = Spline::select(&z, data.x(), &grid)?;
    let (h, sel_h) = Spline::select(&z, &column(data.y()), &grid)?;
    let mut flags = Vec::new();
    if sel_pi.saturated || sel_h.saturated {
        flag::raise(&mut flags, Flag::SaturatedLoo);
    }
    let selection = if grid.len() > 1 { vec![sel_pi, sel_h] } else { Vec::new() };
    Ok(FirstStageFit {
        method: Method::CubicSpline,
        pi: Smoother::Spline(pi),
        h: Smoother::Spline(h),
        d_z: 1,
        d_x: data.d_x(),
        training_support: support_of(data.z()),
        selection,
        flags,
    })
}

fn spline_grid(df: &SplineDf, n: usize) -> Result<Vec<usize>> {
    let grid: Vec<usize> = match df {
        SplineDf::Auto => DEFAULT_DF_GRID.filter(|&d| d <= n).collect(),
        SplineDf::Fixed(d) => vec![*d],
        SplineDf::Grid(g) => g.clone(),
    };
    if grid.is_empty() {
        return Err(Error::invalid("empty degrees-of-freedom grid"));
    }
    for &d in &grid {
        if d < 4 {
            return Err(Error::invalid(format!("cubic spline needs df >= 4, got {d}")));
        }
        if d > n {
            return Err(Error::invalid(format!("spline df {d} exceeds n = {n}")));
        }
    }
    Ok(grid)
}

pub fn fit_first_stage(data: &Dataset, config: &FirstStageConfig) -> Result<FirstStageFit> {
    match config {
        FirstStageConfig::Cells { cap } => fit_cell_means_capped(data, *cap),
        FirstStageConfig::Nw { grid } => fit_nadaraya_watson(data, grid),
        FirstStageConfig::Spline { df } => fit_cubic_spline(data, df),
    }
}

pub(crate) fn column(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

/// Leave-one-out score of one candidate, summed across the columns of `responses`.
///
/// For Nadaraya–Watson the delete-one fit is computed from off-diagonal kernel sums,
/// which is algebraically the same as refitting without row i. Spline knots stay at
/// their full-sample positions, so the hat-diagonal shortcut is exact for that smoother.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoocvScore {
    pub score: f64,
    /// Number of skipped terms with no off-diagonal weight (self-weight saturation).
    pub saturated: usize,
}

pub fn loocv_score(
    z: &DMatrix<f64>,
    responses: &DMatrix<f64>,
    candidate: &Candidate,
) -> Result<LoocvScore> {
    if z.nrows() != responses.nrows() {
        return Err(Error::dim("rows of responses", z.nrows(), responses.nrows()));
    }
    match candidate {
        Candidate::Bandwidth(h) => nw::loocv(z, responses, h),
        Candidate::Df(df) => {
            if z.ncols() != 1 {
                return Err(Error::invalid("spline CV needs scalar Z"));
            }
            let zc = z.column(0).into_owned();
            spline::loocv(&zc, responses, *df)
        }
    }
}

/// A linear smoother frozen at its hyperparameter, mapping a response on the
/// training rows to fitted values on the same rows.
#[derive(Debug, Clone)]
pub enum Operator {
    Cells { labels: Vec<usize>, counts: Vec<usize> },
    /// Row-stochastic weights, stored sparsely by row.
    Kernel { rows: Vec<Vec<(usize, f64)>> },
    /// Orthonormal basis Q of the spline column space: fitted = Q Qᵀ r.
    Projection { q: DMatrix<f64> },
}

impl Operator {
    pub fn apply(&self, r: &DVector<f64>) -> DVector<f64> {
        match self {
            Operator::Cells { labels, counts } => {
                let mut sums = vec![0.0; counts.len()];
                for (i, &k) in labels.iter().enumerate() {
                    sums[k] += r[i];
                }
                DVector::from_fn(labels.len(), |i, _| sums[labels[i]] / counts[labels[i]] as f64)
            }
            Operator::Kernel { rows } => DVector::from_fn(rows.len(), |i, _| {
                rows[i].iter().map(|&(j, w)| w * r[j]).sum()
            }),
            Operator::Projection { q } => q * q.tr_mul(r),
        }
    }

    /// Fitted values at the training rows for a matrix of responses.
    pub fn apply_columns(&self, r: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(r.nrows(), r.ncols());
        for j in 0..r.ncols() {
            out.set_column(j, &self.apply(&r.column(j).into_owned()));
        }
        out
    }
}

/// Tunes the smoother on `response` and returns it frozen as an operator.
pub fn build_operator(
    z: &DMatrix<f64>,
    response: &DVector<f64>,
    config: &FirstStageConfig,
) -> Result<(Operator, Option<Candidate>)> {
    let r = column(response);
    match config {
        FirstStageConfig::Cells { cap } => {
            let (keys, labels) = distinct_rows(z, *cap)?;
            let mut counts = vec![0usize; keys.len()];
            for &k in &labels {
                counts[k] += 1;
            }
            Ok((Operator::Cells { labels, counts }, None))
        }
        FirstStageConfig::Nw { grid } => {
            let cv = KernelCv::new(z, grid)?;
            let sel = cv.select(&r)?;
            let h = cv.candidate_bandwidth(sel.chosen);
            let rows = nw::weight_rows(z, &h)?;
            Ok((Operator::Kernel { rows }, Some(Candidate::Bandwidth(h))))
        }
        FirstStageConfig::Spline { df } => {
            if z.ncols() != 1 {
                return Err(Error::invalid("the cubic spline smoother needs scalar Z"));
            }
            let zc = z.column(0).into_owned();
            let grid = spline_grid(df, z.nrows())?;
            let (fit, sel) = Spline::select(&zc, &r, &grid)?;
            let q = fit.training_q().clone();
            Ok((Operator::Projection { q }, Some(Candidate::Df(grid[sel.chosen]))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_data(seed: u64, n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x: Vec<f64> = z.iter().map(|v| v.sin() + rng.random_range(-0.3..0.3)).collect();
        let y: Vec<f64> = z.iter().map(|v| v * v + rng.random_range(-0.3..0.3)).collect();
        Dataset::from_columns(&y, &z, &x).unwrap()
    }

    fn affine(data: &Dataset, a: f64, b: f64) -> Dataset {
        let x = data.x().map(|v| a * v + b);
        Dataset::new(data.y().clone(), data.z().clone(), x).unwrap()
    }

    #[test]
    fn argmin_prefers_first_tie() {
        assert_eq!(argmin_first(&[3.0, 1.0, 1.0, 2.0]), Some(1));
        assert_eq!(argmin_first(&[f64::INFINITY, 2.0]), Some(1));
        assert_eq!(argmin_first(&[f64::INFINITY]), None);
    }

    #[test]
    fn constant_response_has_zero_score() {
        let data = random_data(3, 30);
        let r = DMatrix::from_element(30, 1, 2.5);
        let s = loocv_score(data.z(), &r, &Candidate::Bandwidth(vec![0.4])).unwrap();
        assert!(s.score.abs() < 1e-24);
        let s = loocv_score(data.z(), &r, &Candidate::Df(6)).unwrap();
        assert!(s.score.abs() < 1e-20);
    }

    #[test]
    fn larger_noise_gives_larger_cv_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200;
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let e: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let best = |scale: f64| {
            let x: Vec<f64> = z.iter().zip(&e).map(|(v, e)| v.cos() + scale * e).collect();
            let d = Dataset::from_columns(&x, &z, &x).unwrap();
            let fit = fit_nadaraya_watson(&d, &BandwidthGrid::Auto).unwrap();
            let sel = &fit.selection[0];
            sel.criterion_values[sel.chosen]
        };
        assert!(best(0.2) < best(0.8));
    }

    #[test]
    fn operator_matches_fit_at_training_points() {
        let data = random_data(5, 40);
        for config in [
            FirstStageConfig::Nw { grid: BandwidthGrid::Fixed(vec![0.3]) },
            FirstStageConfig::Spline { df: SplineDf::Fixed(7) },
        ] {
            let fit = fit_first_stage(&data, &config).unwrap();
            let xcol = data.x().column(0).into_owned();
            let (op, _) = build_operator(data.z(), &xcol, &config).unwrap();
            let a = op.apply(&xcol);
            let b = fit.eval_pi(data.z()).unwrap();
            for i in 0..data.n() {
                assert!((a[i] - b[(i, 0)]).abs() < 1e-10, "{config:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn smoothers_are_linear_in_response(seed in 0u64..500, a in -3.0f64..3.0, b in -5.0f64..5.0) {
            let data = random_data(seed, 30);
            let shifted = affine(&data, a, b);
            let configs = [
                FirstStageConfig::Nw { grid: BandwidthGrid::Fixed(vec![0.35]) },
                FirstStageConfig::Spline { df: SplineDf::Fixed(6) },
            ];
            for config in &configs {
                let f0 = fit_first_stage(&data, config).unwrap().eval_pi(data.z()).unwrap();
                let f1 = fit_first_stage(&shifted, config).unwrap().eval_pi(data.z()).unwrap();
                for i in 0..30 {
                    prop_assert!((f1[(i, 0)] - (a * f0[(i, 0)] + b)).abs() < 1e-10 * (1.0 + b.abs() + a.abs()));
                }
            }
            // cell means on a coarsened Z
            let zc = data.z().map(|v| v.round());
            let disc = Dataset::new(data.y().clone(), zc.clone(), data.x().clone()).unwrap();
            let disc2 = Dataset::new(data.y().clone(), zc.clone(), shifted.x().clone()).unwrap();
            let f0 = fit_cell_means(&disc).unwrap().eval_pi(&zc).unwrap();
            let f1 = fit_cell_means(&disc2).unwrap().eval_pi(&zc).unwrap();
            for i in 0..30 {
                prop_assert!((f1[(i, 0)] - (a * f0[(i, 0)] + b)).abs() < 1e-10 * (1.0 + b.abs() + a.abs()));
            }
        }

        #[test]
        fn nw_fits_are_convex_combinations(seed in 0u64..500, h in 0.05f64..3.0) {
            let data = random_data(seed, 25);
            let fit = fit_nadaraya_watson(&data, &BandwidthGrid::Fixed(vec![h])).unwrap();
            let grid = DMatrix::from_fn(41, 1, |i, _| -2.0 + 0.1 * i as f64);
            let p = fit.eval_pi(&grid).unwrap();
            let lo = data.x().min();
            let hi = data.x().max();
            for v in p.iter() {
                prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
            }
        }
    }
}
