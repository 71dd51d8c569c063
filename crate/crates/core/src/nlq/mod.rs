//! Two-step nonlinear and quantile regressions with an included instrument.
//!
//! For a model Y = f(Z, X, θ) + ε the pseudo-response f(Zᵢ, Xᵢ, θ) is smoothed on Z
//! to give m̂(Z, θ), and θ minimizes (1/n)Σ(Yᵢ − m̂(Zᵢ, θ))². The smoother's
//! hyperparameter is tuned once at a reference θ and then frozen, so m̂(·, θ) is a
//! fixed linear map applied to the pseudo-response at every θ the search visits.
//!
//! The quantile estimator smooths the indicator 1{Yᵢ ≤ α + Zᵢ′β + Xᵢ′γ} and
//! minimizes (1/n)Σ(m̂(Zᵢ, θ) − τ)².

pub mod optim;

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};
use statrs::statistics::{Data, OrderStatistics, Statistics};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::first_stage::{build_operator, fit_first_stage, Candidate, FirstStageConfig, Operator};
use crate::flag::{self, Flag};
use crate::linalg;
use crate::linear::{fit_theta_hat, EstimateResult, EstimatorTag};

use optim::{default_starts, multi_start, Bounds, NelderMeadOptions};

pub const DEFAULT_RADIUS: f64 = 10.0;
/// Relative finite-difference step: h_j = FD_STEP·(1 + |θ_j|).
pub const FD_STEP: f64 = 1e-6;
/// Conditional density values below this raise [`Flag::DensityNearZero`].
pub const DENSITY_FLOOR: f64 = 1e-6;
/// R² of π̃̂ on (1, Z) above which the quantile design is treated as multicollinear.
pub const LEMMA_R2: f64 = 0.999;
const CACHE_CAP: usize = 256;

pub type ModelFn = Arc<dyn Fn(&[f64], &[f64], &[f64]) -> f64 + Send + Sync>;
/// Writes ∇θ f(z, x, θ) into the output slice.
pub type GradFn = Arc<dyn Fn(&[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// f(z, x, θ) known up to θ.
#[derive(Clone)]
pub struct NonlinearModel {
    pub name: String,
    f: ModelFn,
    grad: Option<GradFn>,
    pub theta_dim: usize,
    /// Coefficient labels; the dataset's (1, Z, X) names when None.
    pub param_names: Option<Vec<String>>,
    /// Search region Θ₀; a ±10 box around the start when None.
    pub theta_box: Option<Bounds>,
    /// Whether θ has the (α, β, γ) layout of the linear index.
    linear_index: bool,
}

impl std::fmt::Debug for NonlinearModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NonlinearModel")
            .field("name", &self.name)
            .field("theta_dim", &self.theta_dim)
            .field("has_gradient", &self.grad.is_some())
            .finish()
    }
}

fn index(z: &[f64], x: &[f64], t: &[f64]) -> f64 {
    let mut v = t[0];
    for (a, b) in z.iter().chain(x).zip(&t[1..]) {
        v += a * b;
    }
    v
}

impl NonlinearModel {
    pub fn new(name: impl Into<String>, theta_dim: usize, f: ModelFn) -> Self {
        Self {
            name: name.into(),
            f,
            grad: None,
            theta_dim,
            param_names: None,
            theta_box: None,
            linear_index: false,
        }
    }

    pub fn with_gradient(mut self, g: GradFn) -> Self {
        self.grad = Some(g);
        self
    }

    pub fn with_names(mut self, names: Vec<String>) -> Self {
        self.param_names = Some(names);
        self
    }

    pub fn with_box(mut self, b: Bounds) -> Self {
        self.theta_box = Some(b);
        self
    }

    /// f = α + z′β + x′γ.
    pub fn linear(d_z: usize, d_x: usize) -> Self {
        let mut m = Self::new("linear", 1 + d_z + d_x, Arc::new(index));
        m.grad = Some(Arc::new(|z: &[f64], x: &[f64], _t: &[f64], out: &mut [f64]| {
            out[0] = 1.0;
            for (o, v) in out[1..].iter_mut().zip(z.iter().chain(x)) {
                *o = *v;
            }
        }));
        m.linear_index = true;
        m
    }

    /// f = exp(α + z′β + x′γ).
    pub fn exp_index(d_z: usize, d_x: usize) -> Self {
        let mut m = Self::new("exp-index", 1 + d_z + d_x, Arc::new(|z: &[f64], x: &[f64], t: &[f64]| index(z, x, t).exp()));
        m.grad = Some(Arc::new(|z: &[f64], x: &[f64], t: &[f64], out: &mut [f64]| {
            let e = index(z, x, t).exp();
            out[0] = e;
            for (o, v) in out[1..].iter_mut().zip(z.iter().chain(x)) {
                *o = e * v;
            }
        }));
        m.linear_index = true;
        m
    }

    pub fn by_name(name: &str, d_z: usize, d_x: usize) -> Result<Self> {
        match name {
            "linear" => Ok(Self::linear(d_z, d_x)),
            "exp-index" | "exp_index" => Ok(Self::exp_index(d_z, d_x)),
            other => Err(Error::invalid(format!("unknown nonlinear model `{other}` (built-ins: linear, exp-index)"))),
        }
    }

    fn eval(&self, z: &[f64], x: &[f64], t: &[f64]) -> f64 {
        (self.f)(z, x, t)
    }

    fn names(&self, data: &Dataset) -> Result<Vec<String>> {
        let names = match &self.param_names {
            Some(n) => n.clone(),
            None if self.theta_dim == data.d() => data.coefficient_names(),
            None => (1..=self.theta_dim).map(|j| format!("theta{j}")).collect(),
        };
        if names.len() != self.theta_dim {
            return Err(Error::dim("parameter names", self.theta_dim, names.len()));
        }
        Ok(names)
    }
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn theta_key(t: &[f64]) -> Vec<u64> {
    t.iter().map(|v| (if *v == 0.0 { 0.0 } else { *v }).to_bits()).collect()
}

/// m̂(·, θ) at the training rows: a frozen smoother applied to a θ-indexed
/// pseudo-response, memoized by the exact bits of θ.
pub struct ProjectedMoment {
    op: Operator,
    pseudo: Box<dyn Fn(&[f64]) -> Option<DVector<f64>> + Send + Sync>,
    cache: RwLock<HashMap<Vec<u64>, Arc<DVector<f64>>>>,
    pub tuned: Option<Candidate>,
}

impl ProjectedMoment {
    /// Tunes `config` on the pseudo-response at `reference` and freezes it.
    pub fn new(
        z: &DMatrix<f64>,
        config: &FirstStageConfig,
        reference: &[f64],
        pseudo: Box<dyn Fn(&[f64]) -> Option<DVector<f64>> + Send + Sync>,
    ) -> Result<Self> {
        let r = pseudo(reference).ok_or_else(|| Error::numeric("pseudo-response is not finite at the reference parameter"))?;
        let (op, tuned) = build_operator(z, &r, config)?;
        Ok(Self {
            op,
            pseudo,
            cache: RwLock::new(HashMap::new()),
            tuned,
        })
    }

    /// None when the pseudo-response is not finite at θ.
    pub fn eval(&self, theta: &[f64]) -> Option<Arc<DVector<f64>>> {
        let key = theta_key(theta);
        if let Some(hit) = self.cache.read().ok().and_then(|c| c.get(&key).cloned()) {
            return Some(hit);
        }
        let m = Arc::new(self.op.apply(&(self.pseudo)(theta)?));
        if let Ok(mut c) = self.cache.write() {
            if c.len() < CACHE_CAP {
                c.insert(key, m.clone());
            }
        }
        Some(m)
    }

    pub fn operator(&self) -> &Operator {
        &self.op
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearOptions {
    pub smoother: FirstStageConfig,
    /// Search start and bandwidth reference; OLS on (1, Z, X) for linear-index
    /// models and zeros otherwise.
    pub start: Option<Vec<f64>>,
    pub radius: f64,
    pub tol: f64,
    /// Use ĥ(Z) in place of Y in the objective.
    pub star: bool,
}

impl Default for NonlinearOptions {
    fn default() -> Self {
        Self {
            smoother: FirstStageConfig::default(),
            start: None,
            radius: DEFAULT_RADIUS,
            tol: optim::DEFAULT_TOL,
            star: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearFit {
    pub result: EstimateResult,
    pub objective: f64,
    /// Objective at each multi-start point.
    pub start_values: Vec<f64>,
    /// Minimum reached from each start.
    pub run_values: Vec<f64>,
    pub tuned: Option<Candidate>,
}

fn ols_start(data: &Dataset) -> Vec<f64> {
    linalg::lstsq(&data.raw_design(), data.y())
        .map(|c| c.iter().copied().collect())
        .unwrap_or_else(|_| vec![0.0; data.d()])
}

fn check_start(start: &[f64], dim: usize) -> Result<()> {
    if start.len() != dim {
        return Err(Error::dim("start parameter", dim, start.len()));
    }
    if start.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("start parameter is not finite"));
    }
    Ok(())
}

pub fn fit_nonlinear(data: &Dataset, model: &NonlinearModel, opts: &NonlinearOptions) -> Result<NonlinearFit> {
    let d = model.theta_dim;
    let start = match &opts.start {
        Some(s) => s.clone(),
        None if model.linear_index && d == data.d() => ols_start(data),
        None => vec![0.0; d],
    };
    check_start(&start, d)?;
    let bounds = model.theta_box.clone().unwrap_or_else(|| Bounds::around(&start, opts.radius));
    if bounds.dim() != d {
        return Err(Error::dim("search box", d, bounds.dim()));
    }
    let zr = Arc::new(rows_of(data.z()));
    let xr = Arc::new(rows_of(data.x()));
    let pseudo = {
        let (zr, xr, m) = (zr.clone(), xr.clone(), model.clone());
        move |t: &[f64]| -> Option<DVector<f64>> {
            let v = DVector::from_iterator(zr.len(), zr.iter().zip(xr.iter()).map(|(z, x)| m.eval(z, x, t)));
            v.iter().all(|e| e.is_finite()).then_some(v)
        }
    };
    let pm = ProjectedMoment::new(data.z(), &opts.smoother, &start, Box::new(pseudo.clone()))?;
    let target: DVector<f64> = if opts.star {
        let (op, _) = build_operator(data.z(), data.y(), &opts.smoother)?;
        op.apply(data.y())
    } else {
        data.y().clone()
    };
    let objective = |t: &[f64]| -> f64 {
        match pm.eval(t) {
            Some(m) => (&target - &*m).norm_squared() / target.len() as f64,
            None => f64::INFINITY,
        }
    };
    let nm = NelderMeadOptions {
        tol: opts.tol,
        ..Default::default()
    };
    let search = multi_start(&objective, &default_starts(&bounds, 0.1), &bounds, &nm);
    let theta = search.best.x.clone();

    // ∇θ m̂ at θ̂
    let n = data.n();
    let grad = match &model.grad {
        Some(g) => {
            let mut df = DMatrix::zeros(n, d);
            let mut buf = vec![0.0; d];
            for i in 0..n {
                g(&zr[i], &xr[i], &theta, &mut buf);
                for j in 0..d {
                    df[(i, j)] = buf[j];
                }
            }
            pm.operator().apply_columns(&df)
        }
        None => {
            let base = pm.eval(&theta).ok_or_else(|| Error::numeric("objective is not finite at the estimate"))?;
            let mut g = DMatrix::zeros(n, d);
            for j in 0..d {
                let h = FD_STEP * (1.0 + theta[j].abs());
                let mut tp = theta.clone();
                tp[j] += h;
                let fwd = pseudo(&tp).ok_or_else(|| Error::numeric("pseudo-response is not finite near the estimate"))?;
                let mp = pm.operator().apply(&fwd);
                g.set_column(j, &((mp - &*base) / h));
            }
            g
        }
    };
    let m_hat = linalg::gram(&grad);
    let cond = linalg::check_gram(&m_hat, "E[grad m grad m'] (local identification)").map_err(|e| match e {
        Error::Identification {
            message,
            spectrum,
            eigenvector,
        } => Error::Identification {
            message: format!("{message}; the full-rank condition for local identification of theta fails"),
            spectrum,
            eigenvector,
        },
        other => other,
    })?;
    let resid = DVector::from_iterator(n, (0..n).map(|i| data.y()[i] - model.eval(&zr[i], &xr[i], &theta)));
    let sq: Vec<f64> = resid.iter().map(|e| e * e).collect();
    let omega = linalg::weighted_gram(&grad, &sq);
    let v = linalg::sandwich(&m_hat, &omega)?;

    let mut flags = Vec::new();
    if search.on_boundary {
        flag::raise(&mut flags, Flag::Boundary);
    }
    if search.multimodal {
        flag::raise(&mut flags, Flag::Multimodal);
    }
    let tag = if opts.star { EstimatorTag::NonlinearStar } else { EstimatorTag::Nonlinear };
    let coef = DVector::from_vec(theta);
    let d_beta = if model.linear_index { data.d_z() } else { 0 };
    let result = EstimateResult::assemble(tag, model.names(data)?, &coef, d_beta, v, n, cond, flags)?;
    Ok(NonlinearFit {
        result,
        objective: search.best.value,
        start_values: search.start_values,
        run_values: search.runs.iter().map(|r| r.value).collect(),
        tuned: pm.tuned.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantileOptions {
    pub smoother: FirstStageConfig,
    pub radius: f64,
    pub tol: f64,
}

impl Default for QuantileOptions {
    fn default() -> Self {
        Self {
            smoother: FirstStageConfig::default(),
            radius: DEFAULT_RADIUS,
            tol: optim::DEFAULT_TOL,
        }
    }
}

/// The quantile objective with a smoother frozen at a reference θ.
pub struct QuantileProblem {
    pub tau: f64,
    moment: ProjectedMoment,
}

impl QuantileProblem {
    pub fn new(data: &Dataset, tau: f64, smoother: &FirstStageConfig, reference: &[f64]) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::invalid(format!("tau must lie in (0, 1), got {tau}")));
        }
        check_start(reference, data.d())?;
        let w = data.raw_design();
        let y = data.y().clone();
        let pseudo = move |t: &[f64]| -> Option<DVector<f64>> {
            let th = DVector::from_column_slice(t);
            let idx = &w * th;
            Some(DVector::from_fn(y.len(), |i, _| if y[i] <= idx[i] { 1.0 } else { 0.0 }))
        };
        let moment = ProjectedMoment::new(data.z(), smoother, reference, Box::new(pseudo))?;
        Ok(Self { tau, moment })
    }

    pub fn m_hat(&self, theta: &[f64]) -> Arc<DVector<f64>> {
        self.moment.eval(theta).expect("indicator pseudo-response is always finite")
    }

    pub fn objective(&self, theta: &[f64]) -> f64 {
        let m = self.m_hat(theta);
        m.iter().map(|v| (v - self.tau).powi(2)).sum::<f64>() / m.len() as f64
    }
}

/// Linear τ-quantile regression of Y on (1, Z, X) by iteratively reweighted least squares.
pub fn quantile_regression(data: &Dataset, tau: f64) -> Result<Vec<f64>> {
    let w = data.raw_design();
    let y = data.y();
    let mut coef = linalg::lstsq(&w, y)?;
    for _ in 0..100 {
        let r = y - &w * &coef;
        let wt: Vec<f64> = r
            .iter()
            .map(|e| {
                let a = e.abs().max(1e-6);
                (if *e >= 0.0 { tau } else { 1.0 - tau }) / a
            })
            .collect();
        let rw = DMatrix::from_fn(w.nrows(), w.ncols(), |i, j| w[(i, j)] * wt[i].sqrt());
        let ry = DVector::from_fn(y.len(), |i, _| y[i] * wt[i].sqrt());
        let next = linalg::lstsq(&rw, &ry)?;
        let change = (&next - &coef).amax();
        coef = next;
        if change < 1e-9 {
            break;
        }
    }
    Ok(coef.iter().copied().collect())
}

/// Normal-reference bandwidth for a `dim`-dimensional product Gaussian kernel.
pub fn silverman(v: &[f64], dim: usize) -> f64 {
    let sd = v.iter().copied().std_dev();
    let iqr = Data::new(v.to_vec()).interquartile_range() / 1.349;
    let spread = if iqr > 0.0 { sd.min(iqr) } else { sd };
    let d = dim as f64;
    (4.0 / (d + 2.0)).powf(1.0 / (d + 4.0)) * (v.len() as f64).powf(-1.0 / (d + 4.0)) * spread
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantileMoments {
    /// f̂_{ε|Z}(0 | Zᵢ).
    pub density: Vec<f64>,
    /// π̃̂(Zᵢ) ≈ E[X | Z = Zᵢ, ε = 0], n × d_x.
    pub pi_tilde: DMatrix<f64>,
    /// Rows Ŝᵢ = f̂ᵢ (1, Zᵢ′, π̃̂ᵢ′).
    pub s: DMatrix<f64>,
}

/// Kernel estimates of the density factor and the residual-windowed first stage.
pub fn quantile_moments(data: &Dataset, resid: &DVector<f64>) -> Result<QuantileMoments> {
    let (n, dz, dx) = (data.n(), data.d_z(), data.d_x());
    let e: Vec<f64> = resid.iter().copied().collect();
    let lambda = silverman(&e, 1);
    let hz: Vec<f64> = (0..dz)
        .map(|j| silverman(&data.z().column(j).iter().copied().collect::<Vec<_>>(), dz))
        .collect();
    if !(lambda > 0.0) || hz.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::numeric("degenerate residual or instrument spread for kernel bandwidths"));
    }
    let norm = 1.0 / (lambda * (2.0 * std::f64::consts::PI).sqrt());
    let window: Vec<f64> = e.iter().map(|v| (-0.5 * (v / lambda).powi(2)).exp()).collect();
    let z = data.z();
    let mut density = vec![0.0; n];
    let mut pi_tilde = DMatrix::zeros(n, dx);
    for i in 0..n {
        let (mut kz, mut kw) = (0.0, 0.0);
        let mut num = vec![0.0; dx];
        for j in 0..n {
            let mut s = 0.0;
            for c in 0..dz {
                s += ((z[(i, c)] - z[(j, c)]) / hz[c]).powi(2);
            }
            let k = (-0.5 * s).exp();
            kz += k;
            let kwj = k * window[j];
            kw += kwj;
            for c in 0..dx {
                num[c] += kwj * data.x()[(j, c)];
            }
        }
        density[i] = norm * kw / kz;
        for c in 0..dx {
            pi_tilde[(i, c)] = if kw > 0.0 { num[c] / kw } else { f64::NAN };
        }
    }
    if pi_tilde.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("residual-window weights vanished at some instrument value"));
    }
    let s = DMatrix::from_fn(n, 1 + dz + dx, |i, j| {
        let w = match j {
            0 => 1.0,
            j if j <= dz => z[(i, j - 1)],
            j => pi_tilde[(i, j - 1 - dz)],
        };
        density[i] * w
    });
    Ok(QuantileMoments { density, pi_tilde, s })
}

pub fn fit_quantile(data: &Dataset, tau: f64, opts: &QuantileOptions) -> Result<NonlinearFit> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("tau must lie in (0, 1), got {tau}")));
    }
    let qr = quantile_regression(data, tau)?;
    let lin: Option<Vec<f64>> = fit_first_stage(data, &opts.smoother)
        .and_then(|fs| fit_theta_hat(data, &fs))
        .ok()
        .map(|r| r.coef().iter().copied().collect());
    let reference = lin.clone().unwrap_or_else(|| qr.clone());
    let problem = QuantileProblem::new(data, tau, &opts.smoother, &reference)?;
    let bounds = Bounds::around(&reference, opts.radius);
    let mut starts = vec![reference.clone()];
    if lin.is_some() {
        starts.push(qr.clone());
    }
    starts.extend(default_starts(&bounds, 0.05).into_iter().skip(1));
    for s in starts.iter_mut() {
        bounds.project(s);
    }
    let nm = NelderMeadOptions {
        tol: opts.tol,
        ..Default::default()
    };
    let objective = |t: &[f64]| problem.objective(t);
    let search = multi_start(&objective, &starts, &bounds, &nm);
    let theta = DVector::from_vec(search.best.x.clone());

    let resid = data.y() - data.raw_design() * &theta;
    let qm = quantile_moments(data, &resid)?;
    let mut flags = Vec::new();
    if qm.density.iter().any(|&f| f < DENSITY_FLOOR) {
        flag::raise(&mut flags, Flag::DensityNearZero);
    }
    let lemma = "1, Z and E[X | Z, eps = 0] must not be multicollinear";
    let sigma = linalg::gram(&qm.s);
    let cond = linalg::check_gram(&sigma, "E[S S']").map_err(|e| match e {
        Error::Identification {
            message,
            spectrum,
            eigenvector,
        } => Error::Identification {
            message: format!("{message}; {lemma}"),
            spectrum,
            eigenvector,
        },
        other => other,
    })?;
    let zblock = DMatrix::from_fn(data.n(), 1 + data.d_z(), |i, j| if j == 0 { 1.0 } else { data.z()[(i, j - 1)] });
    for c in 0..data.d_x() {
        let r2 = linalg::r_squared(&zblock, &qm.pi_tilde.column(c).into_owned());
        if r2 > LEMMA_R2 {
            return Err(Error::Identification {
                message: format!(
                    "estimated E[X{} | Z, eps = 0] is affine in Z (R^2 = {r2:.6}); {lemma}",
                    c + 1
                ),
                spectrum: linalg::sym_eigen_desc(&sigma).0,
                eigenvector: None,
            });
        }
    }
    let v = linalg::spd_inverse(&sigma)? * (tau * (1.0 - tau));
    if search.on_boundary {
        flag::raise(&mut flags, Flag::Boundary);
    }
    if search.multimodal {
        flag::raise(&mut flags, Flag::Multimodal);
    }
    let result = EstimateResult::assemble(
        EstimatorTag::Quantile,
        data.coefficient_names(),
        &theta,
        data.d_z(),
        v,
        data.n(),
        cond,
        flags,
    )?;
    Ok(NonlinearFit {
        result,
        objective: search.best.value,
        start_values: search.start_values,
        run_values: search.runs.iter().map(|r| r.value).collect(),
        tuned: problem.moment.tuned.clone(),
    })
}
