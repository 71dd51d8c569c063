//! Discretization estimator: partition supp(Z) and use the cell dummies as instruments.
//!
//! With cell probabilities p̂_k, cell means W̄_k = (1, z̄_k′, x̄_k′)′ and ȳ_k,
//! θ̂_disc = (Σ p̂_k W̄_k W̄_k′)⁻¹ Σ p̂_k W̄_k ȳ_k, which is the same number as the
//! dummy-instrument 2SLS (W̃′P_D W̃)⁻¹ W̃′P_D Y.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Theta};
use crate::error::{Error, Result};
use crate::first_stage::{distinct_rows, DEFAULT_CELL_CAP};
use crate::flag::{self, Flag};
use crate::inference;
use crate::linalg;
use crate::linear::{EstimateResult, EstimatorTag};

pub const DEFAULT_MIN_COUNT: usize = 5;
pub const DEFAULT_SCALAR_CELLS: usize = 10;
pub const DEFAULT_PER_DIM_CELLS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// One cell per distinct Z row (finite support).
    ElementWise,
    /// Empirical quantile ranges of scalar Z.
    QuantileRanges,
    /// Products of per-dimension quantile splits.
    ProductQuantiles,
    /// Breakpoints (and, for vector Z, a merge map) fixed in advance.
    UserSupplied(PartitionSpec),
}

/// Reproducible description of a partition.
///
/// Scalar Z: one breakpoint list; cell k is (b_{k−1}, b_k] with open outer ends.
/// Vector Z: per-dimension breakpoints plus a map from index tuples to cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub breakpoints: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merge_map: Option<Vec<(Vec<usize>, usize)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    ElementWise,
    QuantileRanges,
    ProductQuantiles,
    UserSupplied,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub scheme: SchemeKind,
    /// Cell index (0-based) of every observation.
    pub labels: Vec<usize>,
    pub counts: Vec<usize>,
    pub probs: Vec<f64>,
    /// Row k is W̄_k = (1, z̄_k′, x̄_k′).
    pub w_bar: DMatrix<f64>,
    pub y_bar: DVector<f64>,
    /// Present for quantile-based and user-supplied schemes.
    pub spec: Option<PartitionSpec>,
    pub flags: Vec<Flag>,
}

impl Partition {
    pub fn k(&self) -> usize {
        self.counts.len()
    }

    /// Σ_k p̂_k c_k W̄_k W̄_k′ with c_k = 1 when `scale` is None.
    pub fn weighted_gram(&self, scale: Option<&[f64]>) -> DMatrix<f64> {
        let d = self.w_bar.ncols();
        let mut g = DMatrix::zeros(d, d);
        for k in 0..self.k() {
            let c = scale.map_or(1.0, |s| s[k]);
            let row = self.w_bar.row(k).transpose();
            g += &row * row.transpose() * (self.probs[k] * c);
        }
        g
    }

    /// Builds cell statistics from labels that already cover 0..k.
    fn from_labels(
        data: &Dataset,
        scheme: SchemeKind,
        labels: Vec<usize>,
        k: usize,
        spec: Option<PartitionSpec>,
        flags: Vec<Flag>,
    ) -> Result<Self> {
        let (n, dz, dx) = (data.n(), data.d_z(), data.d_x());
        let d = 1 + dz + dx;
        let mut counts = vec![0usize; k];
        let mut sums = DMatrix::<f64>::zeros(k, d);
        let mut ysum = DVector::<f64>::zeros(k);
        let raw = data.raw_design();
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for j in 0..d {
                sums[(c, j)] += raw[(i, j)];
            }
            ysum[c] += data.y()[i];
        }
        if counts.contains(&0) {
            return Err(Error::numeric("partition has an empty cell after relabeling"));
        }
        let w_bar = DMatrix::from_fn(k, d, |c, j| if j == 0 { 1.0 } else { sums[(c, j)] / counts[c] as f64 });
        let y_bar = DVector::from_fn(k, |c, _| ysum[c] / counts[c] as f64);
        let probs = counts.iter().map(|&c| c as f64 / n as f64).collect();
        if k < d {
            return Err(order_error(k, d));
        }
        Ok(Self {
            scheme,
            labels,
            counts,
            probs,
            w_bar,
            y_bar,
            spec,
            flags,
        })
    }
}

fn order_error(k: usize, d: usize) -> Error {
    Error::Identification {
        message: format!("order condition fails: {k} cells for {d} parameters"),
        spectrum: Vec::new(),
        eigenvector: None,
    }
}

/// Lower-interpolation quantile breakpoints sorted[floor(j(n−1)/K)], j = 1..K−1.
pub fn quantile_breakpoints(values: &[f64], k: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    (1..k).map(|j| sorted[j * (n - 1) / k]).collect()
}

/// Right-closed cell index: the number of breakpoints strictly below `v`.
fn cut(breaks: &[f64], v: f64) -> usize {
    breaks.partition_point(|&b| b < v)
}

pub fn make_partition(data: &Dataset, scheme: &Scheme, k: usize) -> Result<Partition> {
    make_partition_with_floor(data, scheme, k, DEFAULT_MIN_COUNT)
}

/// `k` is the cell count for [`Scheme::QuantileRanges`], the per-dimension count for
/// [`Scheme::ProductQuantiles`], and ignored otherwise. Cells below `min_count`
/// are merged into neighbours (scalar) or the nearest centroid (vector).
pub fn make_partition_with_floor(
    data: &Dataset,
    scheme: &Scheme,
    k: usize,
    min_count: usize,
) -> Result<Partition> {
    let d = data.d();
    match scheme {
        Scheme::ElementWise => {
            let (keys, labels) = distinct_rows(data.z(), DEFAULT_CELL_CAP)?;
            if keys.len() < d {
                return Err(order_error(keys.len(), d));
            }
            Partition::from_labels(data, SchemeKind::ElementWise, labels, keys.len(), None, Vec::new())
        }
        Scheme::QuantileRanges => {
            if data.d_z() != 1 {
                return Err(Error::invalid("quantile ranges need scalar Z; use product quantiles"));
            }
            if k < d {
                return Err(order_error(k, d));
            }
            let z: Vec<f64> = data.z().column(0).iter().copied().collect();
            let mut flags = Vec::new();
            let mut breaks = quantile_breakpoints(&z, k);
            let before = breaks.len();
            breaks.dedup();
            if breaks.len() < before {
                flag::raise(&mut flags, Flag::CollapsedBreakpoints);
            }
            let breaks = merge_scalar(&z, breaks, min_count, &mut flags);
            scalar_partition(data, &z, breaks, SchemeKind::QuantileRanges, flags)
        }
        Scheme::ProductQuantiles => {
            let dz = data.d_z();
            if k.checked_pow(dz as u32).is_none_or(|c| c < d) {
                return Err(order_error(k.saturating_pow(dz as u32), d));
            }
            let mut flags = Vec::new();
            let breaks: Vec<Vec<f64>> = (0..dz)
                .map(|j| {
                    let col: Vec<f64> = data.z().column(j).iter().copied().collect();
                    let mut b = quantile_breakpoints(&col, k);
                    let before = b.len();
                    b.dedup();
                    if b.len() < before {
                        flag::raise(&mut flags, Flag::CollapsedBreakpoints);
                    }
                    b
                })
                .collect();
            let tuples = tuples_of(data, &breaks);
            let total: usize = breaks.iter().map(|b| b.len() + 1).product();
            let map = merge_vector(data, &tuples, min_count, &mut flags);
            if map.len() < total {
                flag::raise(&mut flags, Flag::EmptyCellsRemoved);
            }
            vector_partition(data, &tuples, breaks, map, SchemeKind::ProductQuantiles, flags)
        }
        Scheme::UserSupplied(spec) => user_partition(data, spec),
    }
}

fn scalar_partition(
    data: &Dataset,
    z: &[f64],
    breaks: Vec<f64>,
    scheme: SchemeKind,
    mut flags: Vec<Flag>,
) -> Result<Partition> {
    let raw: Vec<usize> = z.iter().map(|&v| cut(&breaks, v)).collect();
    let mut counts = vec![0usize; breaks.len() + 1];
    raw.iter().for_each(|&c| counts[c] += 1);
    // drop breakpoints that bound empty cells
    let mut kept = Vec::new();
    let mut removed = false;
    for (j, &b) in breaks.iter().enumerate() {
        if counts[j] == 0 {
            removed = true;
            continue;
        }
        kept.push(b);
    }
    if counts[breaks.len()] == 0 {
        removed = true;
        kept.pop();
    }
    if removed {
        flag::raise(&mut flags, Flag::EmptyCellsRemoved);
    }
    let labels: Vec<usize> = z.iter().map(|&v| cut(&kept, v)).collect();
    let k = kept.len() + 1;
    let spec = PartitionSpec {
        breakpoints: vec![kept],
        merge_map: None,
    };
    Partition::from_labels(data, scheme, labels, k, Some(spec), flags)
}

/// Repeatedly folds the smallest under-floor cell into its smaller neighbour.
fn merge_scalar(z: &[f64], mut breaks: Vec<f64>, min_count: usize, flags: &mut Vec<Flag>) -> Vec<f64> {
    loop {
        let mut counts = vec![0usize; breaks.len() + 1];
        z.iter().for_each(|&v| counts[cut(&breaks, v)] += 1);
        // empty cells are left for the relabeling step
        let small = counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0 && c < min_count)
            .min_by_key(|(_, &c)| c)
            .map(|(i, _)| i);
        let Some(i) = small else { return breaks };
        if breaks.is_empty() {
            return breaks;
        }
        let nonempty = |j: usize| counts[j] > 0;
        let left = (0..i).rev().find(|&j| nonempty(j));
        let right = (i + 1..counts.len()).find(|&j| nonempty(j));
        let target = match (left, right) {
            (Some(l), Some(r)) => {
                if counts[l] <= counts[r] {
                    l
                } else {
                    r
                }
            }
            (Some(l), None) => l,
            (None, Some(r)) => r,
            (None, None) => return breaks,
        };
        // remove every breakpoint between cell i and the target cell
        let (a, b) = if target < i { (target, i) } else { (i, target) };
        breaks.drain(a..b);
        flag::raise(flags, Flag::MergedCells);
    }
}

fn tuples_of(data: &Dataset, breaks: &[Vec<f64>]) -> Vec<Vec<usize>> {
    (0..data.n())
        .map(|i| {
            breaks
                .iter()
                .enumerate()
                .map(|(j, b)| cut(b, data.z()[(i, j)]))
                .collect()
        })
        .collect()
}

/// Groups occupied tuples, then merges under-floor groups into the group whose
/// standardized Z centroid is nearest. Returns tuple → cell with cells ordered by
/// their smallest member tuple.
fn merge_vector(
    data: &Dataset,
    tuples: &[Vec<usize>],
    min_count: usize,
    flags: &mut Vec<Flag>,
) -> BTreeMap<Vec<usize>, usize> {
    let dz = data.d_z();
    let sd: Vec<f64> = (0..dz)
        .map(|j| {
            let col: Vec<f64> = data.z().column(j).iter().copied().collect();
            let s = linalg::sample_sd(&col);
            if s > 0.0 { s } else { 1.0 }
        })
        .collect();
    // group id per occupied tuple
    let mut group_of: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for t in tuples {
        let next = group_of.len();
        group_of.entry(t.clone()).or_insert(next);
    }
    // renumber groups in tuple order
    for (i, v) in group_of.values_mut().enumerate() {
        *v = i;
    }
    let mut g_count = vec![0usize; group_of.len()];
    let mut g_sum = vec![vec![0.0; dz]; group_of.len()];
    for (i, t) in tuples.iter().enumerate() {
        let g = group_of[t];
        g_count[g] += 1;
        for j in 0..dz {
            g_sum[g][j] += data.z()[(i, j)] / sd[j];
        }
    }
    let mut alive: Vec<bool> = vec![true; g_count.len()];
    let mut parent: Vec<usize> = (0..g_count.len()).collect();
    loop {
        let small = (0..g_count.len())
            .filter(|&g| alive[g] && g_count[g] < min_count)
            .min_by_key(|&g| g_count[g]);
        let Some(g) = small else { break };
        let centroid = |h: usize| -> Vec<f64> { g_sum[h].iter().map(|s| s / g_count[h] as f64).collect() };
        let cg = centroid(g);
        let target = (0..g_count.len())
            .filter(|&h| alive[h] && h != g)
            .min_by(|&a, &b| {
                let da: f64 = centroid(a).iter().zip(&cg).map(|(x, y)| (x - y).powi(2)).sum();
                let db: f64 = centroid(b).iter().zip(&cg).map(|(x, y)| (x - y).powi(2)).sum();
                da.total_cmp(&db)
            });
        let Some(t) = target else { break };
        alive[g] = false;
        g_count[t] += g_count[g];
        let moved = std::mem::take(&mut g_sum[g]);
        for j in 0..dz {
            g_sum[t][j] += moved[j];
        }
        g_count[g] = 0;
        for p in parent.iter_mut() {
            if *p == g {
                *p = t;
            }
        }
        flag::raise(flags, Flag::MergedCells);
    }
    // final cells numbered by first surviving group in tuple order
    let mut cell_of_root: BTreeMap<usize, usize> = BTreeMap::new();
    let mut out = BTreeMap::new();
    for (t, &g) in &group_of {
        let root = parent[g];
        let next = cell_of_root.len();
        let c = *cell_of_root.entry(root).or_insert(next);
        out.insert(t.clone(), c);
    }
    out
}

fn vector_partition(
    data: &Dataset,
    tuples: &[Vec<usize>],
    breaks: Vec<Vec<f64>>,
    map: BTreeMap<Vec<usize>, usize>,
    scheme: SchemeKind,
    flags: Vec<Flag>,
) -> Result<Partition> {
    let k = map.values().copied().max().map_or(0, |m| m + 1);
    let labels: Vec<usize> = tuples.iter().map(|t| map[t]).collect();
    let spec = PartitionSpec {
        breakpoints: breaks,
        merge_map: Some(map.into_iter().collect()),
    };
    Partition::from_labels(data, scheme, labels, k, Some(spec), flags)
}

fn user_partition(data: &Dataset, spec: &PartitionSpec) -> Result<Partition> {
    let dz = data.d_z();
    if spec.breakpoints.len() != dz {
        return Err(Error::dim("breakpoint lists", dz, spec.breakpoints.len()));
    }
    for b in &spec.breakpoints {
        if b.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("breakpoints must be strictly increasing"));
        }
    }
    let mut flags = Vec::new();
    match (&spec.merge_map, dz) {
        (None, 1) => {
            let z: Vec<f64> = data.z().column(0).iter().copied().collect();
            let mut part = scalar_partition(
                data,
                &z,
                spec.breakpoints[0].clone(),
                SchemeKind::UserSupplied,
                flags,
            )?;
            part.scheme = SchemeKind::UserSupplied;
            Ok(part)
        }
        (map, _) => {
            let tuples = tuples_of(data, &spec.breakpoints);
            let given: BTreeMap<Vec<usize>, usize> = match map {
                Some(m) => m.iter().cloned().collect(),
                None => {
                    let mut m = BTreeMap::new();
                    for t in &tuples {
                        let next = m.len();
                        m.entry(t.clone()).or_insert(next);
                    }
                    m
                }
            };
            for t in &tuples {
                if !given.contains_key(t) {
                    return Err(Error::invalid(format!(
                        "observation falls in cell tuple {t:?} missing from the merge map"
                    )));
                }
            }
            // compact to occupied cells, preserving order
            let mut used: Vec<usize> = tuples.iter().map(|t| given[t]).collect();
            used.sort_unstable();
            used.dedup();
            let declared: std::collections::BTreeSet<usize> = given.values().copied().collect();
            if used.len() < declared.len() {
                flag::raise(&mut flags, Flag::EmptyCellsRemoved);
            }
            let remap: BTreeMap<usize, usize> = used.iter().enumerate().map(|(i, &c)| (c, i)).collect();
            let map: BTreeMap<Vec<usize>, usize> = given
                .into_iter()
                .filter_map(|(t, c)| remap.get(&c).map(|&r| (t, r)))
                .collect();
            vector_partition(
                data,
                &tuples,
                spec.breakpoints.clone(),
                map,
                SchemeKind::UserSupplied,
                flags,
            )
        }
    }
}

/// θ̂_disc with the heteroskedasticity-robust plug-in variance.
pub fn fit_theta_disc(data: &Dataset, part: &Partition) -> Result<EstimateResult> {
    if part.labels.len() != data.n() {
        return Err(Error::dim("partition labels", data.n(), part.labels.len()));
    }
    let d = data.d();
    if part.k() < d {
        return Err(order_error(part.k(), d));
    }
    let gram = part.weighted_gram(None);
    let cond = match linalg::check_gram(&gram, "partition Gram matrix") {
        Ok(c) => c,
        Err(Error::Identification {
            spectrum,
            eigenvector,
            ..
        }) => {
            let names = data.coefficient_names();
            let combo = eigenvector
                .as_ref()
                .map(|v| describe_combination(v, &names))
                .unwrap_or_default();
            return Err(Error::Identification {
                message: format!(
                    "partitional multicollinearity: cell means satisfy {combo} in every cell"
                ),
                spectrum,
                eigenvector,
            });
        }
        Err(e) => return Err(e),
    };
    let k = part.k();
    let a = DMatrix::from_fn(k, d, |c, j| part.probs[c].sqrt() * part.w_bar[(c, j)]);
    let b = DVector::from_fn(k, |c, _| part.probs[c].sqrt() * part.y_bar[c]);
    let coef = linalg::lstsq(&a, &b)?;
    let theta = Theta::from_flat(coef.as_slice(), data.d_z())?;
    let parts = inference::variance_disc(data, part, &theta, false)?;
    EstimateResult::assemble(
        EstimatorTag::Disc,
        data.coefficient_names(),
        &coef,
        data.d_z(),
        parts.v,
        data.n(),
        cond,
        part.flags.clone(),
    )
}

fn describe_combination(v: &[f64], names: &[String]) -> String {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let terms: Vec<String> = v
        .iter()
        .zip(names)
        .filter(|(c, _)| c.abs() > 1e-6 * scale)
        .map(|(c, name)| {
            let label = if name == "(intercept)" { "1".to_string() } else { format!("mean({name})") };
            format!("{:+.4}*{label}", c / scale)
        })
        .collect();
    format!("{} = 0", terms.join(" "))
}

/// Population moments of a finite-support design, used for analytic variance comparisons.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDesign {
    /// Row j is W_j = (1, z_j′, π₀(z_j)′).
    pub support: DMatrix<f64>,
    pub probs: Vec<f64>,
    /// Var(ε | Z = z_j).
    pub sigma2: Vec<f64>,
}

impl DiscreteDesign {
    fn check(&self) -> Result<()> {
        let j = self.support.nrows();
        if self.probs.len() != j {
            return Err(Error::dim("support probabilities", j, self.probs.len()));
        }
        if self.sigma2.len() != j {
            return Err(Error::dim("support variances", j, self.sigma2.len()));
        }
        Ok(())
    }

    /// V₀ = Σ₀⁻¹ Ω₀ Σ₀⁻¹ with Σ₀ = E[WW′], Ω₀ = E[ε²WW′].
    pub fn v0(&self) -> Result<DMatrix<f64>> {
        self.check()?;
        let d = self.support.ncols();
        let mut sigma = DMatrix::zeros(d, d);
        let mut omega = DMatrix::zeros(d, d);
        for j in 0..self.support.nrows() {
            let w = self.support.row(j).transpose();
            let ww = &w * w.transpose();
            sigma += &ww * self.probs[j];
            omega += ww * (self.probs[j] * self.sigma2[j]);
        }
        linalg::check_gram(&sigma, "population Gram matrix")?;
        linalg::sandwich(&sigma, &omega)
    }

    /// V₀,disc for the coarse partition assigning support point j to cell `cells[j]`.
    pub fn v_disc(&self, cells: &[usize]) -> Result<DMatrix<f64>> {
        self.check()?;
        if cells.len() != self.support.nrows() {
            return Err(Error::dim("cell assignment", self.support.nrows(), cells.len()));
        }
        let k = cells.iter().copied().max().map_or(0, |m| m + 1);
        let d = self.support.ncols();
        let mut p = vec![0.0; k];
        let mut wsum = DMatrix::zeros(k, d);
        let mut s2 = vec![0.0; k];
        for (j, &c) in cells.iter().enumerate() {
            p[c] += self.probs[j];
            s2[c] += self.probs[j] * self.sigma2[j];
            for l in 0..d {
                wsum[(c, l)] += self.probs[j] * self.support[(j, l)];
            }
        }
        let mut g = DMatrix::zeros(d, d);
        let mut meat = DMatrix::zeros(d, d);
        for c in 0..k {
            if p[c] <= 0.0 {
                return Err(Error::invalid(format!("population cell {c} has zero probability")));
            }
            let wb = wsum.row(c).transpose() / p[c];
            let ww = &wb * wb.transpose();
            g += &ww * p[c];
            meat += ww * s2[c];
        }
        linalg::check_gram(&g, "population partition Gram matrix")?;
        linalg::sandwich(&g, &meat)
    }
}
