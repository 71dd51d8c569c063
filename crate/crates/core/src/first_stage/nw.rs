//! Nadaraya–Watson regression with a product Gaussian kernel.

use nalgebra::DMatrix;

use super::{argmin_first, BandwidthGrid, BandwidthSelection, Candidate, LoocvScore};
use crate::error::{Error, Result};

pub const AUTO_GRID_LEN: usize = 30;
pub const AUTO_GRID_LO: f64 = 0.05;
pub const AUTO_GRID_HI: f64 = 3.0;

/// Kernel weights smaller than this relative to the self weight are dropped from operators.
const OPERATOR_DROP: f64 = 4e-18;

#[derive(Debug, Clone)]
pub struct Kernel {
    z: DMatrix<f64>,
    responses: DMatrix<f64>,
    bandwidth: Vec<f64>,
}

impl Kernel {
    pub fn new(z: DMatrix<f64>, responses: DMatrix<f64>, bandwidth: Vec<f64>) -> Result<Self> {
        if bandwidth.len() != z.ncols() {
            return Err(Error::dim("bandwidth length", z.ncols(), bandwidth.len()));
        }
        if bandwidth.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::invalid("bandwidths must be positive and finite"));
        }
        if responses.nrows() != z.nrows() {
            return Err(Error::dim("rows of responses", z.nrows(), responses.nrows()));
        }
        Ok(Self {
            z,
            responses,
            bandwidth,
        })
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    pub fn eval(&self, at: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (n, m) = (self.z.nrows(), self.responses.ncols());
        let inv: Vec<f64> = self.bandwidth.iter().map(|h| 1.0 / h).collect();
        let mut out = DMatrix::zeros(at.nrows(), m);
        let mut num = vec![0.0; m];
        for r in 0..at.nrows() {
            let mut den = 0.0;
            num.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                let mut q = 0.0;
                for (k, s) in inv.iter().enumerate() {
                    let u = (at[(r, k)] - self.z[(i, k)]) * s;
                    q += u * u;
                }
                let w = (-0.5 * q).exp();
                if w == 0.0 {
                    continue;
                }
                den += w;
                for (j, v) in num.iter_mut().enumerate() {
                    *v += w * self.responses[(i, j)];
                }
            }
            if den == 0.0 {
                return Err(Error::KernelUnderflow {
                    point: at.row(r).iter().copied().collect(),
                    bandwidth: self.bandwidth.clone(),
                });
            }
            for j in 0..m {
                out[(r, j)] = num[j] / den;
            }
        }
        Ok(out)
    }
}

/// Row-normalized kernel weights on the training rows.
pub(crate) fn weight_rows(z: &DMatrix<f64>, bandwidth: &[f64]) -> Result<Vec<Vec<(usize, f64)>>> {
    let n = z.nrows();
    let inv: Vec<f64> = bandwidth.iter().map(|h| 1.0 / h).collect();
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::new();
        let mut den = 0.0;
        for j in 0..n {
            let mut q = 0.0;
            for (k, s) in inv.iter().enumerate() {
                let u = (z[(i, k)] - z[(j, k)]) * s;
                q += u * u;
            }
            let w = (-0.5 * q).exp();
            if w > OPERATOR_DROP {
                den += w;
                row.push((j, w));
            }
        }
        row.iter_mut().for_each(|e| e.1 /= den);
        rows.push(row);
    }
    Ok(rows)
}

/// Pairwise squared scaled distances, shared across a bandwidth grid.
#[derive(Debug, Clone)]
pub struct KernelCv {
    n: usize,
    dist: Vec<f64>,
    scale: Vec<f64>,
    multipliers: Vec<f64>,
}

impl KernelCv {
    pub fn new(z: &DMatrix<f64>, grid: &BandwidthGrid) -> Result<Self> {
        let n = z.nrows();
        match grid {
            BandwidthGrid::Auto => {
                let rate = (n as f64).powf(-0.2);
                let mut scale = Vec::with_capacity(z.ncols());
                for j in 0..z.ncols() {
                    let col: Vec<f64> = z.column(j).iter().copied().collect();
                    let sd = crate::linalg::sample_sd(&col);
                    if !(sd > 0.0) {
                        return Err(Error::invalid(format!(
                            "Z column {j} is constant; kernel bandwidth undefined"
                        )));
                    }
                    scale.push(sd * rate);
                }
                let (lo, hi) = (AUTO_GRID_LO.ln(), AUTO_GRID_HI.ln());
                let step = (hi - lo) / (AUTO_GRID_LEN - 1) as f64;
                let multipliers = (0..AUTO_GRID_LEN)
                    .map(|i| (lo + step * i as f64).exp())
                    .collect();
                Ok(Self::with_scale(z, scale, multipliers))
            }
            BandwidthGrid::Fixed(values) => {
                if values.is_empty() || values.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
                    return Err(Error::invalid("bandwidth grid must be nonempty and positive"));
                }
                let mut m = values.clone();
                m.sort_by(f64::total_cmp);
                m.dedup();
                Ok(Self::with_scale(z, vec![1.0; z.ncols()], m))
            }
        }
    }

    fn with_scale(z: &DMatrix<f64>, scale: Vec<f64>, multipliers: Vec<f64>) -> Self {
        let n = z.nrows();
        let inv: Vec<f64> = scale.iter().map(|s| 1.0 / s).collect();
        let mut dist = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                let mut q = 0.0;
                for (k, s) in inv.iter().enumerate() {
                    let u = (z[(i, k)] - z[(j, k)]) * s;
                    q += u * u;
                }
                dist.push(q);
            }
        }
        Self {
            n,
            dist,
            scale,
            multipliers,
        }
    }

    pub fn len(&self) -> usize {
        self.multipliers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.multipliers.is_empty()
    }

    pub fn candidate_bandwidth(&self, c: usize) -> Vec<f64> {
        self.scale.iter().map(|s| s * self.multipliers[c]).collect()
    }

    fn candidates(&self) -> Vec<Candidate> {
        (0..self.len())
            .map(|c| Candidate::Bandwidth(self.candidate_bandwidth(c)))
            .collect()
    }

    /// Per-column leave-one-out MSE at candidate `c`, plus the number of saturated rows.
    fn column_scores(&self, c: usize, r: &DMatrix<f64>) -> (Vec<f64>, usize) {
        let (n, m) = (self.n, r.ncols());
        let coef = -0.5 / (self.multipliers[c] * self.multipliers[c]);
        let resp: Vec<f64> = (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).map(|(i, j)| r[(i, j)]).collect();
        let mut den = vec![0.0; n];
        let mut num = vec![0.0; n * m];
        let mut idx = 0;
        for i in 0..n {
            for j in i + 1..n {
                let w = (self.dist[idx] * coef).exp();
                idx += 1;
                if w == 0.0 {
                    continue;
                }
                den[i] += w;
                den[j] += w;
                for k in 0..m {
                    num[i * m + k] += w * resp[j * m + k];
                    num[j * m + k] += w * resp[i * m + k];
                }
            }
        }
        let mut sums = vec![0.0; m];
        let mut used = 0usize;
        for i in 0..n {
            if den[i] == 0.0 {
                continue;
            }
            used += 1;
            for k in 0..m {
                let e = resp[i * m + k] - num[i * m + k] / den[i];
                sums[k] += e * e;
            }
        }
        let scores = if used == 0 {
            vec![f64::INFINITY; m]
        } else {
            sums.iter().map(|s| s / used as f64).collect()
        };
        (scores, n - used)
    }

    /// CV over the grid with the score summed over all columns of `r`.
    pub fn select(&self, r: &DMatrix<f64>) -> Result<BandwidthSelection> {
        let mut values = Vec::with_capacity(self.len());
        let mut saturated = false;
        for c in 0..self.len() {
            let (s, sat) = self.column_scores(c, r);
            saturated |= sat > 0;
            values.push(s.iter().sum());
        }
        self.finish(values, saturated)
    }

    /// Independent CV for the X columns and for y, sharing kernel evaluations.
    pub fn select_pair(
        &self,
        x: &DMatrix<f64>,
        y: &nalgebra::DVector<f64>,
    ) -> Result<(BandwidthSelection, BandwidthSelection)> {
        let dx = x.ncols();
        let both = DMatrix::from_fn(self.n, dx + 1, |i, j| if j < dx { x[(i, j)] } else { y[i] });
        let mut vx = Vec::with_capacity(self.len());
        let mut vy = Vec::with_capacity(self.len());
        let mut saturated = false;
        for c in 0..self.len() {
            let (s, sat) = self.column_scores(c, &both);
            saturated |= sat > 0;
            vx.push(s[..dx].iter().sum());
            vy.push(s[dx]);
        }
        Ok((self.finish(vx, saturated)?, self.finish(vy, saturated)?))
    }

    fn finish(&self, values: Vec<f64>, saturated: bool) -> Result<BandwidthSelection> {
        let chosen = argmin_first(&values)
            .ok_or_else(|| Error::numeric("every bandwidth candidate saturated the kernel"))?;
        Ok(BandwidthSelection {
            grid: self.candidates(),
            criterion_values: values,
            chosen,
            saturated,
        })
    }
}

pub(crate) fn loocv(z: &DMatrix<f64>, r: &DMatrix<f64>, h: &[f64]) -> Result<LoocvScore> {
    if h.len() != z.ncols() {
        return Err(Error::dim("bandwidth length", z.ncols(), h.len()));
    }
    if h.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::invalid("bandwidths must be positive and finite"));
    }
    let cv = KernelCv::with_scale(z, h.to_vec(), vec![1.0]);
    let (s, saturated) = cv.column_scores(0, r);
    Ok(LoocvScore {
        score: s.iter().sum(),
        saturated,
    })
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_point_hand_value() {
        let z = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let k = Kernel::new(z.clone(), z, vec![1.0]).unwrap();
        let p = k.eval(&DMatrix::from_column_slice(1, 1, &[0.0])).unwrap();
        let e = (-0.5f64).exp();
        assert!((p[(0, 0)] - e / (1.0 + e)).abs() < 1e-15);
        assert!((p[(0, 0)] - 0.3775).abs() < 1e-4);
    }

    #[test]
    fn constant_response_any_bandwidth() {
        let z = DMatrix::from_fn(15, 1, |i, _| i as f64 * 0.3);
        let x = DMatrix::from_element(15, 1, -1.5);
        for h in [0.01, 0.5, 100.0] {
            let k = Kernel::new(z.clone(), x.clone(), vec![h]).unwrap();
            let p = k.eval(&DMatrix::from_column_slice(3, 1, &[0.1, 2.0, 4.4])).unwrap();
            assert!(p.iter().all(|v| (v + 1.5).abs() < 1e-14));
        }
    }

    #[test]
    fn huge_bandwidth_gives_sample_mean() {
        let z = DMatrix::from_fn(12, 1, |i, _| i as f64);
        let x = DMatrix::from_fn(12, 1, |i, _| (i * i) as f64);
        let mean = x.mean();
        let k = Kernel::new(z, x, vec![1e7]).unwrap();
        let p = k.eval(&DMatrix::from_column_slice(2, 1, &[0.0, 11.0])).unwrap();
        assert!(p.iter().all(|v| (v - mean).abs() < 1e-9));
    }

    #[test]
    fn underflow_is_an_error() {
        let z = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let k = Kernel::new(z.clone(), z, vec![0.01]).unwrap();
        let err = k.eval(&DMatrix::from_column_slice(1, 1, &[500.0])).unwrap_err();
        assert!(matches!(err, Error::KernelUnderflow { point, .. } if point == vec![500.0]));
    }

    fn literal_loo(z: &DMatrix<f64>, r: &DMatrix<f64>, h: &[f64]) -> f64 {
        let n = z.nrows();
        let mut total = 0.0;
        for i in 0..n {
            let keep: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let zt = DMatrix::from_fn(n - 1, z.ncols(), |a, b| z[(keep[a], b)]);
            let rt = DMatrix::from_fn(n - 1, r.ncols(), |a, b| r[(keep[a], b)]);
            let k = Kernel::new(zt, rt, h.to_vec()).unwrap();
            let p = k.eval(&z.rows(i, 1).into_owned()).unwrap();
            for j in 0..r.ncols() {
                total += (r[(i, j)] - p[(0, j)]).powi(2);
            }
        }
        total / n as f64
    }

    #[test]
    fn loocv_matches_literal_refit() {
        let z = DMatrix::from_column_slice(3, 1, &[0.0, 0.7, 1.9]);
        let r = DMatrix::from_column_slice(3, 1, &[1.0, -0.5, 2.0]);
        let fast = loocv(&z, &r, &[0.8]).unwrap();
        assert!((fast.score - literal_loo(&z, &r, &[0.8])).abs() < 1e-10);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = DMatrix::from_fn(25, 2, |_, _| rng.random_range(-1.0..1.0));
        let r = DMatrix::from_fn(25, 2, |_, _| rng.random_range(-1.0..1.0));
        let h = [0.4, 0.6];
        let fast = loocv(&z, &r, &h).unwrap();
        assert_eq!(fast.saturated, 0);
        assert!((fast.score - literal_loo(&z, &r, &h)).abs() < 1e-10);
    }

    #[test]
    fn shortcut_form_agrees() {
        // ((y_i - ŷ_i) / (1 - L_ii))² with the full-sample fit equals the delete-one error
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 20;
        let z = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-2.0..2.0));
        let r = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
        let h = [0.5];
        let k = Kernel::new(z.clone(), r.clone(), h.to_vec()).unwrap();
        let fitted = k.eval(&z).unwrap();
        let mut total = 0.0;
        for i in 0..n {
            let den: f64 = (0..n).map(|j| (-0.5 * ((z[i] - z[j]) / h[0]).powi(2)).exp()).sum();
            let lii = 1.0 / den;
            total += ((r[i] - fitted[i]) / (1.0 - lii)).powi(2);
        }
        assert!((total / n as f64 - loocv(&z, &r, &h).unwrap().score).abs() < 1e-10);
    }

    #[test]
    fn saturated_terms_are_skipped() {
        let z = DMatrix::from_column_slice(4, 1, &[0.0, 0.01, 0.02, 1000.0]);
        let r = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 50.0]);
        let s = loocv(&z, &r, &[0.1]).unwrap();
        assert_eq!(s.saturated, 1);
        assert!(s.score.is_finite());
    }

    #[test]
    fn auto_grid_brackets_reference_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = DMatrix::from_fn(100, 1, |_, _| rng.random_range(-1.0..1.0));
        let cv = KernelCv::new(&z, &BandwidthGrid::Auto).unwrap();
        assert_eq!(cv.len(), AUTO_GRID_LEN);
        let col: Vec<f64> = z.iter().copied().collect();
        let base = crate::linalg::sample_sd(&col) * 100f64.powf(-0.2);
        assert!((cv.candidate_bandwidth(0)[0] - 0.05 * base).abs() < 1e-12);
        assert!((cv.candidate_bandwidth(29)[0] - 3.0 * base).abs() < 1e-12);
    }

    #[test]
    fn pair_selection_matches_separate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = DMatrix::<f64>::from_fn(60, 1, |_, _| rng.random_range(-2.0..2.0));
        let x = z.map(|v| v.sin() + rng.random_range(-0.2..0.2));
        let y = DVector::from_fn(60, |i, _| z[i].powi(2) + rng.random_range(-1.0..1.0));
        let cv = KernelCv::new(&z, &BandwidthGrid::Auto).unwrap();
        let (a, b) = cv.select_pair(&x, &y).unwrap();
        assert_eq!(a.chosen, cv.select(&x).unwrap().chosen);
        assert_eq!(b.chosen, cv.select(&column(&y)).unwrap().chosen);
    }
}
