//! Exact-match cell means for finite-support Z.

use std::cmp::Ordering;
use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const DEFAULT_CELL_CAP: usize = 1024;

fn key_of(row: impl Iterator<Item = f64>) -> Vec<u64> {
    // -0.0 and 0.0 compare equal, so they must share a key
    row.map(|v| if v == 0.0 { 0.0f64.to_bits() } else { v.to_bits() })
        .collect()
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Distinct rows of `z` in lexicographic order plus each row's index into them.
pub fn distinct_rows(z: &DMatrix<f64>, cap: usize) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut first_seen: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut keys: Vec<Vec<f64>> = Vec::new();
    let mut raw = Vec::with_capacity(z.nrows());
    for i in 0..z.nrows() {
        let row: Vec<f64> = z.row(i).iter().map(|&v| if v == 0.0 { 0.0 } else { v }).collect();
        let k = key_of(row.iter().copied());
        let next = keys.len();
        let idx = *first_seen.entry(k).or_insert(next);
        if idx == next {
            keys.push(row);
            if keys.len() > cap {
                return Err(Error::CapExceeded {
                    distinct: count_distinct(z),
                    cap,
                });
            }
        }
        raw.push(idx);
    }
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| lex_cmp(&keys[a], &keys[b]));
    let mut rank = vec![0usize; keys.len()];
    for (r, &o) in order.iter().enumerate() {
        rank[o] = r;
    }
    let sorted = order.iter().map(|&o| keys[o].clone()).collect();
    Ok((sorted, raw.into_iter().map(|i| rank[i]).collect()))
}

fn count_distinct(z: &DMatrix<f64>) -> usize {
    let mut seen = std::collections::HashSet::new();
    for i in 0..z.nrows() {
        seen.insert(key_of(z.row(i).iter().copied()));
    }
    seen.len()
}

/// Per-cell means of one or more response columns.
#[derive(Debug, Clone)]
pub struct CellTable {
    keys: Vec<Vec<f64>>,
    lookup: HashMap<Vec<u64>, usize>,
    means: DMatrix<f64>,
    counts: Vec<usize>,
}

impl CellTable {
    pub fn fit(z: &DMatrix<f64>, responses: &DMatrix<f64>, cap: usize) -> Result<Self> {
        let (keys, labels) = distinct_rows(z, cap)?;
        let k = keys.len();
        let m = responses.ncols();
        let mut sums = DMatrix::<f64>::zeros(k, m);
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for j in 0..m {
                sums[(c, j)] += responses[(i, j)];
            }
        }
        let means = DMatrix::from_fn(k, m, |c, j| sums[(c, j)] / counts[c] as f64);
        let lookup = keys
            .iter()
            .enumerate()
            .map(|(i, row)| (key_of(row.iter().copied()), i))
            .collect();
        Ok(Self {
            keys,
            lookup,
            means,
            counts,
        })
    }

    pub fn keys(&self) -> &[Vec<f64>] {
        &self.keys
    }
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }
    pub fn means(&self) -> &DMatrix<f64> {
        &self.means
    }

    pub fn eval(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let m = self.means.ncols();
        let mut out = DMatrix::zeros(z.nrows(), m);
        for i in 0..z.nrows() {
            let key = key_of(z.row(i).iter().copied());
            let c = *self.lookup.get(&key).ok_or_else(|| Error::UnseenPoint {
                point: z.row(i).iter().copied().collect(),
            })?;
            for j in 0..m {
                out[(i, j)] = self.means[(c, j)];
            }
        }
        Ok(out)
    }
}
