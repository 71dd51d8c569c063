//! Box-constrained Nelder–Mead with multi-starts and a compass-search polish.
//!
//! Trial points are projected onto the box, so the simplex never leaves it.

pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    /// Symmetric box of half-width `radius` around `center`.
    pub fn around(center: &[f64], radius: f64) -> Self {
        Self {
            lower: center.iter().map(|c| c - radius).collect(),
            upper: center.iter().map(|c| c + radius).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn project(&self, x: &mut [f64]) {
        for ((v, l), u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *u);
        }
    }

    /// True when any coordinate sits within `tol` (relative to the width) of a bound.
    pub fn on_boundary(&self, x: &[f64], tol: f64) -> bool {
        x.iter().zip(&self.lower).zip(&self.upper).any(|((v, l), u)| {
            let w = (u - l).max(f64::MIN_POSITIVE);
            (v - l) <= tol * w || (u - v) <= tol * w
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiStart {
    pub best: Minimum,
    /// One entry per start, in start order.
    pub runs: Vec<Minimum>,
    /// Objective at each start point.
    pub start_values: Vec<f64>,
    pub on_boundary: bool,
    /// Spread of the per-start minima exceeded the tolerance.
    pub multimodal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    /// Stop once the simplex diameter falls below this.
    pub tol: f64,
    /// Initial edge length as a fraction of each box width.
    pub initial_step: f64,
    pub max_evals: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            initial_step: 0.05,
            max_evals: 20_000,
        }
    }
}

fn eval<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], count: &mut usize) -> f64 {
    *count += 1;
    let v = f(x);
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

pub fn nelder_mead<F: Fn(&[f64]) -> f64>(f: &F, start: &[f64], bounds: &Bounds, opts: &NelderMeadOptions) -> Minimum {
    let d = start.len();
    let mut count = 0;
    let mut x0 = start.to_vec();
    bounds.project(&mut x0);
    let mut simplex: Vec<Vec<f64>> = vec![x0.clone()];
    for j in 0..d {
        let mut v = x0.clone();
        let step = opts.initial_step * (bounds.upper[j] - bounds.lower[j]);
        // step inward when the start is at the upper bound
        v[j] = if v[j] + step <= bounds.upper[j] { v[j] + step } else { v[j] - step };
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| eval(f, v, &mut count)).collect();
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    while count < opts.max_evals {
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        let diameter = simplex[1..]
            .iter()
            .map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if diameter < opts.tol {
            break;
        }
        let centroid: Vec<f64> = (0..d).map(|j| simplex[..d].iter().map(|v| v[j]).sum::<f64>() / d as f64).collect();
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid.iter().zip(&simplex[d]).map(|(c, w)| c + t * (c - w)).collect();
            bounds.project(&mut p);
            p
        };
        let xr = along(alpha);
        let fr = eval(f, &xr, &mut count);
        if fr < values[0] {
            let xe = along(gamma);
            let fe = eval(f, &xe, &mut count);
            if fe < fr {
                simplex[d] = xe;
                values[d] = fe;
            } else {
                simplex[d] = xr;
                values[d] = fr;
            }
            continue;
        }
        if fr < values[d - 1] {
            simplex[d] = xr;
            values[d] = fr;
            continue;
        }
        let (xc, fc) = if fr < values[d] {
            let p = along(rho);
            let v = eval(f, &p, &mut count);
            (p, v)
        } else {
            let p = along(-rho);
            let v = eval(f, &p, &mut count);
            (p, v)
        };
        if fc < values[d].min(fr) {
            simplex[d] = xc;
            values[d] = fc;
            continue;
        }
        for i in 1..=d {
            let p: Vec<f64> = simplex[0].iter().zip(&simplex[i]).map(|(b, v)| b + sigma * (v - b)).collect();
            values[i] = eval(f, &p, &mut count);
            simplex[i] = p;
        }
    }
    let best = (0..=d)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)))
        .unwrap_or(0);
    Minimum {
        x: simplex[best].clone(),
        value: values[best],
        evaluations: count,
    }
}

/// Coordinate-wise pattern search from `m`, halving the step down to `tol`.
pub fn compass_refine<F: Fn(&[f64]) -> f64>(f: &F, m: Minimum, bounds: &Bounds, tol: f64, initial: f64) -> Minimum {
    let Minimum {
        mut x,
        mut value,
        mut evaluations,
    } = m;
    let mut step = initial;
    while step >= tol {
        let mut improved = false;
        for j in 0..x.len() {
            for s in [step, -step] {
                let mut p = x.clone();
                p[j] += s;
                bounds.project(&mut p);
                let v = eval(f, &p, &mut evaluations);
                if v < value {
                    value = v;
                    x = p;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
        if evaluations > 200_000 {
            break;
        }
    }
    Minimum { x, value, evaluations }
}

/// Center of the box plus the four inner-corner sign patterns at `spread` of the half-width.
pub fn default_starts(bounds: &Bounds, spread: f64) -> Vec<Vec<f64>> {
    let c = bounds.center();
    let half: Vec<f64> = bounds.lower.iter().zip(&bounds.upper).map(|(l, u)| 0.5 * (u - l)).collect();
    let patterns: [fn(usize) -> f64; 4] = [
        |_| 1.0,
        |_| -1.0,
        |j| if j % 2 == 0 { 1.0 } else { -1.0 },
        |j| if j % 2 == 0 { -1.0 } else { 1.0 },
    ];
    let mut starts = vec![c.clone()];
    for p in patterns {
        starts.push((0..c.len()).map(|j| c[j] + spread * half[j] * p(j)).collect());
    }
    starts
}

/// Runs Nelder–Mead from every start, polishes each, and picks the lowest value
/// (ties broken by lexicographic x).
pub fn multi_start<F: Fn(&[f64]) -> f64>(
    f: &F,
    starts: &[Vec<f64>],
    bounds: &Bounds,
    opts: &NelderMeadOptions,
) -> MultiStart {
    let mut start_values = Vec::with_capacity(starts.len());
    let runs: Vec<Minimum> = starts
        .iter()
        .map(|s| {
            let mut p = s.clone();
            bounds.project(&mut p);
            start_values.push({
                let v = f(&p);
                if v.is_nan() { f64::INFINITY } else { v }
            });
            let m = nelder_mead(f, &p, bounds, opts);
            let init = 1e-2 * bounds.upper.iter().zip(&bounds.lower).map(|(u, l)| u - l).fold(0.0, f64::max).max(opts.tol);
            compass_refine(f, m, bounds, opts.tol, init.min(0.1))
        })
        .collect();
    let best = runs
        .iter()
        .min_by(|a, b| {
            a.value.total_cmp(&b.value).then_with(|| {
                a.x.iter()
                    .zip(&b.x)
                    .map(|(p, q)| p.total_cmp(q))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
        })
        .cloned()
        .expect("at least one start");
    let worst = runs.iter().map(|m| m.value).fold(f64::NEG_INFINITY, f64::max);
    let multimodal = worst - best.value > opts.tol * (1.0 + best.value.abs());
    let on_boundary = bounds.on_boundary(&best.x, 1e-8);
    MultiStart {
        best,
        runs,
        start_values,
        on_boundary,
        multimodal,
    }
}
