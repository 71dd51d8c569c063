//! CSV and markdown renderings of a Monte Carlo summary.
//!
//! Both start with a provenance header that fixes the design, seed, smoother and
//! partition. The worker count is deliberately absent so outputs compare bytewise
//! across thread settings.

use crate::table::{Cell, Table};

use super::McSummary;

/// One-line description of everything that determines the numbers.
pub fn provenance(s: &McSummary) -> String {
    let c = &s.config;
    let beta: Vec<String> = c.dgp.beta_full().iter().map(|b| b.to_string()).collect();
    format!(
        "inciv {} simulate dgp={} n={} rho={} beta={} reps={} seed={} first_stage={} partition={} cells={}",
        env!("CARGO_PKG_VERSION"),
        serde_json::to_string(&c.dgp.family).unwrap_or_default().trim_matches('"'),
        c.dgp.n,
        c.dgp.rho,
        beta.join(","),
        c.reps,
        c.dgp.seed,
        serde_json::to_string(&c.first_stage).unwrap_or_default(),
        serde_json::to_string(&c.scheme).unwrap_or_default(),
        c.cells,
    )
}

/// Long format: one row per estimator and coefficient. Estimators that never
/// succeeded get a single row with empty statistics.
pub fn summary_table(s: &McSummary) -> Table {
    let mut t = Table::new(
        "summary",
        &[
            "estimator",
            "coefficient",
            "truth",
            "bias",
            "sd",
            "rmse",
            "cp",
            "median_bias",
            "mad",
            "used",
            "failures",
            "failure_kinds",
        ],
    );
    for e in &s.estimators {
        let kinds: Vec<String> = e.failure_kinds.iter().map(|(k, c)| format!("{k}:{c}")).collect();
        let kinds = Cell::from(kinds.join(";"));
        let label = Cell::from(e.estimator.label());
        if !e.available {
            let mut row = vec![label, Cell::Empty, Cell::Empty];
            row.extend(std::iter::repeat_n(Cell::Empty, 6));
            row.extend([e.used.into(), e.failures.into(), kinds]);
            t.push(row);
            continue;
        }
        for c in &e.coefficients {
            t.push(vec![
                label.clone(),
                c.coefficient.clone().into(),
                c.truth.into(),
                c.bias.into(),
                c.sd.into(),
                c.rmse.into(),
                c.cp.into(),
                c.median_bias.into(),
                c.mad.into(),
                e.used.into(),
                e.failures.into(),
                kinds.clone(),
            ]);
        }
    }
    t
}

pub fn summary_csv(s: &McSummary) -> String {
    format!("# {}\n{}", provenance(s), summary_table(s).to_csv())
}

pub fn summary_markdown(s: &McSummary) -> String {
    format!("<!-- {} -->\n\n{}", provenance(s), summary_table(s).to_markdown(3))
}
