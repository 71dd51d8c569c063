//! Command bodies and the artifact they produce.

use serde::Serialize;

use super::{ingest_csv, CommandKind, Format, RunConfig};
use crate::data::{build_design, Dataset};
use crate::diagnostics::{check_identification, IdentificationReport};
use crate::disc::{fit_theta_disc, make_partition, Partition};
use crate::error::{Error, Result};
use crate::first_stage::{fit_first_stage, FirstStageFit};
use crate::flag::Flag;
use crate::linear::{fit_ols, fit_theta_hat, fit_theta_star, fit_tsls_excluded, EstimateResult, EstimatorTag};
use crate::nlq::{fit_nonlinear, fit_quantile, NonlinearModel, NonlinearOptions, QuantileOptions};
use crate::simulation::{run_mc, summary_table, McConfig};
use crate::table::{Cell, Table};

/// Everything a command writes: the resolved configuration plus result tables.
#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    pub tool: &'static str,
    pub version: &'static str,
    pub config: RunConfig,
    pub tables: Vec<Table>,
}

impl Artifact {
    fn new(config: RunConfig, tables: Vec<Table>) -> Self {
        Self {
            tool: "inciv",
            version: env!("CARGO_PKG_VERSION"),
            config,
            tables,
        }
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    fn echo(&self) -> String {
        let cfg = serde_json::to_string(&self.config).expect("config serializes");
        format!("{} {} config={cfg}", self.tool, self.version)
    }

    /// JSON carries the whole artifact; CSV and markdown put the configuration
    /// in a comment line and then the tables in order.
    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Json => serde_json::to_string_pretty(self).expect("artifact serializes") + "\n",
            Format::Csv => {
                let mut out = format!("# {}\n", self.echo());
                let many = self.tables.len() > 1;
                for (i, t) in self.tables.iter().enumerate() {
                    if i > 0 {
                        out.push('\n');
                    }
                    if many {
                        out.push_str(&format!("# table: {}\n", t.name));
                    }
                    out.push_str(&t.to_csv());
                }
                out
            }
            Format::Md => {
                let mut out = format!("<!-- {} -->\n", self.echo());
                for t in &self.tables {
                    out.push_str(&format!("\n### {}\n\n{}", t.name, t.to_markdown(3)));
                }
                out
            }
        }
    }
}

pub fn execute(cfg: &RunConfig) -> Result<Artifact> {
    match cfg.command {
        CommandKind::Estimate => estimate(cfg.clone()),
        CommandKind::Diagnose => diagnose(cfg.clone()),
        CommandKind::Simulate => simulate(cfg.clone()),
    }
}

fn flag_list(flags: &[Flag]) -> Cell {
    let names: Vec<String> = flags
        .iter()
        .map(|f| serde_json::to_string(f).expect("flag serializes").trim_matches('"').to_string())
        .collect();
    Cell::from(names.join(";"))
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn load(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.data.as_ref().expect("data path resolved");
    ingest_csv(path, cfg.roles.as_ref().expect("roles resolved"))
}

/// Partition for the resolved scheme; recorded in the configuration.
fn partition(cfg: &mut RunConfig, data: &Dataset) -> Result<Partition> {
    let choice = cfg.partition_choice.clone().expect("partition choice resolved");
    let (scheme, cells) = choice.resolve(&cfg.first_stage, data.d_z())?;
    cfg.partition = Some(scheme.clone());
    cfg.cells = cells;
    make_partition(data, &scheme, cells)
}

fn first_stage_table(fs: &FirstStageFit) -> Table {
    let method = serde_json::to_string(&fs.method()).expect("method serializes");
    let mut rows = vec![("method", Cell::from(method.trim_matches('"')))];
    if let Some((pi, h)) = fs.bandwidths() {
        rows.push(("bandwidth_pi", join(pi).into()));
        rows.push(("bandwidth_h", join(h).into()));
    }
    if let Some((pi, h)) = fs.spline_df() {
        rows.push(("df_pi", pi.into()));
        rows.push(("df_h", h.into()));
    }
    rows.push(("flags", flag_list(&fs.flags)));
    Table::fields("first_stage", rows)
}

fn diagnostics_tables(r: &IdentificationReport, names: &[String]) -> Vec<Table> {
    let verdict = |v: &crate::diagnostics::Verdict| {
        serde_json::to_string(v).expect("verdict serializes").trim_matches('"').to_string()
    };
    let mut rows = vec![
        ("verdict", Cell::from(verdict(&r.verdict))),
        ("condition_number", r.condition_number.into()),
        ("support_points", r.order_condition.support_points.into()),
        ("parameters", r.order_condition.parameters.into()),
        ("order_condition", r.order_condition.satisfied.into()),
        ("support_subset_rank", r.support_subset_rank.into()),
    ];
    if let Some(p) = &r.partition_rank {
        rows.push(("partition_rank", p.ok.into()));
        rows.push(("partition_condition_number", p.condition_number.into()));
    }
    rows.push(("note", r.note.into()));
    let summary = Table::fields("identification", rows);

    let mut spectrum = Table::new("gram_eigenvalues", &["index", "eigenvalue"]);
    for (i, ev) in r.gram_eigenvalues.iter().enumerate() {
        spectrum.push(vec![(i + 1).into(), (*ev).into()]);
    }
    let mut comps = Table::new("components", &["endogenous", "nonlinearity_r2", "verdict"]);
    let x_names = &names[names.len() - r.component_verdicts.len()..];
    for ((name, r2), v) in x_names.iter().zip(&r.nonlinearity_stat).zip(&r.component_verdicts) {
        comps.push(vec![name.clone().into(), (*r2).into(), verdict(v).into()]);
    }
    vec![summary, spectrum, comps]
}

fn estimate(mut cfg: RunConfig) -> Result<Artifact> {
    let data = load(&cfg)?;
    let fs = fit_first_stage(&data, &cfg.first_stage)?;
    let design = build_design(&data, &fs)?;
    let part = partition(&mut cfg, &data);
    let part = if cfg.estimators.contains(&EstimatorTag::Disc) {
        Some(part?)
    } else {
        part.ok()
    };

    let mut fits: Vec<(EstimateResult, Option<f64>)> = Vec::new();
    for tag in &cfg.estimators {
        let fit = match tag {
            EstimatorTag::ThetaHat => (fit_theta_hat(&data, &fs)?, None),
            EstimatorTag::ThetaStar => (fit_theta_star(&data, &fs)?, None),
            EstimatorTag::Disc => (fit_theta_disc(&data, part.as_ref().expect("partition built"))?, None),
            EstimatorTag::Ols => (fit_ols(&data, true)?, None),
            EstimatorTag::Tsls => {
                let z = &cfg.roles.as_ref().expect("roles resolved").z;
                let excluded = cfg
                    .excluded
                    .as_ref()
                    .expect("excluded resolved")
                    .iter()
                    .map(|name| {
                        z.iter()
                            .position(|c| c == name)
                            .ok_or_else(|| Error::invalid(format!("excluded column `{name}` is not one of the Z columns")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                (fit_tsls_excluded(&data, &excluded)?, None)
            }
            EstimatorTag::Nonlinear | EstimatorTag::NonlinearStar => {
                let model = NonlinearModel::by_name(cfg.model.as_deref().unwrap_or("linear"), data.d_z(), data.d_x())?;
                let opts = NonlinearOptions {
                    smoother: cfg.first_stage.clone(),
                    star: *tag == EstimatorTag::NonlinearStar,
                    ..NonlinearOptions::default()
                };
                let f = fit_nonlinear(&data, &model, &opts)?;
                (f.result, Some(f.objective))
            }
            EstimatorTag::Quantile => {
                let opts = QuantileOptions {
                    smoother: cfg.first_stage.clone(),
                    ..QuantileOptions::default()
                };
                let f = fit_quantile(&data, cfg.tau.expect("tau resolved"), &opts)?;
                (f.result, Some(f.objective))
            }
            EstimatorTag::Infeasible => {
                return Err(Error::invalid("the infeasible estimator is only available in simulate"))
            }
        };
        fits.push(fit);
    }

    let mut coefs = Table::new("coefficients", &["estimator", "coefficient", "estimate", "se", "ci_lower", "ci_upper"]);
    let mut info = Table::new("estimators", &["estimator", "n", "condition_number", "objective", "flags"]);
    for (r, objective) in &fits {
        let label = Cell::from(r.estimator.label());
        for (j, name) in r.names.iter().enumerate() {
            coefs.push(vec![
                label.clone(),
                name.clone().into(),
                r.coef()[j].into(),
                r.se[j].into(),
                r.ci_lower[j].into(),
                r.ci_upper[j].into(),
            ]);
        }
        info.push(vec![label, r.n.into(), r.condition_number.into(), (*objective).into(), flag_list(&r.flags)]);
    }
    let report = check_identification(&design, part.as_ref());
    let mut tables = vec![coefs, info, first_stage_table(&fs)];
    tables.extend(diagnostics_tables(&report, &data.coefficient_names()));
    Ok(Artifact::new(cfg, tables))
}

fn diagnose(mut cfg: RunConfig) -> Result<Artifact> {
    let data = load(&cfg)?;
    let fs = fit_first_stage(&data, &cfg.first_stage)?;
    let design = build_design(&data, &fs)?;
    // A partition that cannot be built is reported as absent, not as an error.
    let part = partition(&mut cfg, &data).ok();
    let report = check_identification(&design, part.as_ref());
    let mut tables = diagnostics_tables(&report, &data.coefficient_names());
    tables.push(first_stage_table(&fs));
    Ok(Artifact::new(cfg, tables))
}

fn simulate(cfg: RunConfig) -> Result<Artifact> {
    let mc = McConfig {
        dgp: cfg.dgp.clone().expect("design resolved"),
        reps: cfg.reps.expect("replications resolved"),
        estimators: cfg.estimators.clone(),
        first_stage: cfg.first_stage.clone(),
        scheme: cfg.partition.clone().expect("partition resolved"),
        cells: cfg.cells,
    };
    let summary = run_mc(&mc, cfg.threads)?;
    Ok(Artifact::new(cfg, vec![summary_table(&summary)]))
}

#[cfg(test)]
mod tests {
    use super::super::{Cli, RunConfig};
    use super::*;
    use clap::Parser;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn write_binary_pair(path: &std::path::Path, n: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = DMatrix::from_fn(n, 2, |_, _| f64::from(u8::from(rng.random_bool(0.5))));
        let x = DMatrix::from_fn(n, 1, |i, _| {
            let p = if z[(i, 0)] + z[(i, 1)] > 0.0 { 0.8 } else { 0.2 };
            f64::from(u8::from(rng.random_bool(p)))
        });
        let y = DVector::from_fn(n, |i, _| 1.0 + z[(i, 0)] + z[(i, 1)] + x[i] + rng.random_range(-1.0..1.0));
        let data = Dataset::new(y, z, x).unwrap();
        super::super::write_csv(std::fs::File::create(path).unwrap(), &data).unwrap();
    }

    fn run(args: &[&str]) -> Result<Artifact> {
        let cli = Cli::try_parse_from(std::iter::once("inciv").chain(args.iter().copied())).unwrap();
        execute(&RunConfig::from_command(&cli.command)?)
    }

    #[test]
    fn estimate_on_cells_reports_every_estimator() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("d.csv");
        write_binary_pair(&f, 800);
        let p = f.to_str().unwrap();
        let a = run(&["estimate", "--data", p, "--y", "y", "--z", "z1,z2", "--x", "x1", "--first-stage", "cells"]).unwrap();
        let coefs = a.table("coefficients").unwrap();
        assert_eq!(coefs.rows.len(), 4 * 4);
        assert_eq!(a.config.partition, Some(crate::disc::Scheme::ElementWise));
        // θ̂ and θ̂_disc coincide under cell means and the element partition
        let gamma = |est: &str| match &coefs.rows.iter().find(|r| r[0] == Cell::from(est) && r[1] == Cell::from("x1")).unwrap()[2] {
            Cell::Num(v) => *v,
            _ => unreachable!(),
        };
        assert!((gamma("theta_hat") - gamma("theta_disc")).abs() < 1e-10);
        let ident = a.table("identification").unwrap();
        assert_eq!(ident.rows[0][1], Cell::from("ok"));
    }

    #[test]
    fn renderings_share_tables() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("d.csv");
        write_binary_pair(&f, 300);
        let p = f.to_str().unwrap();
        let a = run(&["diagnose", "--data", p, "--y", "y", "--z", "z1,z2", "--x", "x1", "--first-stage", "cells"]).unwrap();
        let json: serde_json::Value = serde_json::from_str(&a.render(Format::Json)).unwrap();
        assert_eq!(json["tables"].as_array().unwrap().len(), a.tables.len());
        assert_eq!(json["config"]["command"], "diagnose");
        let csv = a.render(Format::Csv);
        assert!(csv.starts_with("# inciv "));
        assert_eq!(csv.matches("# table: ").count(), a.tables.len());
        let md = a.render(Format::Md);
        assert_eq!(md.matches("\n### ").count(), a.tables.len());
    }

    #[test]
    fn tsls_rejects_unknown_excluded_column() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("d.csv");
        write_binary_pair(&f, 200);
        let p = f.to_str().unwrap();
        let e = run(&[
            "estimate", "--data", p, "--y", "y", "--z", "z1,z2", "--x", "x1", "--estimators", "tsls", "--excluded", "z9",
        ])
        .unwrap_err();
        assert!(e.to_string().contains("`z9`"));
    }
}
