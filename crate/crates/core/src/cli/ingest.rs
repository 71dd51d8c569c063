//! Reading and writing datasets as headed CSV.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{ColumnNames, Dataset};
use crate::error::{Error, Result};

/// Which header names play the outcome, included-exogenous and endogenous roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roles {
    pub y: String,
    pub z: Vec<String>,
    pub x: Vec<String>,
}

impl Roles {
    pub fn validate(&self) -> Result<()> {
        if self.z.is_empty() {
            return Err(Error::invalid("at least one Z column is required"));
        }
        if self.x.is_empty() {
            return Err(Error::invalid("at least one X column is required"));
        }
        let mut seen = HashSet::new();
        for name in std::iter::once(&self.y).chain(&self.z).chain(&self.x) {
            if !seen.insert(name.as_str()) {
                return Err(Error::invalid(format!("column `{name}` is assigned to more than one role")));
            }
        }
        Ok(())
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Loads the role columns of a headed CSV file; other columns are ignored.
pub fn ingest_csv(path: &Path, roles: &Roles) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| io_error(path, e))?;
    read_csv(file, roles).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// [`ingest_csv`] on any reader. Row numbers in errors count data rows from 1.
pub fn read_csv<R: std::io::Read>(reader: R, roles: &Roles) -> Result<Dataset> {
    roles.validate()?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    let locate = |name: &String| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::invalid(format!("column `{name}` not found in header")))
    };
    let wanted: Vec<&String> = std::iter::once(&roles.y).chain(&roles.z).chain(&roles.x).collect();
    let idx: Vec<usize> = wanted.iter().map(|n| locate(n)).collect::<Result<_>>()?;

    let mut values: Vec<Vec<f64>> = vec![Vec::new(); idx.len()];
    for (r, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("row {}: {e}", r + 1)))?;
        for (slot, (&j, name)) in idx.iter().zip(&wanted).enumerate() {
            let field = record.get(j).unwrap_or("");
            if field.is_empty() {
                return Err(Error::Parse(format!("missing value at row {}, column `{name}`", r + 1)));
            }
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Parse(format!("cannot parse `{field}` as a number at row {}, column `{name}`", r + 1)))?;
            values[slot].push(v);
        }
    }
    let n = values[0].len();
    if n == 0 {
        return Err(Error::invalid("the data file has no rows"));
    }
    let (dz, dx) = (roles.z.len(), roles.x.len());
    let y = DVector::from_vec(values[0].clone());
    let z = DMatrix::from_fn(n, dz, |i, j| values[1 + j][i]);
    let x = DMatrix::from_fn(n, dx, |i, j| values[1 + dz + j][i]);
    Dataset::new(y, z, x)?.with_names(ColumnNames {
        y: roles.y.clone(),
        z: roles.z.clone(),
        x: roles.x.clone(),
    })
}

/// Writes y, Z and X under their column names (or y, z1.., x1.. when unnamed).
/// Floats use the shortest representation that parses back to the same bits.
pub fn write_csv<W: std::io::Write>(writer: W, data: &Dataset) -> Result<()> {
    let names = data.names().cloned().unwrap_or_else(|| ColumnNames {
        y: "y".into(),
        z: (1..=data.d_z()).map(|j| format!("z{j}")).collect(),
        x: (1..=data.d_x()).map(|j| format!("x{j}")).collect(),
    });
    let mut w = csv::Writer::from_writer(writer);
    let header: Vec<&str> = std::iter::once(names.y.as_str())
        .chain(names.z.iter().map(String::as_str))
        .chain(names.x.iter().map(String::as_str))
        .collect();
    let wrap = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record(&header).map_err(wrap)?;
    for i in 0..data.n() {
        let row: Vec<String> = std::iter::once(data.y()[i])
            .chain((0..data.d_z()).map(|j| data.z()[(i, j)]))
            .chain((0..data.d_x()).map(|j| data.x()[(i, j)]))
            .map(|v| v.to_string())
            .collect();
        w.write_record(&row).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(())
}
