//! CSV datasets and grids, JSON run reports and TOML simulation configs.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::ExperimentConfig;
use crate::sphere::{SphereGrid, SphericalCoord, UnitVector, UNIT_NORM_TOL};

/// Norm deviation above which a Cartesian row triggers a warning.
pub const NORM_WARN_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub path: PathBuf,
    pub points: Vec<UnitVector>,
    pub had_header: bool,
    pub warnings: Vec<String>,
}

fn io_err(path: &Path, e: impl Into<std::io::Error>) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io_err(path, io),
        kind => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(f))
}

fn parse_row(record: &csv::StringRecord) -> Option<Vec<f64>> {
    record.iter().map(|s| s.parse::<f64>().ok()).collect()
}

/// Reads unit vectors from CSV: 3 columns (x1, x2, x3) or 2 columns
/// (θ, φ in radians). A non-numeric first row is taken as a header.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let mut points = Vec::new();
    let mut warnings = Vec::new();
    let mut had_header = false;
    let mut width = None;
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(k + 1);
        let Some(vals) = parse_row(&rec) else {
            if k == 0 {
                had_header = true;
                width = Some(rec.len());
                continue;
            }
            return Err(parse_err(path, line, format!("non-numeric field in {:?}", rec.iter().collect::<Vec<_>>())));
        };
        if *width.get_or_insert(vals.len()) != vals.len() {
            return Err(parse_err(path, line, format!("expected {} columns, found {}", width.unwrap_or(0), vals.len())));
        }
        let y = match vals[..] {
            [x1, x2, x3] => {
                let norm = (x1 * x1 + x2 * x2 + x3 * x3).sqrt();
                if !(norm.is_finite() && norm > 0.0) {
                    return Err(parse_err(path, line, format!("cannot normalize ({x1}, {x2}, {x3})")));
                }
                if (norm - 1.0).abs() > NORM_WARN_TOL {
                    warnings.push(format!("{}:{line}: norm {norm} normalized to 1", path.display()));
                }
                match UnitVector::try_new(x1, x2, x3) {
                    Ok(y) if (norm * norm - 1.0).abs() <= UNIT_NORM_TOL => y,
                    _ => UnitVector::normalize(x1, x2, x3).map_err(|e| parse_err(path, line, e.to_string()))?,
                }
            }
            [theta, phi] => SphericalCoord::wrapped(theta, phi)
                .map_err(|e| parse_err(path, line, e.to_string()))?
                .to_unit_vector(),
            _ => return Err(parse_err(path, line, format!("expected 2 or 3 columns, found {}", vals.len()))),
        };
        points.push(y);
    }
    if points.is_empty() {
        return Err(Error::Data(format!("{}: no observations", path.display())));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(Dataset {
        path: path.to_path_buf(),
        points,
        had_header,
        warnings,
    })
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Writes Cartesian rows with a header. Values round-trip exactly.
pub fn write_dataset(path: impl AsRef<Path>, points: &[UnitVector]) -> Result<()> {
    write_rows(
        path.as_ref(),
        &["x1", "x2", "x3"],
        points.iter().map(|y| y.as_array().map(|v| v.to_string())),
    )
}

/// Writes (θ, φ) rows with a header.
pub fn write_spherical(path: impl AsRef<Path>, points: &[UnitVector]) -> Result<()> {
    write_rows(
        path.as_ref(),
        &["theta", "phi"],
        points.iter().map(|y| {
            let c = y.to_spherical();
            [c.theta().to_string(), c.phi().to_string()]
        }),
    )
}

/// Writes `theta,phi,weight,<value_name>` rows for every grid node.
pub fn write_grid_csv(path: impl AsRef<Path>, grid: &SphereGrid, values: &[f64], value_name: &str) -> Result<()> {
    if values.len() != grid.len() {
        return Err(Error::LengthMismatch {
            expected: grid.len(),
            got: values.len(),
        });
    }
    write_rows(
        path.as_ref(),
        &["theta", "phi", "weight", value_name],
        grid.nodes()
            .iter()
            .zip(grid.weights())
            .zip(values)
            .map(|((c, w), v)| [c.theta(), c.phi(), *w, *v].map(|x| x.to_string())),
    )
}

/// Reads a file written by [`write_grid_csv`], rebuilding the grid from
/// its node layout.
pub fn read_grid_csv(path: impl AsRef<Path>) -> Result<(Arc<SphereGrid>, Vec<f64>)> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(k + 1);
        match parse_row(&rec) {
            Some(v) if v.len() == 4 => rows.push([v[0], v[1], v[2], v[3]]),
            None if k == 0 => continue,
            _ => return Err(parse_err(path, line, "expected numeric theta,phi,weight,value")),
        }
    }
    let Some(first) = rows.first() else {
        return Err(Error::Data(format!("{}: empty grid file", path.display())));
    };
    let n_phi = rows.iter().take_while(|r| r[0] == first[0]).count();
    if n_phi == 0 || rows.len() % n_phi != 0 {
        return Err(Error::Data(format!("{}: rows do not form a θ-major grid", path.display())));
    }
    let n_theta = rows.len() / n_phi;
    let mut theta_max = 2.0 * first[0] * n_theta as f64;
    for t in [PI, FRAC_PI_2] {
        if (theta_max - t).abs() < 1e-9 {
            theta_max = t;
        }
    }
    let grid = SphereGrid::new(theta_max, n_theta, n_phi)?;
    for (k, (r, c)) in rows.iter().zip(grid.nodes()).enumerate() {
        if (r[0] - c.theta()).abs() > 1e-9 || (r[1] - c.phi()).abs() > 1e-9 {
            return Err(parse_err(path, k + 2, format!("node ({}, {}) does not match a {n_theta}×{n_phi} grid", r[0], r[1])));
        }
    }
    Ok((Arc::new(grid), rows.iter().map(|r| r[3]).collect()))
}

/// Writes `theta,phi,value` rows, the layout contour plotters expect.
pub fn write_contour_csv(path: impl AsRef<Path>, grid: &SphereGrid, values: &[f64]) -> Result<()> {
    if values.len() != grid.len() {
        return Err(Error::LengthMismatch {
            expected: grid.len(),
            got: values.len(),
        });
    }
    write_rows(
        path.as_ref(),
        &["theta", "phi", "value"],
        grid.nodes().iter().zip(values).map(|(c, v)| [c.theta(), c.phi(), *v].map(|x| x.to_string())),
    )
}

/// Record of one CLI invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub elapsed_seconds: f64,
    pub outputs: Vec<PathBuf>,
    pub warnings: Vec<String>,
    pub results: serde_json::Value,
}

impl RunReport {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        RunReport {
            command: command.to_string(),
            args: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seed,
            elapsed_seconds: 0.0,
            outputs: Vec::new(),
            warnings: Vec::new(),
            results: serde_json::Value::Null,
        }
    }
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut f = File::create(path).map_err(|e| io_err(path, e))?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| io_err(path, e))?;
    writeln!(f).map_err(|e| io_err(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    serde_json::from_reader(f).map_err(|e| parse_err(path, e.line(), e.to_string()))
}

/// Parses a simulation config from TOML.
pub fn parse_experiment_config(text: &str, path: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1).unwrap_or(0);
        parse_err(path, line, e.message().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_experiment_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_experiment_config(&text, path)
}
