//! Dataset sources: CSV tables, binary matrix files and a synthetic generator.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;
use tangent_kernels::batching::read_ntkm;
use tangent_kernels::{Batch, RngKey};

use crate::error::{CliError, Result};

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Header row; feature columns start with `x`, target columns with `y`.
    Csv(PathBuf),
    /// `n × d` matrix file. A sidecar `<file>.json` may give
    /// `{"shape": [h, w, c], "targets": "labels.ntkm"}`.
    Ntkm(PathBuf),
    /// `x ~ U(−π, π)`, `y = sin x + ε`, `ε ~ N(0, noise²)`.
    Sin { n: usize, noise: f64, seed: u64 },
}

impl DataSource {
    pub(crate) fn relative_to(self, base: &Path) -> DataSource {
        match self {
            DataSource::Csv(p) => DataSource::Csv(base.join(p)),
            DataSource::Ntkm(p) => DataSource::Ntkm(base.join(p)),
            s => s,
        }
    }
}

impl FromStr for DataSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<DataSource, String> {
        if let Some(args) = s.strip_prefix("sin:").or_else(|| (s == "sin").then_some("")) {
            let (mut n, mut noise, mut seed) = (20, 0.0, 0);
            for kv in args.split(',').filter(|kv| !kv.is_empty()) {
                let (k, v) = kv.split_once('=').ok_or_else(|| format!("expected key=value, got {kv:?}"))?;
                let bad = |e: &dyn fmt::Display| format!("{k}: {e}");
                match k {
                    "n" => n = v.parse().map_err(|e| bad(&e))?,
                    "noise" => noise = v.parse().map_err(|e| bad(&e))?,
                    "seed" => seed = v.parse().map_err(|e| bad(&e))?,
                    _ => return Err(format!("unknown sin option {k:?}")),
                }
            }
            return Ok(DataSource::Sin { n, noise, seed });
        }
        let path = PathBuf::from(s);
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(DataSource::Csv(path)),
            Some("ntkm") => Ok(DataSource::Ntkm(path)),
            _ => Err(format!("{s:?} is neither a .csv or .ntkm file nor a sin:... generator")),
        }
    }
}

impl<'de> Deserialize<'de> for DataSource {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Generator {
                kind: String,
                n: usize,
                #[serde(default)]
                noise: f64,
                #[serde(default)]
                seed: u64,
            },
        }
        match Raw::deserialize(d)? {
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
            Raw::Generator { kind, n, noise, seed } if kind == "sin" => Ok(DataSource::Sin { n, noise, seed }),
            Raw::Generator { kind, .. } => Err(serde::de::Error::custom(format!("unknown generator {kind:?}"))),
        }
    }
}

/// Inputs and targets (`n × classes`; zero columns when there are none).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Batch,
    pub y: DMatrix<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn require_targets(&self, what: &str) -> Result<&DMatrix<f64>> {
        if self.y.ncols() == 0 {
            return Err(CliError::Config(format!("{what} needs target columns")));
        }
        Ok(&self.y)
    }

    /// Targets row-major, matching flat network outputs.
    pub fn y_flat(&self) -> Vec<f64> {
        self.y.transpose().as_slice().to_vec()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    shape: Option<[usize; 3]>,
    targets: Option<PathBuf>,
}

pub fn load_dataset(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Sin { n, noise, seed } => sin_dataset(*n, *noise, *seed),
        DataSource::Csv(path) => read_csv(path),
        DataSource::Ntkm(path) => {
            if !path.is_file() {
                return Err(CliError::Config(format!("data file {} does not exist", path.display())));
            }
            let m = read_ntkm(path)?;
            let sidecar_path = PathBuf::from(format!("{}.json", path.display()));
            let sidecar = if sidecar_path.is_file() {
                let text = std::fs::read_to_string(&sidecar_path).map_err(CliError::io(&sidecar_path))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", sidecar_path.display())))?
            } else {
                Sidecar { shape: None, targets: None }
            };
            let (n, d) = m.shape();
            let data = m.transpose().as_slice().to_vec();
            let x = match sidecar.shape {
                Some([h, w, c]) => Batch::images(n, h, w, c, data)?,
                None => Batch::vectors(n, d, data)?,
            };
            let y = match sidecar.targets {
                Some(t) => {
                    let t = path.parent().unwrap_or(Path::new("")).join(t);
                    let y = read_ntkm(&t)?;
                    if y.nrows() != n {
                        return Err(CliError::Config(format!(
                            "{} has {} rows, inputs have {n}",
                            t.display(),
                            y.nrows()
                        )));
                    }
                    y
                }
                None => DMatrix::zeros(n, 0),
            };
            Ok(Dataset { x, y })
        }
    }
}

pub fn sin_dataset(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if noise.is_nan() || noise < 0.0 {
        return Err(CliError::Config(format!("noise must be non-negative, got {noise}")));
    }
    let mut rng = RngKey::new(seed).rng();
    let eps = Normal::new(0.0, noise).map_err(|e| CliError::Config(e.to_string()))?;
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        xs.push(x);
        ys.push(x.sin() + if noise > 0.0 { eps.sample(&mut rng) } else { 0.0 });
    }
    Ok(Dataset { x: Batch::vectors(n, 1, xs)?, y: DMatrix::from_vec(n, 1, ys) })
}

fn read_csv(path: &Path) -> Result<Dataset> {
    if !path.is_file() {
        return Err(CliError::Config(format!("data file {} does not exist", path.display())));
    }
    let mut rdr = csv::Reader::from_path(path).map_err(CliError::csv(path))?;
    let headers = rdr.headers().map_err(CliError::csv(path))?.clone();
    let mut xcols = Vec::new();
    let mut ycols = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        match h.trim().chars().next() {
            Some('x') => xcols.push(i),
            Some('y') => ycols.push(i),
            _ => return Err(CliError::Config(format!("{}: column {h:?} starts with neither x nor y", path.display()))),
        }
    }
    if xcols.is_empty() {
        return Err(CliError::Config(format!("{}: no feature columns", path.display())));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut n = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(CliError::csv(path))?;
        let field = |i: usize| -> Result<f64> {
            rec[i].trim().parse().map_err(|_| {
                CliError::Config(format!("{}: row {}: {:?} is not a number", path.display(), n + 2, &rec[i]))
            })
        };
        for &i in &xcols {
            xs.push(field(i)?);
        }
        for &i in &ycols {
            ys.push(field(i)?);
        }
        n += 1;
    }
    let y = DMatrix::from_row_slice(n, ycols.len(), &ys);
    Ok(Dataset { x: Batch::vectors(n, xcols.len(), xs)?, y })
}

/// Writes `x0.., y0..` columns readable by [`load_dataset`].
pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(CliError::csv(path))?;
    let d = data.x.dim();
    let header: Vec<String> =
        (0..d).map(|i| format!("x{i}")).chain((0..data.y.ncols()).map(|i| format!("y{i}"))).collect();
    w.write_record(&header).map_err(CliError::csv(path))?;
    for i in 0..data.len() {
        let row: Vec<String> = data.x.row(i).iter().chain(data.y.row(i).iter()).map(|v| v.to_string()).collect();
        w.write_record(&row).map_err(CliError::csv(path))?;
    }
    w.flush().map_err(CliError::io(path))?;
    Ok(())
}
