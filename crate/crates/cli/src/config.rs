//! Command-line flags, optionally backed by a JSON config file.
//!
//! Every flag can also appear in the `--config` file under the same name with
//! underscores (`batch_size`, `diag_reg`, ...). Flags given on the command
//! line win.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::data::DataSource;
use crate::error::{CliError, Result};

/// JSON has no infinity, so times may also be strings such as `"inf"`.
fn times_from_json<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<Vec<f64>>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Time {
        Number(f64),
        Text(String),
    }
    let Some(times) = Option::<Vec<Time>>::deserialize(d)? else { return Ok(None) };
    times
        .into_iter()
        .map(|t| match t {
            Time::Number(v) => Ok(v),
            Time::Text(s) => s.parse().map_err(|_| serde::de::Error::custom(format!("invalid time {s:?}"))),
        })
        .collect::<std::result::Result<Vec<f64>, _>>()
        .map(Some)
}

#[derive(Debug, Parser)]
#[command(name = "tangent-kernels", version, about = "Infinite-width network kernels and experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// NNGP and NTK matrices between two input sets.
    Kernel(Options),
    /// GP posterior (NNGP) or infinite-time NTK regression.
    Infer(Options),
    /// Gradient-descent trajectories in function space.
    Dynamics(Options),
    /// Monte Carlo kernel convergence over widths and sample counts.
    Mc(Options),
    /// Finite-width ensembles trained by gradient descent against the analytic prediction.
    Ensemble(Options),
    /// Training of weight-space Taylor expansions against the full network.
    Taylor(Options),
}

impl Command {
    pub fn options(&self) -> &Options {
        match self {
            Command::Kernel(o)
            | Command::Infer(o)
            | Command::Dynamics(o)
            | Command::Mc(o)
            | Command::Ensemble(o)
            | Command::Taylor(o) => o,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Kernel(_) => "kernel",
            Command::Infer(_) => "infer",
            Command::Dynamics(_) => "dynamics",
            Command::Mc(_) => "mc",
            Command::Ensemble(_) => "ensemble",
            Command::Taylor(_) => "taylor",
        }
    }
}

#[derive(Clone, Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Options {
    /// JSON file with any of these options.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Architecture as JSON.
    #[arg(long)]
    pub arch: Option<PathBuf>,
    /// Training (or first) inputs: a .csv file, a .ntkm file, or `sin:n=20,noise=0.1,seed=0`.
    #[arg(long)]
    pub data: Option<DataSource>,
    /// Test (or second) inputs, same forms as --data.
    #[arg(long)]
    pub test_data: Option<DataSource>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// nngp or ntk.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub diag_reg: Option<f64>,
    /// Times, comma separated; `inf` allowed where closed forms exist.
    #[arg(long, value_delimiter = ',')]
    #[serde(default, deserialize_with = "times_from_json")]
    pub t: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub n_samples: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long)]
    pub ensemble: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub order: Option<usize>,
    /// mse or cross_entropy (dynamics only).
    #[arg(long)]
    pub loss: Option<String>,
    /// Also compute the predictive covariance (infer only).
    #[arg(long)]
    #[serde(default)]
    pub cov: bool,
}

impl Options {
    /// Fills unset flags from the `--config` file, if any.
    pub fn resolve(&self) -> Result<Options> {
        let Some(path) = &self.config else { return Ok(self.clone()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut file: Options =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        // Relative paths in the file are relative to the file.
        let base = path.parent().unwrap_or(Path::new(""));
        file.arch = file.arch.map(|p| base.join(p));
        file.out = file.out.map(|p| base.join(p));
        file.data = file.data.map(|d| d.relative_to(base));
        file.test_data = file.test_data.map(|d| d.relative_to(base));
        let c = self.clone();
        Ok(Options {
            config: c.config,
            arch: c.arch.or(file.arch),
            data: c.data.or(file.data),
            test_data: c.test_data.or(file.test_data),
            out: c.out.or(file.out),
            seed: c.seed.or(file.seed),
            batch_size: c.batch_size.or(file.batch_size),
            workers: c.workers.or(file.workers),
            mode: c.mode.or(file.mode),
            diag_reg: c.diag_reg.or(file.diag_reg),
            t: c.t.or(file.t),
            n_samples: c.n_samples.or(file.n_samples),
            widths: c.widths.or(file.widths),
            ensemble: c.ensemble.or(file.ensemble),
            steps: c.steps.or(file.steps),
            lr: c.lr.or(file.lr),
            momentum: c.momentum.or(file.momentum),
            order: c.order.or(file.order),
            loss: c.loss.or(file.loss),
            cov: c.cov || file.cov,
        })
    }

    pub fn arch(&self) -> Result<&Path> {
        let p = self.arch.as_deref().ok_or_else(|| CliError::Config("--arch is required".into()))?;
        if !p.is_file() {
            return Err(CliError::Config(format!("architecture file {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn data(&self) -> Result<&DataSource> {
        self.data.as_ref().ok_or_else(|| CliError::Config("--data is required".into()))
    }

    pub fn out(&self) -> &Path {
        self.out.as_deref().unwrap_or(Path::new("out"))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn workers(&self) -> Result<usize> {
        match self.workers {
            Some(0) => Err(CliError::Config("--workers must be at least 1".into())),
            w => Ok(w.unwrap_or(1)),
        }
    }

    pub fn batch_size(&self) -> Result<Option<usize>> {
        match self.batch_size {
            Some(0) => Err(CliError::Config("--batch-size must be at least 1".into())),
            b => Ok(b),
        }
    }

    pub fn diag_reg(&self) -> Result<f64> {
        let r = self.diag_reg.unwrap_or(1e-4);
        if r.is_finite() && r >= 0.0 {
            Ok(r)
        } else {
            Err(CliError::Config(format!("--diag-reg must be non-negative, got {r}")))
        }
    }

    pub fn lr(&self, default: f64) -> Result<f64> {
        let lr = self.lr.unwrap_or(default);
        if lr.is_finite() && lr > 0.0 {
            Ok(lr)
        } else {
            Err(CliError::Config(format!("--lr must be positive, got {lr}")))
        }
    }

    pub fn times(&self, default: &[f64]) -> Result<Vec<f64>> {
        let t = self.t.clone().unwrap_or_else(|| default.to_vec());
        if t.is_empty() || t.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(CliError::Config("--t needs non-negative times".into()));
        }
        Ok(t)
    }

    pub fn positive_list(name: &str, v: Option<&Vec<usize>>, default: &[usize]) -> Result<Vec<usize>> {
        let v = v.cloned().unwrap_or_else(|| default.to_vec());
        if v.is_empty() || v.contains(&0) {
            return Err(CliError::Config(format!("--{name} needs positive values")));
        }
        Ok(v)
    }
}
