//! CSV tables and gnuplot scripts.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{CliError, Result};

pub struct OutDir(PathBuf);

impl OutDir {
    pub fn create(path: &Path) -> Result<OutDir> {
        std::fs::create_dir_all(path).map_err(CliError::io(path))?;
        Ok(OutDir(path.to_path_buf()))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    /// Plain comma-separated matrix, no header.
    pub fn matrix(&self, name: &str, m: &DMatrix<f64>) -> Result<PathBuf> {
        let path = self.path(name);
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&path).map_err(CliError::csv(&path))?;
        for i in 0..m.nrows() {
            w.write_record(m.row(i).iter().map(|v| v.to_string())).map_err(CliError::csv(&path))?;
        }
        w.flush().map_err(CliError::io(&path))?;
        Ok(path)
    }

    pub fn table(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path).map_err(CliError::csv(&path))?;
        w.write_record(header).map_err(CliError::csv(&path))?;
        for row in rows {
            w.write_record(row).map_err(CliError::csv(&path))?;
        }
        w.flush().map_err(CliError::io(&path))?;
        Ok(path)
    }

    pub fn text(&self, name: &str, body: &str) -> Result<PathBuf> {
        let path = self.path(name);
        std::fs::write(&path, body).map_err(CliError::io(&path))?;
        Ok(path)
    }

    /// Script rendering `plot` (a gnuplot `plot` command) to `<name>.png`.
    pub fn gnuplot(&self, name: &str, settings: &str, plot: &str) -> Result<PathBuf> {
        let body = format!(
            "set datafile separator ','\nset key autotitle columnhead\nset terminal pngcairo size 800,600\nset output '{name}.png'\n{settings}\n{plot}\n"
        );
        self.text(&format!("{name}.gp"), &body)
    }
}

pub fn num(v: f64) -> String {
    v.to_string()
}
