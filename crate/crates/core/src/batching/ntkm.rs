//! Little-endian matrix files: `b"NTKM"`, `u32` version 1, `u64` rows,
//! `u64` cols, then row-major `f64` values.

use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NTKM";
const VERSION: u32 = 1;
const HEADER: u64 = 4 + 4 + 8 + 8;

pub fn write_ntkm(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, m.nrows(), m.ncols())?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_header(w: &mut impl Write, rows: usize, cols: usize) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(rows as u64).to_le_bytes())?;
    w.write_all(&(cols as u64).to_le_bytes())?;
    Ok(())
}

/// Reads `(rows, cols)` and leaves `r` at the first value.
fn read_header(r: &mut impl Read) -> Result<(usize, usize)> {
    let mut buf = [0u8; HEADER as usize];
    r.read_exact(&mut buf).map_err(|_| Error::Format("file shorter than the header".into()))?;
    if &buf[..4] != MAGIC {
        return Err(Error::Format("missing NTKM magic".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(buf[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(buf[16..24].try_into().unwrap());
    let to_usize = |v: u64| usize::try_from(v).map_err(|_| Error::Format("dimension overflows".into()));
    Ok((to_usize(rows)?, to_usize(cols)?))
}

pub fn read_ntkm(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let file = File::open(path)?;
    let len = file.metadata()?.len();
    let mut r = BufReader::new(file);
    let (rows, cols) = read_header(&mut r)?;
    let expect =
        (rows as u64).checked_mul(cols as u64).and_then(|v| v.checked_mul(8)).and_then(|v| v.checked_add(HEADER));
    if expect != Some(len) {
        return Err(Error::Format(format!("{rows}x{cols} matrix needs {expect:?} bytes, file has {len}")));
    }
    let mut m = DMatrix::zeros(rows, cols);
    let mut v = [0u8; 8];
    for i in 0..rows {
        for j in 0..cols {
            r.read_exact(&mut v)?;
            m[(i, j)] = f64::from_le_bytes(v);
        }
    }
    Ok(m)
}

/// Matrix file filled one block at a time.
#[derive(Debug)]
pub struct NtkmWriter {
    file: File,
    rows: usize,
    cols: usize,
}

impl NtkmWriter {
    /// Creates a zero-filled `rows × cols` file.
    pub fn create(path: impl AsRef<Path>, rows: usize, cols: usize) -> Result<NtkmWriter> {
        let mut file = OpenOptions::new().read(true).write(true).create(true).truncate(true).open(path)?;
        write_header(&mut file, rows, cols)?;
        file.set_len(HEADER + (rows * cols * 8) as u64)?;
        Ok(NtkmWriter { file, rows, cols })
    }

    /// Writes `block` with its top-left corner at `(row, col)`, transposed if asked.
    pub fn write_block(&mut self, row: usize, col: usize, block: &DMatrix<f64>, transpose: bool) -> Result<()> {
        let (r, c) = if transpose { (block.ncols(), block.nrows()) } else { block.shape() };
        if row + r > self.rows || col + c > self.cols {
            return Err(Error::Shape(format!("block {r}x{c} at ({row}, {col}) exceeds {}x{}", self.rows, self.cols)));
        }
        let mut line = Vec::with_capacity(c * 8);
        for i in 0..r {
            line.clear();
            for j in 0..c {
                let v = if transpose { block[(j, i)] } else { block[(i, j)] };
                line.extend_from_slice(&v.to_le_bytes());
            }
            self.file.seek(SeekFrom::Start(HEADER + (((row + i) * self.cols + col) * 8) as u64))?;
            self.file.write_all(&line)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.file.flush()?;
        self.file.sync_all()?;
        Ok(())
    }
}
