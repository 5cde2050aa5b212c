//! Row-major NHWC batches of inputs and activations.

use crate::error::{Error, Result};

/// A batch of `n` examples, each an `h × w × c` array stored row-major
/// (channels fastest). Vector data uses `h = w = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Batch {
    pub fn vectors(n: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        Self::images(n, 1, 1, dim, data)
    }

    pub fn images(n: usize, h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * h * w * c {
            return Err(Error::Shape(format!(
                "batch of {n} x {h}x{w}x{c} needs {} values, got {}",
                n * h * w * c,
                data.len()
            )));
        }
        Ok(Batch { n, h, w, c, data })
    }

    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Batch { n, h, w, c, data: vec![0.0; n * h * w * c] }
    }

    /// Builds a vector batch from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("rows have different lengths".into()));
        }
        Self::vectors(rows.len(), dim, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// `(h, w, c)` of a single example.
    pub fn example_shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    /// Number of values per example.
    pub fn dim(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_spatial(&self) -> bool {
        self.h * self.w > 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let d = self.dim();
        &mut self.data[i * d..(i + 1) * d]
    }

    /// Examples `range` as a new batch.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Batch {
        let d = self.dim();
        Batch {
            n: range.len(),
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data[range.start * d..range.end * d].to_vec(),
        }
    }

    /// Examples at `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let mut data = Vec::with_capacity(indices.len() * self.dim());
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Batch { n: indices.len(), h: self.h, w: self.w, c: self.c, data }
    }

    /// Stacks two batches of the same example shape.
    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        if self.example_shape() != other.example_shape() {
            return Err(Error::Shape(format!(
                "cannot stack examples of shape {:?} and {:?}",
                self.example_shape(),
                other.example_shape()
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Batch { n: self.n + other.n, h: self.h, w: self.w, c: self.c, data })
    }

    /// Same data viewed with a different per-example shape.
    pub fn reshaped(mut self, h: usize, w: usize, c: usize) -> Result<Batch> {
        if h * w * c != self.dim() {
            return Err(Error::Shape(format!("cannot view {}x{}x{} examples as {h}x{w}x{c}", self.h, self.w, self.c)));
        }
        self.h = h;
        self.w = w;
        self.c = c;
        Ok(self)
    }

    pub(crate) fn with_shape(n: usize, h: usize, w: usize, c: usize, data: Vec<f64>) -> Batch {
        debug_assert_eq!(data.len(), n * h * w * c);
        Batch { n, h, w, c, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(Batch::vectors(2, 3, vec![0.0; 5]).is_err());
    }

    #[test]
    fn slicing_and_stacking() {
        let b = Batch::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let head = b.slice(0..1);
        let tail = b.slice(1..3);
        assert_eq!(head.concat(&tail).unwrap(), b);
        assert_eq!(b.select(&[2, 0]).data(), &[5.0, 6.0, 1.0, 2.0]);
    }
}
