//! Storage for stacks of per-pair covariance blocks.

use crate::netspec::Representation;

/// Per-slot block layout. `Marginal` keeps one value per pixel, `Full` one
/// value per pixel pair (row pixel from the first input, column pixel from
/// the second).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Vector,
    Marginal { h: usize, w: usize },
    Full { h: usize, w: usize },
}

impl Layout {
    pub fn pixels(&self) -> usize {
        match *self {
            Layout::Vector => 1,
            Layout::Marginal { h, w } | Layout::Full { h, w } => h * w,
        }
    }

    pub fn block_len(&self) -> usize {
        match self {
            Layout::Vector => 1,
            Layout::Marginal { .. } => self.pixels(),
            Layout::Full { .. } => self.pixels() * self.pixels(),
        }
    }

    pub fn representation(&self) -> Representation {
        match self {
            Layout::Vector => Representation::VectorOnly,
            Layout::Marginal { .. } => Representation::SpatialMarginal,
            Layout::Full { .. } => Representation::SpatialFull,
        }
    }

    pub fn spatial_shape(&self) -> Option<(usize, usize)> {
        match *self {
            Layout::Vector => None,
            Layout::Marginal { h, w } | Layout::Full { h, w } => Some((h, w)),
        }
    }

    pub(crate) fn with_spatial(self, h: usize, w: usize) -> Layout {
        match self {
            Layout::Vector => Layout::Vector,
            Layout::Marginal { .. } => Layout::Marginal { h, w },
            Layout::Full { .. } => Layout::Full { h, w },
        }
    }
}

/// Which input pairs a kernel stores.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Pairs {
    /// All `n1 × n2` pairs, row-major.
    Cross { n1: usize, n2: usize },
    /// A batch against itself: the `i ≤ j` pairs, row-major.
    Symmetric { n: usize },
}

impl Pairs {
    pub fn len(&self) -> usize {
        match *self {
            Pairs::Cross { n1, n2 } => n1 * n2,
            Pairs::Symmetric { n } => n * (n + 1) / 2,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        match *self {
            Pairs::Cross { n1, n2 } => (n1, n2),
            Pairs::Symmetric { n } => (n, n),
        }
    }

    pub fn is_symmetric(&self) -> bool {
        matches!(self, Pairs::Symmetric { .. })
    }

    /// Storage index of pair `(i, j)`; symmetric storage needs `i ≤ j`.
    pub fn slot(&self, i: usize, j: usize) -> usize {
        match *self {
            Pairs::Cross { n2, .. } => i * n2 + j,
            Pairs::Symmetric { n } => {
                debug_assert!(i <= j);
                i * (2 * n - i + 1) / 2 + (j - i)
            }
        }
    }

    /// `(i, j)` of every slot, in storage order.
    pub fn iter(&self) -> Box<dyn Iterator<Item = (usize, usize)> + '_> {
        match *self {
            Pairs::Cross { n1, n2 } => Box::new((0..n1).flat_map(move |i| (0..n2).map(move |j| (i, j)))),
            Pairs::Symmetric { n } => Box::new((0..n).flat_map(move |i| (i..n).map(move |j| (i, j)))),
        }
    }
}

/// `slots` covariance blocks of one layout, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct CovBlocks {
    layout: Layout,
    slots: usize,
    data: Vec<f64>,
}

impl CovBlocks {
    pub fn new(layout: Layout, slots: usize, data: Vec<f64>) -> CovBlocks {
        assert_eq!(data.len(), slots * layout.block_len(), "block data has the wrong length");
        CovBlocks { layout, slots, data }
    }

    pub fn zeros(layout: Layout, slots: usize) -> CovBlocks {
        CovBlocks { layout, slots, data: vec![0.0; slots * layout.block_len()] }
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn block(&self, slot: usize) -> &[f64] {
        let b = self.layout.block_len();
        &self.data[slot * b..(slot + 1) * b]
    }

    pub fn blocks(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.layout.block_len())
    }

    pub fn blocks_mut(&mut self) -> std::slice::ChunksExactMut<'_, f64> {
        let b = self.layout.block_len();
        self.data.chunks_exact_mut(b)
    }

    pub(crate) fn map_blocks(&self, layout: Layout, mut f: impl FnMut(&[f64], &mut [f64])) -> CovBlocks {
        let mut out = CovBlocks::zeros(layout, self.slots);
        for (src, dst) in self.blocks().zip(out.blocks_mut()) {
            f(src, dst);
        }
        out
    }

    /// [`CovBlocks::map_blocks`] reusing this storage when output blocks are
    /// no larger than input blocks. Each input block is copied to a scratch
    /// buffer before its output is written.
    pub(crate) fn into_mapped(mut self, layout: Layout, mut f: impl FnMut(&[f64], &mut [f64])) -> CovBlocks {
        let (bin, bout) = (self.layout.block_len(), layout.block_len());
        if bout > bin {
            return self.map_blocks(layout, f);
        }
        let mut scratch = vec![0.0; bin];
        for s in 0..self.slots {
            scratch.copy_from_slice(&self.data[s * bin..(s + 1) * bin]);
            f(&scratch, &mut self.data[s * bout..(s + 1) * bout]);
        }
        self.data.truncate(self.slots * bout);
        if bout < bin {
            self.data.shrink_to_fit();
        }
        self.layout = layout;
        self
    }

    pub(crate) fn scale_shift(&mut self, scale: f64, shift: f64) {
        for v in &mut self.data {
            *v = scale * *v + shift;
        }
    }

    /// Bytes held by the block data.
    pub fn size_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }
}
