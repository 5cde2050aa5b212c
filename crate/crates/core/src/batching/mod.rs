//! Blocked, multi-threaded evaluation of any [`KernelFunction`].
//!
//! ```
//! use tangent_kernels::batching::batch;
//! use tangent_kernels::netspec::zoo;
//! use tangent_kernels::{Batch, Get, KernelFn, KernelFunction, Phi};
//!
//! let spec = zoo::mlp(3, 64, 2, Phi::relu(), 1.5, 0.05, 1);
//! let kfn = KernelFn::new(&spec).unwrap();
//! let x = Batch::vectors(5, 3, (0..15).map(|i| (i as f64).sin()).collect()).unwrap();
//! let whole = kfn.compute(&x, None, Get::Both).unwrap();
//! let blocked = batch(&kfn, 2, 2).unwrap().compute(&x, None, Get::Both).unwrap();
//! assert_eq!(whole, blocked);
//! ```

mod ntkm;

pub use ntkm::{read_ntkm, write_ntkm, NtkmWriter};

use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use nalgebra::DMatrix;

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::kernel::{Get, Kernel, KernelFunction};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Computed between two different slices.
    Cross,
    /// On the diagonal of a symmetric plan; computed from one slice.
    Diagonal,
    /// Below the diagonal of a symmetric plan; the transpose of the block
    /// with rows and columns swapped.
    Mirror,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
    pub kind: BlockKind,
}

/// Tiling of an `n1 × n2` kernel matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPlan {
    pub n1: usize,
    pub n2: usize,
    pub batch_size: usize,
    pub symmetric: bool,
    pub blocks: Vec<Block>,
}

impl BlockPlan {
    /// Blocks that need a call to the kernel function, in plan order.
    pub fn computed(&self) -> impl Iterator<Item = &Block> {
        self.blocks.iter().filter(|b| b.kind != BlockKind::Mirror)
    }

    pub fn mirrored(&self) -> impl Iterator<Item = &Block> {
        self.blocks.iter().filter(|b| b.kind == BlockKind::Mirror)
    }
}

fn ranges(n: usize, size: usize) -> Vec<Range<usize>> {
    (0..n.div_ceil(size)).map(|i| i * size..((i + 1) * size).min(n)).collect()
}

/// Row-major tiling into blocks of at most `batch_size` per side.
/// `symmetric` (only honored when `n1 == n2`) computes the upper triangle and
/// mirrors the rest.
pub fn plan_blocks(n1: usize, n2: usize, batch_size: usize, symmetric: bool) -> Result<BlockPlan> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let symmetric = symmetric && n1 == n2;
    let rows = ranges(n1, batch_size);
    let cols = ranges(n2, batch_size);
    let mut blocks = Vec::with_capacity(rows.len() * cols.len());
    for (bi, r) in rows.iter().enumerate() {
        for (bj, c) in cols.iter().enumerate() {
            let kind = match (symmetric, bi.cmp(&bj)) {
                (false, _) | (true, std::cmp::Ordering::Less) => BlockKind::Cross,
                (true, std::cmp::Ordering::Equal) => BlockKind::Diagonal,
                (true, std::cmp::Ordering::Greater) => BlockKind::Mirror,
            };
            blocks.push(Block { rows: r.clone(), cols: c.clone(), kind });
        }
    }
    Ok(BlockPlan { n1, n2, batch_size, symmetric, blocks })
}

/// Kernel function evaluated block by block on `n_workers` threads.
#[derive(Clone, Debug)]
pub struct Batched<K> {
    inner: K,
    batch_size: usize,
    n_workers: usize,
}

/// Wraps `kernel_fn` so that large Gram matrices are computed in blocks.
pub fn batch<K: KernelFunction>(kernel_fn: K, batch_size: usize, n_workers: usize) -> Result<Batched<K>> {
    if batch_size == 0 || n_workers == 0 {
        return Err(Error::InvalidArgument("batch_size and n_workers must be at least 1".into()));
    }
    Ok(Batched { inner: kernel_fn, batch_size, n_workers })
}

/// A kernel either held in memory or spilled to matrix files.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredKernel {
    InMemory(Kernel),
    OnDisk { nngp: PathBuf, ntk: Option<PathBuf> },
}

impl<K: KernelFunction> Batched<K> {
    pub fn inner(&self) -> &K {
        &self.inner
    }

    /// Runs every computed block of `plan` and hands results to `sink` in
    /// completion order. Stops at the first failure.
    fn run(
        &self,
        plan: &BlockPlan,
        x1: &Batch,
        x2: Option<&Batch>,
        get: Get,
        sink: &mut dyn FnMut(&Block, Kernel) -> Result<()>,
    ) -> Result<()> {
        let jobs: Vec<&Block> = plan.computed().collect();
        let other = x2.unwrap_or(x1);
        let next = AtomicUsize::new(0);
        let stop = AtomicBool::new(false);
        let (tx, rx) = mpsc::channel::<(usize, Result<Kernel>)>();
        let mut first_err: Option<(usize, Error)> = None;

        std::thread::scope(|scope| {
            for _ in 0..self.n_workers.min(jobs.len()) {
                let tx = tx.clone();
                let (jobs, next, stop) = (&jobs, &next, &stop);
                scope.spawn(move || {
                    while !stop.load(Ordering::Relaxed) {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(block) = jobs.get(i) else { break };
                        let a = x1.slice(block.rows.clone());
                        let out = match block.kind {
                            BlockKind::Diagonal => self.inner.compute(&a, None, get),
                            _ => self.inner.compute(&a, Some(&other.slice(block.cols.clone())), get),
                        };
                        if tx.send((i, out)).is_err() {
                            break;
                        }
                    }
                });
            }
            drop(tx);
            for (i, out) in rx {
                let res = out.and_then(|k| {
                    let b = jobs[i];
                    if k.nngp.shape() != (b.rows.len(), b.cols.len()) {
                        return Err(Error::Shape(format!("kernel function returned {:?}", k.nngp.shape())));
                    }
                    sink(b, k)
                });
                if let Err(e) = res {
                    stop.store(true, Ordering::Relaxed);
                    // Report the earliest failing block so errors do not depend on scheduling.
                    if first_err.as_ref().is_none_or(|(j, _)| i < *j) {
                        first_err = Some((i, e));
                    }
                }
            }
        });

        match first_err {
            None => Ok(()),
            Some((i, source)) => {
                Err(Error::Block { rows: jobs[i].rows.clone(), cols: jobs[i].cols.clone(), source: Box::new(source) })
            }
        }
    }

    fn plan(&self, x1: &Batch, x2: Option<&Batch>) -> Result<BlockPlan> {
        let n2 = x2.map_or(x1.len(), Batch::len);
        plan_blocks(x1.len(), n2, self.batch_size, x2.is_none())
    }

    /// Computes the kernel straight into matrix files in `dir`
    /// (`nngp.ntkm`, and `ntk.ntkm` when requested).
    pub fn compute_to_files(&self, x1: &Batch, x2: Option<&Batch>, get: Get, dir: &Path) -> Result<StoredKernel> {
        let plan = self.plan(x1, x2)?;
        let nngp_path = dir.join("nngp.ntkm");
        let ntk_path = get.wants_ntk().then(|| dir.join("ntk.ntkm"));
        let mut nngp = NtkmWriter::create(&nngp_path, plan.n1, plan.n2)?;
        let mut ntk = ntk_path.as_ref().map(|p| NtkmWriter::create(p, plan.n1, plan.n2)).transpose()?;
        self.run(&plan, x1, x2, get, &mut |b, k| {
            let put = |w: &mut NtkmWriter, m: &DMatrix<f64>| -> Result<()> {
                w.write_block(b.rows.start, b.cols.start, m, false)?;
                if b.kind == BlockKind::Cross && plan.symmetric {
                    w.write_block(b.cols.start, b.rows.start, m, true)?;
                }
                Ok(())
            };
            put(&mut nngp, &k.nngp)?;
            if let Some(w) = ntk.as_mut() {
                let m = k.ntk.as_ref().ok_or_else(|| Error::Unsupported("kernel function returned no NTK".into()))?;
                put(w, m)?;
            }
            Ok(())
        })?;
        nngp.finish()?;
        if let Some(w) = ntk {
            w.finish()?;
        }
        Ok(StoredKernel::OnDisk { nngp: nngp_path, ntk: ntk_path })
    }

    /// Keeps the result in memory unless it would exceed `budget_bytes`, in
    /// which case it is written to `dir`.
    pub fn compute_stored(
        &self,
        x1: &Batch,
        x2: Option<&Batch>,
        get: Get,
        budget_bytes: usize,
        dir: &Path,
    ) -> Result<StoredKernel> {
        let n2 = x2.map_or(x1.len(), Batch::len);
        let matrices = if get.wants_ntk() { 2 } else { 1 };
        if x1.len() * n2 * 8 * matrices > budget_bytes {
            self.compute_to_files(x1, x2, get, dir)
        } else {
            self.compute(x1, x2, get).map(StoredKernel::InMemory)
        }
    }
}

impl<K: KernelFunction> KernelFunction for Batched<K> {
    fn compute(&self, x1: &Batch, x2: Option<&Batch>, get: Get) -> Result<Kernel> {
        let plan = self.plan(x1, x2)?;
        let mut nngp = DMatrix::zeros(plan.n1, plan.n2);
        let mut ntk = get.wants_ntk().then(|| DMatrix::zeros(plan.n1, plan.n2));
        let mut missing_ntk = false;
        self.run(&plan, x1, x2, get, &mut |b, k| {
            nngp.view_mut((b.rows.start, b.cols.start), (b.rows.len(), b.cols.len())).copy_from(&k.nngp);
            match (ntk.as_mut(), k.ntk) {
                (Some(out), Some(t)) => {
                    out.view_mut((b.rows.start, b.cols.start), (b.rows.len(), b.cols.len())).copy_from(&t)
                }
                (Some(_), None) => missing_ntk = true,
                _ => {}
            }
            Ok(())
        })?;
        for b in plan.mirrored() {
            let (r, c) = (b.rows.clone(), b.cols.clone());
            let src = nngp.view((c.start, r.start), (c.len(), r.len())).transpose();
            nngp.view_mut((r.start, c.start), (r.len(), c.len())).copy_from(&src);
            if let Some(t) = ntk.as_mut() {
                let src = t.view((c.start, r.start), (c.len(), r.len())).transpose();
                t.view_mut((r.start, c.start), (r.len(), c.len())).copy_from(&src);
            }
        }
        // Inner functions may return no NTK for `Get::Both`; match that.
        Ok(Kernel { nngp, ntk: if missing_ntk { None } else { ntk } })
    }
}
