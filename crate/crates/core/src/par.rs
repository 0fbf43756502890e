//! Data-parallel execution helpers.
//!
//! Every helper produces bit-identical results in both modes: work is split
//! into independent items and each item is computed with the same
//! instruction sequence. Without the `parallel` feature the parallel mode
//! silently runs sequentially.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL_KERNELS: AtomicBool = AtomicBool::new(true);

/// Execution strategy for a data-parallel loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Strategy used by dense kernels (matmul and friends).
    pub fn kernels() -> Exec {
        if PARALLEL_KERNELS.load(Ordering::Relaxed) {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Switch dense kernels between sequential and rayon execution.
pub fn set_parallel_kernels(enabled: bool) {
    PARALLEL_KERNELS.store(enabled, Ordering::Relaxed);
}

/// `(0..n).map(f).collect()`, optionally across the rayon pool.
pub fn map_range<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Map over a slice, preserving order.
pub fn map_slice<'a, S, T, F>(exec: Exec, items: &'a [S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&'a S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Run `f(row_index, row)` over consecutive `cols`-wide rows of `out`.
pub fn for_each_row<F>(exec: Exec, out: &mut [f64], cols: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if cols == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        out.par_chunks_mut(cols).enumerate().for_each(|(i, r)| f(i, r));
        return;
    }
    let _ = exec;
    for (i, r) in out.chunks_mut(cols).enumerate() {
        f(i, r);
    }
}
