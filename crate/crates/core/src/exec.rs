//! Execution strategy for the data-parallel inner loops.
//!
//! Every kernel in the crate splits its work into independent output rows (or
//! independent trials) and hands them to [`Exec`]. With the `parallel` feature
//! the rows are distributed over the rayon pool; without it, or when
//! [`Exec::Sequential`] is requested explicitly, they run in order on the
//! calling thread. Per-element arithmetic is identical in both modes, so
//! results are bit-identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// True when this strategy will actually use more than one thread.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Calls `f(row_index, row)` for every `width`-long chunk of `data`.
    pub fn for_each_row<F>(self, data: &mut [f64], width: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        if width == 0 {
            return;
        }
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            data.par_chunks_mut(width)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
        data.chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }

    /// Like [`Exec::for_each_row`], summing the `u64` each call returns.
    pub fn for_each_row_counted<F>(self, data: &mut [f64], width: usize, f: F) -> u64
    where
        F: Fn(usize, &mut [f64]) -> u64 + Sync + Send,
    {
        if width == 0 {
            return 0;
        }
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return data
                .par_chunks_mut(width)
                .enumerate()
                .map(|(i, row)| f(i, row))
                .sum();
        }
        data.chunks_mut(width)
            .enumerate()
            .map(|(i, row)| f(i, row))
            .sum()
    }

    /// Maps `f` over `0..n`, preserving index order in the output.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }
}
