//! Execution strategy for the path-parallel inner loops.
//!
//! With the `parallel` feature (on by default) `Execution::Parallel` runs on
//! the rayon global pool. Without it every mode runs sequentially. Results are
//! bit-identical across modes: work is split into fixed-size chunks whose
//! partial results are combined in index order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Number of paths per work unit for chunked reductions.
pub const CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Evaluates `f(i)` for `i in 0..n`, preserving order.
pub fn map_indices<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Runs `f(row_index, row)` over consecutive rows of width `width`.
pub fn for_each_row<T, F>(exec: Execution, data: &mut [T], width: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        data.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = exec;
    data.chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
}

/// Chunked map-reduce over `0..n`. Each chunk of `CHUNK` indices is folded
/// with `fold`, then partials are merged left to right with `merge`, so the
/// result does not depend on scheduling.
pub fn chunked_reduce<A, I, F, M>(exec: Execution, n: usize, init: I, fold: F, merge: M) -> A
where
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(&mut A, usize) + Sync + Send,
    M: Fn(&mut A, A),
{
    let n_chunks = n.div_ceil(CHUNK);
    let partials = map_indices(exec, n_chunks, |c| {
        let mut acc = init();
        let end = ((c + 1) * CHUNK).min(n);
        for i in c * CHUNK..end {
            fold(&mut acc, i);
        }
        acc
    });
    let mut total = init();
    for p in partials {
        merge(&mut total, p);
    }
    total
}

/// Ordered sum of `f(i)` with chunked partial sums.
pub fn chunked_sum<F>(exec: Execution, n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    chunked_reduce(exec, n, || 0.0, |acc, i| *acc += f(i), |a, b| *a += b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_bitwise() {
        let f = |i: usize| ((i as f64) * 0.37).sin() / (1.0 + i as f64);
        let a = chunked_sum(Execution::Sequential, 10_000, f);
        let b = chunked_sum(Execution::Parallel, 10_000, f);
        assert_eq!(a.to_bits(), b.to_bits());
        let va = map_indices(Execution::Sequential, 100, |i| i * i);
        let vb = map_indices(Execution::Parallel, 100, |i| i * i);
        assert_eq!(va, vb);
    }

    #[test]
    fn rows_visited_in_place() {
        let mut data = vec![0usize; 12];
        for_each_row(Execution::Parallel, &mut data, 3, |i, row| {
            for v in row.iter_mut() {
                *v = i;
            }
        });
        assert_eq!(data, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
    }
}
