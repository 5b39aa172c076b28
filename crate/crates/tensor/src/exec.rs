//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the helpers dispatch to rayon; without
//! it, or when the process-wide mode is set to [`Parallelism::Sequential`], they
//! run on the calling thread. Results are always returned in index order, so
//! downstream reductions are deterministic regardless of the mode.

use std::sync::atomic::{AtomicU8, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Parallelism {
    Sequential,
    Parallel,
}

impl Default for Parallelism {
    fn default() -> Self {
        mode()
    }
}

static MODE: AtomicU8 = AtomicU8::new(if cfg!(feature = "parallel") { 1 } else { 0 });

/// Process-wide default used by kernels that take no explicit mode.
pub fn mode() -> Parallelism {
    match MODE.load(Ordering::Relaxed) {
        0 => Parallelism::Sequential,
        _ => Parallelism::Parallel,
    }
}

pub fn set_mode(mode: Parallelism) {
    MODE.store(
        match mode {
            Parallelism::Sequential => 0,
            Parallelism::Parallel => 1,
        },
        Ordering::Relaxed,
    );
}

/// Whether parallel dispatch is compiled in.
pub const fn parallel_available() -> bool {
    cfg!(feature = "parallel")
}

pub fn map_indices<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    map_indices_with(mode(), n, f)
}

pub fn map_indices_with<U, F>(par: Parallelism, n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    match par {
        #[cfg(feature = "parallel")]
        Parallelism::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

pub fn map_slice_with<T, U, F>(par: Parallelism, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match par {
        #[cfg(feature = "parallel")]
        Parallelism::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}

/// Runs `f(i, chunk)` over consecutive `chunk_len`-sized chunks of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    match mode() {
        #[cfg(feature = "parallel")]
        Parallelism::Parallel => data
            .par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
        _ => data
            .chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree_and_keep_order() {
        let seq = map_indices_with(Parallelism::Sequential, 100, |i| i * i);
        let par = map_indices_with(Parallelism::Parallel, 100, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49);
    }

    #[test]
    fn chunks_are_visited_once() {
        let mut v = vec![0usize; 12];
        for_each_chunk_mut(&mut v, 5, |i, c| c.iter_mut().for_each(|x| *x = i + 1));
        assert_eq!(v, vec![1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 3, 3]);
    }
}
