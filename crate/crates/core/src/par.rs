//! Runtime choice between rayon and plain iteration.
//!
//! With the `parallel` feature disabled every helper runs sequentially and
//! [`Exec::Parallel`] is accepted but ignored. Work items are always indexed
//! and their RNG streams derived from the index, so both modes produce
//! identical results.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// `f(i)` for `i in 0..len`, collected in index order.
pub fn map_range<T, F>(exec: Exec, len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..len).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..len).map(f).collect()
}

/// `f(i, &mut items[i])` for every element, collected in index order.
pub fn map_mut<A, T, F>(exec: Exec, items: &mut [A], f: F) -> Vec<T>
where
    A: Send,
    T: Send,
    F: Fn(usize, &mut A) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items
            .par_iter_mut()
            .enumerate()
            .map(|(i, a)| f(i, a))
            .collect();
    }
    let _ = exec;
    items.iter_mut().enumerate().map(|(i, a)| f(i, a)).collect()
}

/// Like [`map_mut`] over two slices of equal length.
pub fn map_mut2<A, B, T, F>(exec: Exec, a: &mut [A], b: &mut [B], f: F) -> Vec<T>
where
    A: Send,
    B: Send,
    T: Send,
    F: Fn(usize, &mut A, &mut B) -> T + Sync + Send,
{
    assert_eq!(a.len(), b.len());
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return a
            .par_iter_mut()
            .zip(b.par_iter_mut())
            .enumerate()
            .map(|(i, (x, y))| f(i, x, y))
            .collect();
    }
    let _ = exec;
    a.iter_mut()
        .zip(b.iter_mut())
        .enumerate()
        .map(|(i, (x, y))| f(i, x, y))
        .collect()
}

/// Run `f` on a pool of `threads` workers (the global pool when 0). Without
/// the `parallel` feature `f` simply runs on the caller's thread.
pub fn with_threads<R, F>(threads: usize, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    if threads > 0 {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            return pool.install(f);
        }
    }
    let _ = threads;
    f()
}
