//! Execution-mode shim: rayon when the `parallel` feature is enabled, plain
//! iterators otherwise. Every call site takes an explicit [`Parallelism`] so
//! both paths can be benchmarked side by side from a single build.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[derive(Default)]
pub enum Parallelism {
    Sequential,
    #[cfg(feature = "parallel")]
    #[default]
    Rayon,
}


pub fn map<T, R, F>(mode: Parallelism, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match mode {
        Parallelism::Sequential => items.iter().map(f).collect(),
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => items.par_iter().map(f).collect(),
    }
}

pub fn map_range<R, F>(mode: Parallelism, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match mode {
        Parallelism::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => (0..n).into_par_iter().map(f).collect(),
    }
}

pub fn for_each_mut<T, F>(mode: Parallelism, items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    match mode {
        Parallelism::Sequential => items.iter_mut().enumerate().for_each(|(i, t)| f(i, t)),
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => items
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, t)| f(i, t)),
    }
}
