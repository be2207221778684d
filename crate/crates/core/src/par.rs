//! Batch execution helpers.
//!
//! With the `parallel` feature (default) [`ExecMode::Parallel`] fans work out
//! over the rayon pool; without it every mode runs sequentially.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

pub fn is_parallel_available() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(feature = "parallel")]
pub fn map<T, U, F>(items: &[T], mode: ExecMode, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    match mode {
        ExecMode::Parallel => items.par_iter().map(f).collect(),
        ExecMode::Sequential => items.iter().map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, U, F>(items: &[T], _mode: ExecMode, f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_range<U, F>(count: usize, mode: ExecMode, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    use rayon::prelude::*;
    match mode {
        ExecMode::Parallel => (0..count).into_par_iter().map(f).collect(),
        ExecMode::Sequential => (0..count).map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<U, F>(count: usize, _mode: ExecMode, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..count).map(f).collect()
}
