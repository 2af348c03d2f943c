//! Data-parallel execution with a sequential fallback.
//!
//! With the `parallel` feature (default) [`ExecMode::Parallel`] maps work
//! items on the rayon pool; without it every mode runs sequentially. Output
//! order always equals input order, so results never depend on scheduling.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

impl ExecMode {
    /// Whether this mode actually fans out in the current build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecMode::Parallel
    }

    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect();
        }
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }

    /// Like [`ExecMode::map`] but stops at the first error (in input order).
    pub fn try_map<T, R, E, F>(self, items: &[T], f: F) -> Result<Vec<R>, E>
    where
        T: Sync,
        R: Send,
        E: Send,
        F: Fn(usize, &T) -> Result<R, E> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }
}
