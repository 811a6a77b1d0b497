//! Execution schedule for per-image work.
//!
//! With the `parallel` feature (default) [`Schedule::Parallel`] runs on the
//! rayon pool; without it, both schedules run on the calling thread.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Serial,
    #[default]
    Parallel,
}

impl Schedule {
    /// Whether this build can actually run work concurrently.
    pub fn is_concurrent(self) -> bool {
        cfg!(feature = "parallel") && self == Schedule::Parallel
    }
}

/// Applies `f` to every element in place, preserving element order.
pub fn for_each_mut<T, F>(schedule: Schedule, items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if schedule == Schedule::Parallel {
        use rayon::prelude::*;
        items.par_iter_mut().enumerate().for_each(|(i, t)| f(i, t));
        return;
    }
    let _ = schedule;
    items.iter_mut().enumerate().for_each(|(i, t)| f(i, t));
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_indexed<R, F>(schedule: Schedule, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if schedule == Schedule::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = schedule;
    (0..n).map(f).collect()
}
