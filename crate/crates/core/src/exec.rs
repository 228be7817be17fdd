//! Sequential or rayon-backed execution of per-chunk work.
//!
//! Batches are cut into fixed-size chunks regardless of the mode, and chunk
//! results are always combined in chunk order, so both modes produce
//! bit-identical numbers.

/// Samples per unit of parallel work.
pub const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Falls back to sequential execution when built without the `parallel`
    /// feature.
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    /// Applies `f` to every `CHUNK`-sized slice of `items`, returning results
    /// in chunk order.
    pub fn map_chunks<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &[T]) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                items.par_chunks(CHUNK).enumerate().map(|(i, c)| f(i, c)).collect()
            }
            _ => items.chunks(CHUNK).enumerate().map(|(i, c)| f(i, c)).collect(),
        }
    }

    /// Maps `f` over `items` in order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                items.par_iter().map(f).collect()
            }
            _ => items.iter().map(f).collect(),
        }
    }
}

/// Runs `f` with nested parallel work limited to `threads` workers. `None`
/// keeps the global pool.
pub fn with_threads<R, F>(threads: Option<usize>, f: F) -> crate::error::Result<R>
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    match threads {
        #[cfg(feature = "parallel")]
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| crate::error::Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        _ => Ok(f()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_on_order() {
        let xs: Vec<u32> = (0..1000).collect();
        let f = |i: usize, c: &[u32]| (i, c.iter().map(|&x| x as u64).sum::<u64>());
        assert_eq!(Exec::Sequential.map_chunks(&xs, f), Exec::Parallel.map_chunks(&xs, f));
        assert_eq!(Exec::Sequential.map_chunks(&xs, f).len(), 1000usize.div_ceil(CHUNK));
    }
}
