//! Order-preserving fan-out over a bounded worker pool.
//!
//! With the `parallel` feature (default) work runs on a dedicated rayon pool
//! sized by the configured parallelism. Without it, or with parallelism 1,
//! items are processed in order on the calling thread. Results always come
//! back in input order, so callers never depend on completion order.

#[cfg(feature = "parallel")]
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone)]
pub struct Executor {
    parallelism: usize,
    #[cfg(feature = "parallel")]
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor")
            .field("parallelism", &self.parallelism)
            .finish()
    }
}

impl Executor {
    pub fn sequential() -> Self {
        Executor {
            parallelism: 1,
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    pub fn new(parallelism: usize) -> Result<Self> {
        if parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        if parallelism == 1 {
            return Ok(Self::sequential());
        }
        #[cfg(feature = "parallel")]
        {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(parallelism)
                .thread_name(|i| format!("logicqa-worker-{i}"))
                .build()
                .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
            Ok(Executor {
                parallelism,
                pool: Some(Arc::new(pool)),
            })
        }
        #[cfg(not(feature = "parallel"))]
        {
            log::debug!("built without the `parallel` feature; running sequentially");
            Ok(Executor { parallelism })
        }
    }

    /// Configured parallelism (what was asked for, not what is available).
    pub fn parallelism(&self) -> usize {
        self.parallelism
    }

    pub fn is_parallel(&self) -> bool {
        #[cfg(feature = "parallel")]
        {
            self.pool.is_some()
        }
        #[cfg(not(feature = "parallel"))]
        {
            false
        }
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| items.par_iter().map(&f).collect());
        }
        items.iter().map(f).collect()
    }

    /// Like [`map`](Self::map), failing with the error of the lowest-indexed
    /// failing item.
    pub fn try_map<T, R, F>(&self, items: &[T], f: F) -> Result<Vec<R>>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> Result<R> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order_at_any_parallelism() {
        let items: Vec<u64> = (0..500).collect();
        let expected: Vec<u64> = items.iter().map(|x| x * x).collect();
        for p in [1, 2, 8] {
            let ex = Executor::new(p).unwrap();
            assert_eq!(ex.map(&items, |x| x * x), expected);
        }
    }

    #[test]
    fn first_error_by_index_wins() {
        let ex = Executor::new(4).unwrap();
        let items: Vec<usize> = (0..100).collect();
        let err = ex
            .try_map(&items, |&i| {
                if i % 10 == 7 {
                    Err(Error::VoteUndefined(i))
                } else {
                    Ok(i)
                }
            })
            .unwrap_err();
        assert!(matches!(err, Error::VoteUndefined(7)));
    }

    #[test]
    fn nested_fan_out_works() {
        let ex = Executor::new(3).unwrap();
        let outer: Vec<usize> = (0..10).collect();
        let sums = ex.map(&outer, |&i| {
            let inner: Vec<usize> = (0..i).collect();
            ex.map(&inner, |&j| j).into_iter().sum::<usize>()
        });
        assert_eq!(sums, (0..10usize).map(|i| i * i.saturating_sub(1) / 2).collect::<Vec<_>>());
    }

    #[test]
    fn zero_parallelism_is_rejected() {
        assert!(Executor::new(0).is_err());
        assert!(!Executor::new(1).unwrap().is_parallel());
    }
}
