//! Order-preserving map over independent work items.
//!
//! With the `parallel` feature and `jobs > 1` items are evaluated on a rayon
//! pool; otherwise sequentially. Results always come back in input order so
//! any reduction over them is independent of the thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub struct Executor {
    jobs: usize,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor").field("jobs", &self.jobs).finish()
    }
}

impl Default for Executor {
    fn default() -> Self {
        Self::sequential()
    }
}

impl Executor {
    pub fn sequential() -> Self {
        Self {
            jobs: 1,
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    /// `jobs` workers; falls back to sequential when the crate is built
    /// without the `parallel` feature.
    pub fn with_jobs(jobs: usize) -> Self {
        let jobs = jobs.max(1);
        #[cfg(feature = "parallel")]
        {
            let pool = (jobs > 1).then(|| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(jobs)
                    .build()
                    .expect("failed to build worker pool")
            });
            Self { jobs, pool }
        }
        #[cfg(not(feature = "parallel"))]
        {
            Self { jobs }
        }
    }

    pub fn jobs(&self) -> usize {
        self.jobs
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
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect());
        }
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}
