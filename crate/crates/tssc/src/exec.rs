use rayon::prelude::*;
use rayon::ThreadPool;
use tssc_core::engine::BatchExecutor;

/// Fans work items out over a rayon pool.
///
/// `map` always returns results in item order. `reduce` folds left to right
/// when `deterministic` is set, so floating-point sums do not depend on the
/// thread count; otherwise it uses a parallel tree reduction.
pub struct RayonExecutor {
    pool: ThreadPool,
    deterministic: bool,
}

impl RayonExecutor {
    /// `jobs = None` uses one thread per available core.
    pub fn new(jobs: Option<usize>, deterministic: bool) -> Result<Self, rayon::ThreadPoolBuildError> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(j) = jobs {
            b = b.num_threads(j.max(1));
        }
        Ok(Self {
            pool: b.build()?,
            deterministic,
        })
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl BatchExecutor for RayonExecutor {
    fn map<T: Sync, R: Send>(&self, items: &[T], f: &(dyn Fn(&T) -> R + Sync)) -> Vec<R> {
        self.pool.install(|| items.par_iter().map(f).collect())
    }

    fn reduce<G: Send>(&self, items: Vec<G>, add: &(dyn Fn(G, G) -> G + Sync)) -> Option<G> {
        if self.deterministic {
            items.into_iter().reduce(add)
        } else {
            self.pool.install(|| items.into_par_iter().reduce_with(add))
        }
    }
}
