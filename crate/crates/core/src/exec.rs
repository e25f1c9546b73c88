//! Data-parallel helpers. With the `parallel` feature the parallel mode runs
//! on rayon; without it every mode runs sequentially. Results are always
//! returned in input order.

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Map `f` over `0..n`, collecting results in index order.
    pub fn map<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Cap the global worker pool. Reads `MGL_THREADS` when `threads` is `None`.
/// Has no effect without the `parallel` feature or once the pool exists.
pub fn init_thread_pool(threads: Option<usize>) {
    let threads = threads.or_else(|| {
        std::env::var("MGL_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
    });
    #[cfg(feature = "parallel")]
    if let Some(n) = threads.filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}
