//! Worker-count control for compute kernels.
//!
//! Kernels parallelize over output rows/elements only; every output element
//! is produced by one fixed sequential reduction, so results are bitwise
//! identical for any worker count. `U_ATTN_THREADS` caps the pool
//! (0 or 1 = strict single-threaded mode).

use std::sync::OnceLock;

static THREADS: OnceLock<usize> = OnceLock::new();

/// Effective worker count. Resolved once per process from `U_ATTN_THREADS`;
/// unset means "use the machine's parallelism".
pub fn threads() -> usize {
    *THREADS.get_or_init(|| {
        let requested = std::env::var("U_ATTN_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok());
        let n = match requested {
            Some(0) | Some(1) => return 1,
            Some(n) => n,
            None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        };
        // Ignore failure: a global pool may already exist (e.g. under a test
        // harness); rayon then uses that pool's size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        n
    })
}

/// Run `f(chunk_index, chunk)` over consecutive `row_len` chunks of `out`
/// (the final chunk may be shorter), in parallel when worthwhile. Chunk
/// boundaries depend only on `row_len`, never on the worker count.
pub fn for_each_row<T: Send, F>(out: &mut [T], row_len: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(row_len > 0);
    // Below this element count the dispatch overhead dominates.
    const MIN_PAR_ELEMS: usize = 64 * 1024;
    if threads() > 1 && out.len() >= MIN_PAR_ELEMS && out.len() / row_len > 1 {
        use rayon::prelude::*;
        out.par_chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
    } else {
        for (i, row) in out.chunks_mut(row_len).enumerate() {
            f(i, row);
        }
    }
}
