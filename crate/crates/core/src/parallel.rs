//! Bounded fork-join helpers. Worker count comes from `LEMAMBA_THREADS`
//! (default 1, in which case everything runs inline).

use std::sync::OnceLock;

pub fn threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var("LEMAMBA_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or(1)
    })
}

/// Calls `f(chunk_index, chunk)` for every `chunk_len`-sized piece of `out`,
/// spreading contiguous runs of chunks over the configured workers.
pub fn par_chunks_mut<T: Send>(
    out: &mut [T],
    chunk_len: usize,
    f: impl Fn(usize, &mut [T]) + Sync,
) {
    assert!(chunk_len > 0);
    let n_chunks = out.len() / chunk_len;
    let workers = threads().min(n_chunks.max(1));
    if workers <= 1 {
        for (i, c) in out.chunks_mut(chunk_len).enumerate() {
            f(i, c);
        }
        return;
    }
    let per = n_chunks.div_ceil(workers);
    std::thread::scope(|s| {
        for (w, block) in out.chunks_mut(per * chunk_len).enumerate() {
            let f = &f;
            s.spawn(move || {
                for (i, c) in block.chunks_mut(chunk_len).enumerate() {
                    f(w * per + i, c);
                }
            });
        }
    });
}
