//! Worker-pool setup. Work is always split into a fixed number of chunks
//! and reduced in chunk order, so results do not depend on the worker count.

use std::sync::OnceLock;

use rayon::prelude::*;

pub const THREADS_ENV: &str = "ERNF_THREADS";

static CONFIGURED: OnceLock<usize> = OnceLock::new();

/// Builds the global pool once. `deterministic` forces a single worker;
/// otherwise `ERNF_THREADS` caps the worker count. Returns the worker count
/// in effect.
pub fn configure(deterministic: bool) -> usize {
    *CONFIGURED.get_or_init(|| {
        let requested = if deterministic {
            Some(1)
        } else {
            std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0)
        };
        if let Some(n) = requested {
            if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
                log::warn!("worker pool already initialized; {THREADS_ENV} ignored");
            }
        }
        rayon::current_num_threads()
    })
}

/// Applies `f` to consecutive chunks of `items` in parallel and returns the
/// results in chunk order.
pub fn map_chunks<T, R, F>(items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &[T]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    items
        .par_chunks(chunk)
        .enumerate()
        .map(|(i, c)| f(i * chunk, c))
        .collect()
}

/// Splits `0..n` into `parts` contiguous ranges whose bounds depend only on
/// `n` and `parts`.
pub fn fixed_ranges(n: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let parts = parts.max(1);
    (0..parts)
        .map(|p| (p * n / parts)..((p + 1) * n / parts))
        .filter(|r| !r.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_cover_exactly() {
        for n in [0, 1, 7, 100, 1023] {
            for parts in [1, 3, 4, 16] {
                let r = fixed_ranges(n, parts);
                let mut next = 0;
                for x in &r {
                    assert_eq!(x.start, next);
                    next = x.end;
                }
                assert_eq!(next, n);
            }
        }
    }

    #[test]
    fn chunk_results_keep_order() {
        let v: Vec<u32> = (0..1000).collect();
        let sums = map_chunks(&v, 64, |start, c| (start, c.iter().sum::<u32>()));
        assert_eq!(sums[0], (0, (0..64).sum()));
        assert_eq!(sums.iter().map(|s| s.1).sum::<u32>(), (0..1000).sum::<u32>());
        assert!(sums.windows(2).all(|w| w[0].0 < w[1].0));
    }
}
