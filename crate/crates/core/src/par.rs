//! Index-parallel map used by every ensemble.
//!
//! Work items are whole networks. Each item derives its own RNG streams from
//! its index, and results come back in index order, so the output is the same
//! whether the items run on rayon or sequentially.

use crate::error::Result;

/// `(0..count).map(f)`, on rayon when the `parallel` feature is enabled.
pub fn map_indices<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..count).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indices_seq(count, f)
    }
}

/// Always-sequential variant.
pub fn map_indices_seq<T, F>(count: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..count).map(f).collect()
}

pub fn try_map_indices<T, F>(count: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    map_indices(count, f).into_iter().collect()
}

pub fn try_map_indices_seq<T, F>(count: usize, f: F) -> Result<Vec<T>>
where
    F: Fn(usize) -> Result<T>,
{
    map_indices_seq(count, f).into_iter().collect()
}

/// Like [`try_map_indices`], but never runs more than `max_concurrent` items
/// at once. Used when a single work item holds gigabytes.
pub fn try_map_indices_bounded<T, F>(count: usize, max_concurrent: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let step = max_concurrent.max(1);
    let mut out = Vec::with_capacity(count);
    for start in (0..count).step_by(step) {
        let end = (start + step).min(count);
        out.extend(try_map_indices(end - start, |i| f(start + i))?);
    }
    Ok(out)
}

/// Memory budget for concurrently running work items, in bytes. Read from
/// `VARPROP_MEMORY_BUDGET_MB`; otherwise 80% of `MemAvailable` on Linux, or
/// 8 GiB when that is unknown.
pub fn memory_budget() -> usize {
    if let Some(mb) = std::env::var("VARPROP_MEMORY_BUDGET_MB")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        return mb.saturating_mul(1 << 20);
    }
    available_memory()
        .map(|b| b / 5 * 4)
        .unwrap_or(8usize << 30)
}

fn available_memory() -> Option<usize> {
    let info = std::fs::read_to_string("/proc/meminfo").ok()?;
    let line = info.lines().find(|l| l.starts_with("MemAvailable:"))?;
    let kb: usize = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb.saturating_mul(1024))
}

/// How many items of `bytes_per_item` fit in the memory budget (at least one).
pub fn max_concurrent_for(bytes_per_item: usize) -> usize {
    (memory_budget() / bytes_per_item.max(1)).max(1)
}

/// True when ensembles are dispatched to rayon.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_in_order() {
        let f = |i: usize| (i * i) as u64;
        assert_eq!(map_indices(100, f), map_indices_seq(100, f));
    }

    #[test]
    fn bounded_keeps_order() {
        let r = try_map_indices_bounded(17, 4, |i| Ok(i * 2)).unwrap();
        assert_eq!(r, (0..17).map(|i| i * 2).collect::<Vec<_>>());
        assert!(max_concurrent_for(usize::MAX) >= 1);
    }

    #[test]
    fn first_error_is_reported() {
        let r: Result<Vec<usize>> = try_map_indices(10, |i| {
            if i == 3 {
                Err(crate::Error::Config("three".into()))
            } else {
                Ok(i)
            }
        });
        assert!(r.is_err());
    }
}
