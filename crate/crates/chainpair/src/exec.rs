//! Data-parallel execution helpers for the simulator's inner loops: batch
//! scenario runs, brute-force candidate searches, and per-block chain
//! validation.
//!
//! With the default `parallel` feature the unsuffixed functions fan out over
//! rayon; without it they alias the `_seq` variants. Both flavors are always
//! available so callers (and the bench suite) can compare them directly.
//! Results are order-deterministic in either mode: `find_first` returns the
//! lowest matching index and `map_indexed` preserves index order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Applies `f` to `0..n`, preserving index order.
pub fn map_indexed<T, F>(n: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indexed_seq(n, f)
    }
}

/// Sequential counterpart of [`map_indexed`].
pub fn map_indexed_seq<T, F>(n: u64, f: F) -> Vec<T>
where
    F: Fn(u64) -> T,
{
    (0..n).map(f).collect()
}

/// Lowest index in `0..n` satisfying `pred`, if any.
pub fn find_first<F>(n: u64, pred: F) -> Option<u64>
where
    F: Fn(u64) -> bool + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().find_first(|&i| pred(i))
    }
    #[cfg(not(feature = "parallel"))]
    {
        find_first_seq(n, pred)
    }
}

/// Sequential counterpart of [`find_first`].
pub fn find_first_seq<F>(n: u64, pred: F) -> Option<u64>
where
    F: Fn(u64) -> bool,
{
    (0..n).find(|&i| pred(i))
}

/// All indices in `0..n` satisfying `pred`, in ascending order.
pub fn collect_matches<F>(n: u64, pred: F) -> Vec<u64>
where
    F: Fn(u64) -> bool + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().filter(|&i| pred(i)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        collect_matches_seq(n, pred)
    }
}

/// Sequential counterpart of [`collect_matches`].
pub fn collect_matches_seq<F>(n: u64, pred: F) -> Vec<u64>
where
    F: Fn(u64) -> bool,
{
    (0..n).filter(|&i| pred(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn find_first_returns_lowest_match() {
        assert_eq!(find_first(1000, |i| i % 7 == 0 && i > 100), Some(105));
        assert_eq!(find_first_seq(1000, |i| i % 7 == 0 && i > 100), Some(105));
        assert_eq!(find_first(50, |_| false), None);
    }

    #[test]
    fn map_preserves_index_order() {
        let par = map_indexed(200, |i| i * 3);
        let seq = map_indexed_seq(200, |i| i * 3);
        assert_eq!(par, seq);
    }

    #[test]
    fn matches_are_ascending() {
        let m = collect_matches(100, |i| i % 11 == 0);
        assert_eq!(m, collect_matches_seq(100, |i| i % 11 == 0));
        assert!(m.windows(2).all(|w| w[0] < w[1]));
    }
}
