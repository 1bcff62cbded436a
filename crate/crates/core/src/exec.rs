//! Execution strategy for embarrassingly parallel task lists.
//!
//! With the `parallel` feature (default), [`map_ordered`] fans tasks out
//! over rayon; without it, it degrades to a plain sequential map. Results
//! are always assembled in input order, and every task owns its inputs
//! (derived RNG streams, no shared state), so both paths produce identical
//! output. [`map_ordered_seq`] is the always-sequential reference used by
//! equality tests and benchmarks.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(&f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(&f).collect()
    }
}

pub fn map_ordered_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(&f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential() {
        let items: Vec<u64> = (0..1000).collect();
        let f = |x: &u64| crate::rng::splitmix64(*x);
        assert_eq!(map_ordered(&items, f), map_ordered_seq(&items, f));
    }
}
