//! Index-ordered map over `0..n`, parallel when the `parallel` feature is on.
//!
//! Results are always returned in index order, so any reduction performed by
//! the caller afterwards is independent of scheduling.

#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_indexed_sequential(n, f)
}

/// Always-sequential variant, used by benches and as the reference path.
pub fn map_indexed_sequential<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// True when the crate was built with rayon support.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential_order() {
        let a = map_indexed(1000, |i| i * i);
        let b = map_indexed_sequential(1000, |i| i * i);
        assert_eq!(a, b);
    }
}
