//! Data-parallel map with a sequential fallback.
//!
//! Without the `parallel` feature, [`Exec::Parallel`] runs sequentially.
//! Results always come back in input order, so reductions over them are
//! deterministic either way.

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// `(0..n).map(f)` collected in order.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    pub fn map_items<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        self.map_range(items.len(), |i| f(&items[i]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree_and_keep_order() {
        let f = |i: usize| (i as f64).sqrt() * 3.0;
        let a = Exec::Sequential.map_range(1000, f);
        let b = Exec::Parallel.map_range(1000, f);
        assert_eq!(a, b);
        assert_eq!(a[4], 6.0);
    }
}
