//! Order-preserving map over a slice, parallel when the `parallel` feature is
//! enabled and the caller asks for it.
//!
//! Every element is computed independently and collected in input order, so
//! the result is bitwise identical between the parallel and sequential paths.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Strategy for batch map operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Threading {
    Sequential,
    /// Falls back to sequential when built without the `parallel` feature.
    Parallel,
}

impl Default for Threading {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Threading::Parallel
        } else {
            Threading::Sequential
        }
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map_ordered<T: Sync, U: Send>(
    threading: Threading,
    items: &[T],
    f: impl Fn(&T) -> U + Sync + Send,
) -> Vec<U> {
    match threading {
        Threading::Sequential => items.iter().map(f).collect(),
        #[cfg(feature = "parallel")]
        Threading::Parallel => items.par_iter().map(f).collect(),
        #[cfg(not(feature = "parallel"))]
        Threading::Parallel => items.iter().map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64 * 0.37).collect();
        let f = |x: &f64| (x.sin() * x.cos()).exp() + x.sqrt();
        let seq = map_ordered(Threading::Sequential, &xs, f);
        let par = map_ordered(Threading::Parallel, &xs, f);
        assert_eq!(seq.len(), par.len());
        for (a, b) in seq.iter().zip(par.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
