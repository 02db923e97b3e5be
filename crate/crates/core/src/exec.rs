//! Batch execution helpers, parallel when the `parallel` feature is on.
//!
//! Reductions always run over fixed-size chunks whose boundaries do not depend
//! on the thread count, and per-chunk results are merged in chunk order. The
//! same chunking is used by the sequential fallback, so a given input produces
//! bit-identical output regardless of feature flags or available cores.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Chunk length for deterministic reductions.
pub(crate) const CHUNK: usize = 256;

/// Map every element, preserving input order.
pub(crate) fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Fold fixed-size chunks independently, then merge partials in chunk order.
pub(crate) fn fold_chunks<T, A, Make, Fold, Merge>(
    items: &[T],
    make: Make,
    fold: Fold,
    merge: Merge,
) -> A
where
    T: Sync,
    A: Send,
    Make: Fn() -> A + Sync + Send,
    Fold: Fn(&mut A, &T) + Sync + Send,
    Merge: Fn(&mut A, A),
{
    let partials: Vec<A> = {
        #[cfg(feature = "parallel")]
        {
            items
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut acc = make();
                    for item in chunk {
                        fold(&mut acc, item);
                    }
                    acc
                })
                .collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            items
                .chunks(CHUNK)
                .map(|chunk| {
                    let mut acc = make();
                    for item in chunk {
                        fold(&mut acc, item);
                    }
                    acc
                })
                .collect()
        }
    };
    let mut out = make();
    for p in partials {
        merge(&mut out, p);
    }
    out
}
