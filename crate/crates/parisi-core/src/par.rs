//! Deterministic parallel helpers.
//!
//! Parallel loops in this crate are always "map by index, reduce in index
//! order", so results are bit-identical for any worker count. Without the
//! `parallel` feature the same helpers run sequentially.

use alloc::vec::Vec;

/// Maps `f` over `0..n` and returns the results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T: Send>(n: usize, f: impl Fn(usize) -> T + Send + Sync) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T>(n: usize, f: impl Fn(usize) -> T) -> Vec<T> {
    (0..n).map(f).collect()
}

/// Fold over block results in block order after computing them in parallel.
pub fn fold_blocks<B: Send, Acc>(
    n_blocks: usize,
    make_block: impl Fn(usize) -> B + Send + Sync,
    init: Acc,
    mut fold: impl FnMut(Acc, B) -> Acc,
) -> Acc {
    let blocks = map_indexed(n_blocks, make_block);
    let mut acc = init;
    for b in blocks {
        acc = fold(acc, b);
    }
    acc
}
