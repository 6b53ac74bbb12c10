//! Reductions whose floating-point result does not depend on the number of
//! worker threads.
//!
//! Work is split into fixed-size chunks (independent of the thread pool), each
//! chunk is reduced sequentially, and the chunk partials are combined along a
//! fixed pairwise tree.

use rayon::prelude::*;

/// Particles per work item in every parallel reduction.
pub const CHUNK: usize = 256;

const LEAF: usize = 32;

/// Pairwise (cascade) summation with a fixed split order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Combine `parts` along a balanced binary tree, left to right.
pub fn tree_combine<T, C>(mut parts: Vec<T>, combine: &C) -> Option<T>
where
    C: Fn(T, T) -> T,
{
    if parts.is_empty() {
        return None;
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, b)),
                None => next.push(a),
            }
        }
        parts = next;
    }
    parts.pop()
}

/// Map fixed chunks of `0..n` in parallel and combine the partials along a
/// fixed tree. `map` receives the half-open index range of its chunk.
pub fn chunked_reduce<T, M, C>(n: usize, map: M, combine: C) -> Option<T>
where
    T: Send,
    M: Fn(std::ops::Range<usize>) -> T + Sync + Send,
    C: Fn(T, T) -> T,
{
    let n_chunks = n.div_ceil(CHUNK);
    let parts: Vec<T> = (0..n_chunks)
        .into_par_iter()
        .map(|c| map(c * CHUNK..((c + 1) * CHUNK).min(n)))
        .collect();
    tree_combine(parts, &combine)
}

/// Element-wise vector sum for use as a `combine` step.
pub fn add_vecs(mut a: Vec<f64>, b: Vec<f64>) -> Vec<f64> {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
    a
}

/// Maximum that propagates NaN, so a diverging run cannot hide behind `max`.
pub fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}
