//! Chunked data-parallel helpers with a sequential fallback.
//!
//! All reductions run over fixed-size chunks whose partial results are folded
//! in index order, so sums are bitwise identical regardless of thread count
//! or whether the `parallel` feature is enabled. Loss traces and emitted
//! reports rely on this.

use std::ops::Range;

/// Fixed chunk length for deterministic reductions.
pub const CHUNK: usize = 8192;

fn chunk_ranges(len: usize) -> impl Iterator<Item = Range<usize>> {
    (0..len.div_ceil(CHUNK)).map(move |c| {
        let start = c * CHUNK;
        start..(start + CHUNK).min(len)
    })
}

/// Sum `f` over chunk ranges of `0..len`, folding partials in chunk order.
#[cfg(feature = "parallel")]
pub fn sum_chunked<F>(len: usize, f: F) -> f64
where
    F: Fn(Range<usize>) -> f64 + Sync + Send,
{
    use rayon::prelude::*;
    let partials: Vec<f64> = chunk_ranges(len).collect::<Vec<_>>().into_par_iter().map(f).collect();
    partials.into_iter().sum()
}

#[cfg(not(feature = "parallel"))]
pub fn sum_chunked<F>(len: usize, f: F) -> f64
where
    F: Fn(Range<usize>) -> f64 + Sync + Send,
{
    chunk_ranges(len).map(f).sum()
}

/// Run `f(chunk_start, chunk)` over disjoint chunks of `data`.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    use rayon::prelude::*;
    data.par_chunks_mut(CHUNK)
        .enumerate()
        .for_each(|(c, chunk)| f(c * CHUNK, chunk));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    for (c, chunk) in data.chunks_mut(CHUNK).enumerate() {
        f(c * CHUNK, chunk);
    }
}

/// Map each index of `0..len` into a fresh output vector.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..len).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..len).map(f).collect()
}
