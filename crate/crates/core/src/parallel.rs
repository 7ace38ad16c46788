//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the hot loops fan out over rayon; without it
//! the same per-chunk code runs on one thread. Chunks are always processed
//! with identical per-element arithmetic order, so results are bit-identical
//! in both modes and for any thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

// Rayon's spawn/join overhead only pays off once a region does real work.
// Crossover measured with the `throughput` bench on the desk-scale shapes.
#[cfg(feature = "parallel")]
const PARALLEL_MIN_ELEMS: usize = 16_384;

/// Applies `f(chunk_index, chunk)` over equally sized mutable chunks,
/// fanning out when the output itself is large enough.
pub(crate) fn for_each_chunk_mut<F>(data: &mut [f32], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync,
{
    let go_par = data.len() >= PAR_ELEMS_FALLBACK;
    for_each_chunk_mut_when(data, chunk, go_par, f);
}

#[cfg(feature = "parallel")]
const PAR_ELEMS_FALLBACK: usize = 16_384;
#[cfg(not(feature = "parallel"))]
const PAR_ELEMS_FALLBACK: usize = usize::MAX;

/// Like [`for_each_chunk_mut`] but the caller supplies the parallelize
/// decision, e.g. from the op's arithmetic work rather than its output
/// size (a matmul backward can have a tiny output and heavy work).
pub(crate) fn for_each_chunk_mut_when<F>(data: &mut [f32], chunk: usize, go_par: bool, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync,
{
    debug_assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    if go_par && data.len() > chunk {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = go_par;
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Arithmetic-work threshold above which a kernel is worth splitting.
pub(crate) const PAR_MIN_WORK: usize = 1 << 19;

/// Maps `f` over `0..n` collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}
