//! Data-parallel helpers. With the `parallel` feature (default) the loops fan
//! out over rayon; without it they run sequentially. Work is partitioned into
//! fixed-size chunks so results are bit-identical for any thread count.

/// Applies `f` to fixed-size mutable chunks of `out`. `f` receives the chunk
/// start index and the chunk itself.
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i * chunk, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i * chunk, c));
    }
}

/// Sequential twin of [`for_each_chunk_mut`]; kept unconditionally so benches
/// can compare both code paths in one build.
pub fn for_each_chunk_mut_seq<T, F>(out: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    assert!(chunk > 0);
    out.chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i * chunk, c));
}

/// Maps `f` over indices `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential twin of [`map_indexed`].
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
