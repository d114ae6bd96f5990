//! Data-parallel helpers.
//!
//! With the `parallel` feature these dispatch onto rayon; without it they run
//! the same closures sequentially, in index order. Every helper assigns work
//! by index, so results never depend on scheduling.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static DETERMINISTIC: AtomicBool = AtomicBool::new(false);

/// Force fixed partitioning and reduction order in kernels whose tiling
/// otherwise adapts to the worker count.
pub fn set_deterministic(on: bool) {
    DETERMINISTIC.store(on, Ordering::SeqCst);
}

pub fn is_deterministic() -> bool {
    DETERMINISTIC.load(Ordering::SeqCst)
}

/// Number of workers kernels should plan for.
pub fn num_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Run `f(chunk_index, chunk)` over consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Like [`for_each_chunk_mut`] but over two buffers chunked in lockstep.
pub fn for_each_chunk2_mut<A, B, F>(a: &mut [A], ca: usize, b: &mut [B], cb: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Send + Sync,
{
    let (ca, cb) = (ca.max(1), cb.max(1));
    #[cfg(feature = "parallel")]
    a.par_chunks_mut(ca)
        .zip(b.par_chunks_mut(cb))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
    #[cfg(not(feature = "parallel"))]
    a.chunks_mut(ca)
        .zip(b.chunks_mut(cb))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
}

/// Evaluate `f` for every index in `0..n`, collecting results in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
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

/// Elementwise map into a fresh vector. Small inputs stay on the caller.
pub fn map_slice<T, R, F>(src: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send + Copy + Default,
    F: Fn(&T) -> R + Send + Sync,
{
    let mut out = vec![R::default(); src.len()];
    zip_apply(&mut out, src, |o, s| *o = f(s));
    out
}

#[cfg(feature = "parallel")]
const ELEMWISE_GRAIN: usize = 1 << 14;

/// `f(out[i], src[i])` for all `i`.
pub fn zip_apply<T, S, F>(out: &mut [T], src: &[S], f: F)
where
    T: Send,
    S: Sync,
    F: Fn(&mut T, &S) + Send + Sync,
{
    debug_assert_eq!(out.len(), src.len());
    #[cfg(feature = "parallel")]
    if out.len() >= 2 * ELEMWISE_GRAIN {
        out.par_chunks_mut(ELEMWISE_GRAIN)
            .zip(src.par_chunks(ELEMWISE_GRAIN))
            .for_each(|(o, s)| o.iter_mut().zip(s).for_each(|(o, s)| f(o, s)));
        return;
    }
    out.iter_mut().zip(src).for_each(|(o, s)| f(o, s));
}
