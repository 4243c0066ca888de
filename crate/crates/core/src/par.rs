//! Row-parallel loops.
//!
//! Every body writes only its own row of the output and reads shared
//! inputs, so results do not depend on how rows are distributed.

use rayon::prelude::*;

/// Grids smaller than this run on the calling thread.
const PAR_MIN_PIXELS: usize = 1 << 14;

pub(crate) fn rows_mut<T, F>(out: &mut [T], width: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if out.len() >= PAR_MIN_PIXELS {
        out.par_chunks_mut(width)
            .enumerate()
            .for_each(|(y, row)| f(y, row));
    } else {
        out.chunks_mut(width).enumerate().for_each(|(y, row)| f(y, row));
    }
}

/// Like [`rows_mut`] for two outputs of the same shape.
pub(crate) fn rows2_mut<A, B, F>(a: &mut [A], b: &mut [B], width: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync + Send,
{
    if a.len() >= PAR_MIN_PIXELS {
        a.par_chunks_mut(width)
            .zip(b.par_chunks_mut(width))
            .enumerate()
            .for_each(|(y, (ra, rb))| f(y, ra, rb));
    } else {
        a.chunks_mut(width)
            .zip(b.chunks_mut(width))
            .enumerate()
            .for_each(|(y, (ra, rb))| f(y, ra, rb));
    }
}

/// Like [`rows_mut`] for three outputs of the same shape.
pub(crate) fn rows3_mut<A, B, C, F>(a: &mut [A], b: &mut [B], c: &mut [C], width: usize, f: F)
where
    A: Send,
    B: Send,
    C: Send,
    F: Fn(usize, &mut [A], &mut [B], &mut [C]) + Sync + Send,
{
    if a.len() >= PAR_MIN_PIXELS {
        a.par_chunks_mut(width)
            .zip(b.par_chunks_mut(width))
            .zip(c.par_chunks_mut(width))
            .enumerate()
            .for_each(|(y, ((ra, rb), rc))| f(y, ra, rb, rc));
    } else {
        a.chunks_mut(width)
            .zip(b.chunks_mut(width))
            .zip(c.chunks_mut(width))
            .enumerate()
            .for_each(|(y, ((ra, rb), rc))| f(y, ra, rb, rc));
    }
}
