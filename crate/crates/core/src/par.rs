//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) work fans out over the rayon global
//! pool; without it every helper runs sequentially. Work is always split into
//! fixed-size chunks that do not depend on the thread count, so results are
//! identical in both modes.

use ndarray::{s, Array2, ArrayView2, ArrayViewMut2};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Rows per task for the chunked matrix product.
pub const MATMUL_ROW_CHUNK: usize = 64;

/// Runs `f` with data-parallel helpers confined to one thread.
pub fn single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        static POOL: std::sync::OnceLock<rayon::ThreadPool> = std::sync::OnceLock::new();
        POOL.get_or_init(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(1)
                .build()
                .expect("single-thread pool")
        })
        .install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        f()
    }
}

/// Order-preserving map over a slice.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
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

/// Order-preserving map over `0..n`.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
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

/// Applies `f(chunk_index, chunk)` to consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
}

/// `a · b`, split over row blocks of `a`.
pub fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    matmul_acc(a, b, out.view_mut());
    out
}

/// `out += a · b`, split over row blocks of `a`.
pub fn matmul_acc(a: ArrayView2<f64>, b: ArrayView2<f64>, mut out: ArrayViewMut2<f64>) {
    assert_eq!(a.ncols(), b.nrows(), "matmul inner dimensions");
    assert_eq!(out.dim(), (a.nrows(), b.ncols()), "matmul output shape");
    let rows = a.nrows();
    if rows <= MATMUL_ROW_CHUNK {
        ndarray::linalg::general_mat_mul(1.0, &a, &b, 1.0, &mut out);
        return;
    }
    let blocks: Vec<(usize, usize)> = (0..rows)
        .step_by(MATMUL_ROW_CHUNK)
        .map(|r| (r, (r + MATMUL_ROW_CHUNK).min(rows)))
        .collect();
    let pieces: Vec<ArrayViewMut2<f64>> = {
        let mut rest = out.view_mut();
        let mut v = Vec::with_capacity(blocks.len());
        for &(lo, hi) in &blocks {
            let (head, tail) = rest.split_at(ndarray::Axis(0), hi - lo);
            v.push(head);
            rest = tail;
        }
        v
    };
    let work = |(&(lo, hi), mut piece): (&(usize, usize), ArrayViewMut2<f64>)| {
        let a_blk = a.slice(s![lo..hi, ..]);
        ndarray::linalg::general_mat_mul(1.0, &a_blk, &b, 1.0, &mut piece);
    };
    #[cfg(feature = "parallel")]
    {
        blocks.par_iter().zip(pieces.into_par_iter()).for_each(work);
    }
    #[cfg(not(feature = "parallel"))]
    {
        blocks.iter().zip(pieces).for_each(work);
    }
}

/// Number of worker threads in use (1 in sequential builds).
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn chunked_matmul_matches_plain_dot() {
        let a = Array::from_shape_fn((203, 17), |(i, j)| ((i * 31 + j * 7) % 13) as f64 - 6.0);
        let b = Array::from_shape_fn((17, 9), |(i, j)| ((i * 5 + j * 3) % 11) as f64 * 0.5);
        let got = matmul(a.view(), b.view());
        let want = a.dot(&b);
        assert_eq!(got, want);
    }

    #[test]
    fn map_preserves_order() {
        let v: Vec<usize> = (0..1000).collect();
        let out = map(&v, |x| x * 2);
        assert!(out.iter().enumerate().all(|(i, &x)| x == 2 * i));
        assert_eq!(map_range(5, |i| i + 1), vec![1, 2, 3, 4, 5]);
    }
}
