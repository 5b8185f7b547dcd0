//! Deterministic data-parallel helpers.
//!
//! All batch work in this crate runs through these functions. Inputs are split
//! into chunks whose boundaries depend only on the input length, partial
//! results are collected in chunk order, and any floating-point reduction is
//! folded sequentially over that order. The `parallel` feature (default)
//! dispatches chunks on the rayon pool; without it everything runs on the
//! calling thread. Either way the output is bit-identical, which the
//! `*_seq` twins exist to demonstrate (and to give the bench suite a
//! sequential baseline).

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Number of chunks used for gradient-sized partial results.
///
/// Fixed (not derived from the thread count) so results do not depend on the
/// machine the run happens on.
pub const GRAD_CHUNKS: usize = 8;

/// Split `items` into `n_chunks` nearly equal contiguous chunks and map each,
/// returning results in chunk order.
pub fn map_chunks<T, U, F>(items: &[T], n_chunks: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&[T]) -> U + Sync + Send,
{
    let bounds = chunk_bounds(items.len(), n_chunks);
    #[cfg(feature = "parallel")]
    {
        bounds
            .par_iter()
            .map(|&(lo, hi)| f(&items[lo..hi]))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        bounds.iter().map(|&(lo, hi)| f(&items[lo..hi])).collect()
    }
}

/// Sequential twin of [`map_chunks`]; same chunk boundaries, same fold order.
pub fn map_chunks_seq<T, U, F>(items: &[T], n_chunks: usize, f: F) -> Vec<U>
where
    F: Fn(&[T]) -> U,
{
    chunk_bounds(items.len(), n_chunks)
        .iter()
        .map(|&(lo, hi)| f(&items[lo..hi]))
        .collect()
}

/// Map `0..n` to values, in index order.
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
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

/// Sequential twin of [`map_indexed`].
pub fn map_indexed_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

fn chunk_bounds(len: usize, n_chunks: usize) -> Vec<(usize, usize)> {
    let n_chunks = n_chunks.max(1).min(len.max(1));
    let base = len / n_chunks;
    let extra = len % n_chunks;
    let mut bounds = Vec::with_capacity(n_chunks);
    let mut start = 0;
    for i in 0..n_chunks {
        let size = base + usize::from(i < extra);
        bounds.push((start, start + size));
        start += size;
    }
    bounds
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_bounds_cover_input_exactly() {
        for len in [0usize, 1, 7, 8, 9, 100] {
            for n in [1usize, 3, 8] {
                let b = chunk_bounds(len, n);
                assert_eq!(b.first().map(|&(lo, _)| lo).unwrap_or(0), 0);
                assert_eq!(b.last().map(|&(_, hi)| hi).unwrap_or(0), len);
                for w in b.windows(2) {
                    assert_eq!(w[0].1, w[1].0);
                }
            }
        }
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let data: Vec<f64> = (0..1000).map(|i| (i as f64) * 0.25).collect();
        let par: Vec<f64> = map_chunks(&data, 8, |c| c.iter().sum::<f64>());
        let seq: Vec<f64> = map_chunks_seq(&data, 8, |c| c.iter().sum::<f64>());
        assert_eq!(par, seq);
        let pi: Vec<usize> = map_indexed(100, |i| i * i);
        let si: Vec<usize> = map_indexed_seq(100, |i| i * i);
        assert_eq!(pi, si);
    }
}
