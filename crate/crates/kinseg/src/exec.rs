//! Parallel/sequential execution bridge.
//!
//! Hot loops go through these helpers so the crate builds with or without
//! the `parallel` feature. Every parallel path writes disjoint output slots
//! (map by index, no floating-point reductions across threads), so parallel
//! and sequential runs produce bit-identical results.

/// Number of worker threads rayon will use, or 1 without the feature.
pub fn worker_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Configure the global thread pool from the `KINSEG_THREADS` environment
/// variable. Call once at process start; later calls are ignored by rayon.
pub fn init_threads_from_env() {
    #[cfg(feature = "parallel")]
    {
        if let Ok(v) = std::env::var("KINSEG_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    }
}

/// Map `0..n` through `f`, collecting results in index order.
pub fn par_map_indexed<T, F>(n: usize, f: F) -> Vec<T>
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

/// Sequential reference for [`par_map_indexed`]; kept public for benches.
pub fn seq_map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Apply `f(i, &mut out[i])` for every element of `out`.
pub fn par_for_each_indexed<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_iter_mut().enumerate().for_each(|(i, x)| f(i, x));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.iter_mut().enumerate().for_each(|(i, x)| f(i, x));
    }
}

/// Sequential reference for [`par_for_each_indexed`]; kept public for benches.
pub fn seq_for_each_indexed<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    out.iter_mut().enumerate().for_each(|(i, x)| f(i, x));
}

/// Apply `f(chunk_index, chunk)` over disjoint chunks of `out`.
pub fn par_for_each_chunk<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_matches_seq() {
        let a = par_map_indexed(1000, |i| (i as f64).sqrt());
        let b = seq_map_indexed(1000, |i| (i as f64).sqrt());
        assert_eq!(a, b);
    }

    #[test]
    fn for_each_matches() {
        let mut a = vec![0.0_f64; 257];
        let mut b = vec![0.0_f64; 257];
        par_for_each_indexed(&mut a, |i, x| *x = (i as f64).sin());
        seq_for_each_indexed(&mut b, |i, x| *x = (i as f64).sin());
        assert_eq!(a, b);
    }
}
