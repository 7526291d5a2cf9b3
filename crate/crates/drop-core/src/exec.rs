//! Deterministic chunked execution.
//!
//! Batch losses, OOD sampling, and evaluation episodes are all data-parallel.
//! Work is split into fixed-size chunks and the per-chunk results are reduced
//! in chunk order, so the output is bit-identical whether the chunks run on
//! rayon (the `parallel` feature, on by default) or sequentially, and
//! regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Chunk size used by the training losses. Fixed so that chunk boundaries
/// (and therefore float summation order) never depend on the executor.
pub const DEFAULT_CHUNK: usize = 32;

/// Maps `f` over fixed-size chunks of `items`, preserving chunk order.
pub fn map_chunks<T, R, F>(items: &[T], chunk_size: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync,
{
    assert!(chunk_size > 0, "chunk_size must be positive");
    #[cfg(feature = "parallel")]
    {
        items.par_chunks(chunk_size).map(&f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.chunks(chunk_size).map(f).collect()
    }
}

/// Sequential twin of [`map_chunks`]; used by the benches to compare lanes.
pub fn map_chunks_seq<T, R, F>(items: &[T], chunk_size: usize, f: F) -> Vec<R>
where
    F: Fn(&[T]) -> R,
{
    assert!(chunk_size > 0, "chunk_size must be positive");
    items.chunks(chunk_size).map(f).collect()
}

/// Partial sums of a scalar loss and one gradient vector per network,
/// accumulated over a chunk of samples.
#[derive(Debug, Clone)]
pub struct LossAccum {
    pub loss_sum: f64,
    pub grads: Vec<Vec<f64>>,
    pub count: usize,
}

impl LossAccum {
    pub fn zeros(grad_lens: &[usize]) -> Self {
        Self {
            loss_sum: 0.0,
            grads: grad_lens.iter().map(|&n| vec![0.0; n]).collect(),
            count: 0,
        }
    }

    pub fn merge(mut self, other: &LossAccum) -> Self {
        self.loss_sum += other.loss_sum;
        self.count += other.count;
        for (acc, g) in self.grads.iter_mut().zip(&other.grads) {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        self
    }

    /// Mean loss and mean gradients over all accumulated samples.
    pub fn into_mean(mut self) -> (f64, Vec<Vec<f64>>) {
        let n = self.count.max(1) as f64;
        for g in &mut self.grads {
            for v in g.iter_mut() {
                *v /= n;
            }
        }
        (self.loss_sum / n, self.grads)
    }
}

/// Splits `base` into an independent stream seed for a tagged purpose.
/// splitmix64 finalizer; stable across platforms.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
