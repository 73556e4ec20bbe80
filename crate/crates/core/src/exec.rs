//! Fixed-partition parallel helpers.
//!
//! Work is always split into blocks of [`BLOCK`] voxels regardless of the
//! number of worker threads, and block partial sums are folded sequentially
//! in block order. Results are therefore bit-identical for every thread
//! count; a one-thread rayon pool is the sequential reference mode.

use std::ops::Range;

use rayon::prelude::*;

pub const BLOCK: usize = 4096;

fn block_ranges(n: usize) -> impl IndexedParallelIterator<Item = Range<usize>> {
    let blocks = n.div_ceil(BLOCK);
    (0..blocks)
        .into_par_iter()
        .map(move |b| b * BLOCK..((b + 1) * BLOCK).min(n))
}

/// Sums `f` over fixed voxel blocks of `0..n`.
pub fn sum_blocks<F>(n: usize, f: F) -> f64
where
    F: Fn(Range<usize>) -> f64 + Sync + Send,
{
    let partials: Vec<f64> = block_ranges(n).map(f).collect();
    partials.into_iter().sum()
}

/// Like [`sum_blocks`] for an array of `K` accumulators.
pub fn sum_blocks_array<const K: usize, F>(n: usize, f: F) -> [f64; K]
where
    F: Fn(Range<usize>) -> [f64; K] + Sync + Send,
{
    let partials: Vec<[f64; K]> = block_ranges(n).map(f).collect();
    let mut out = [0.0; K];
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

/// Splits a channel-major buffer (`channels` slices of `voxels` values) into
/// per-block views: element `b` holds the `b`-th block of every channel.
pub fn channel_blocks_mut<T>(data: &mut [T], voxels: usize) -> Vec<(usize, Vec<&mut [T]>)> {
    let blocks = voxels.div_ceil(BLOCK);
    let mut per_block: Vec<Vec<&mut [T]>> = (0..blocks).map(|_| Vec::new()).collect();
    for channel in data.chunks_mut(voxels) {
        for (b, chunk) in channel.chunks_mut(BLOCK).enumerate() {
            per_block[b].push(chunk);
        }
    }
    per_block
        .into_iter()
        .enumerate()
        .map(|(b, v)| (b * BLOCK, v))
        .collect()
}

/// Runs `f(start, channel_slices)` over every voxel block in parallel.
pub fn for_each_block_mut<F>(data: &mut [f64], voxels: usize, f: F)
where
    F: Fn(usize, &mut [&mut [f64]]) + Sync + Send,
{
    channel_blocks_mut(data, voxels)
        .into_par_iter()
        .for_each(|(start, mut chans)| f(start, &mut chans));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sums_independent_of_thread_count() {
        let n = 3 * BLOCK + 17;
        let f = |r: Range<usize>| r.map(|i| (i as f64).sin() * 1e-3).sum::<f64>();
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| sum_blocks(n, f));
        let four = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| sum_blocks(n, f));
        assert_eq!(one.to_bits(), four.to_bits());
    }

    #[test]
    fn channel_blocks_cover_buffer() {
        let voxels = BLOCK + 5;
        let mut data = vec![0.0; 3 * voxels];
        for_each_block_mut(&mut data, voxels, |start, chans| {
            for (c, ch) in chans.iter_mut().enumerate() {
                for (i, v) in ch.iter_mut().enumerate() {
                    *v = (c * voxels + start + i) as f64;
                }
            }
        });
        for (i, v) in data.iter().enumerate() {
            assert_eq!(*v, i as f64);
        }
    }
}
