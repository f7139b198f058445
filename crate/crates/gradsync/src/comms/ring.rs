//! The ring AllReduce schedule: `world` chunks, `world - 1` reduce-scatter
//! steps followed by `world - 1` all-gather steps.
//!
//! At reduce-scatter step `s`, rank `r` sends chunk `(r - s) mod W` to rank
//! `r + 1` and accumulates the incoming chunk `(r - 1 - s) mod W` into its
//! local copy, so chunk `c` gathers contributions in ring order starting
//! from rank `c`. After the scatter, rank `r` owns the fully reduced chunk
//! `(r + 1) mod W`, divides it by `W` (the single division point, so every
//! rank ends bitwise identical), and the all-gather circulates the owned
//! chunks back around.

use std::ops::Range;

/// Splits `len` elements into `world` contiguous chunks whose sizes differ
/// by at most one, larger chunks first. Chunks may be empty when
/// `len < world`.
pub fn chunk_ranges(len: usize, world: usize) -> Vec<Range<usize>> {
    assert!(world > 0);
    let base = len / world;
    let rem = len % world;
    let mut ranges = Vec::with_capacity(world);
    let mut start = 0;
    for c in 0..world {
        let size = base + usize::from(c < rem);
        ranges.push(start..start + size);
        start += size;
    }
    ranges
}

fn modular(i: isize, w: usize) -> usize {
    i.rem_euclid(w as isize) as usize
}

/// Chunk index rank `r` transmits at reduce-scatter step `s`.
pub fn scatter_send_chunk(rank: usize, step: usize, world: usize) -> usize {
    modular(rank as isize - step as isize, world)
}

/// Chunk index rank `r` receives (from rank `r - 1`) at reduce-scatter step `s`.
pub fn scatter_recv_chunk(rank: usize, step: usize, world: usize) -> usize {
    modular(rank as isize - 1 - step as isize, world)
}

/// Chunk index rank `r` transmits at all-gather step `s`.
pub fn gather_send_chunk(rank: usize, step: usize, world: usize) -> usize {
    modular(rank as isize + 1 - step as isize, world)
}

/// Chunk index rank `r` receives at all-gather step `s`.
pub fn gather_recv_chunk(rank: usize, step: usize, world: usize) -> usize {
    modular(rank as isize - step as isize, world)
}

/// Runs the full ring schedule over every rank's payload and returns the
/// elementwise mean. All message exchanges of one step happen
/// simultaneously (snapshot semantics), exactly as the distributed
/// transports execute them, so results are bitwise identical to a real
/// ring run.
pub fn ring_allreduce_mean(inputs: &[Vec<f64>]) -> Vec<f64> {
    let world = inputs.len();
    assert!(world > 0);
    let len = inputs[0].len();
    debug_assert!(inputs.iter().all(|v| v.len() == len));
    if world == 1 {
        return inputs[0].clone();
    }
    let ranges = chunk_ranges(len, world);
    let mut working: Vec<Vec<f64>> = inputs.to_vec();

    // Reduce-scatter: accumulate chunks around the ring.
    for step in 0..world - 1 {
        let sent: Vec<Vec<f64>> = (0..world)
            .map(|r| working[r][ranges[scatter_send_chunk(r, step, world)].clone()].to_vec())
            .collect();
        for r in 0..world {
            let prev = modular(r as isize - 1, world);
            let chunk = scatter_recv_chunk(r, step, world);
            let range = ranges[chunk].clone();
            for (dst, src) in working[r][range].iter_mut().zip(&sent[prev]) {
                *dst += src;
            }
        }
    }

    // Owner divides once so the gathered copies are bitwise identical.
    for r in 0..world {
        let owned = ranges[modular(r as isize + 1, world)].clone();
        for v in &mut working[r][owned] {
            *v /= world as f64;
        }
    }

    // All-gather: circulate the reduced chunks.
    for step in 0..world - 1 {
        let sent: Vec<Vec<f64>> = (0..world)
            .map(|r| working[r][ranges[gather_send_chunk(r, step, world)].clone()].to_vec())
            .collect();
        for r in 0..world {
            let prev = modular(r as isize - 1, world);
            let chunk = gather_recv_chunk(r, step, world);
            let range = ranges[chunk].clone();
            working[r][range].copy_from_slice(&sent[prev]);
        }
    }

    debug_assert!(working.iter().all(|w| w == &working[0]));
    working.swap_remove(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_mean(inputs: &[Vec<f64>]) -> Vec<f64> {
        let world = inputs.len();
        let len = inputs[0].len();
        let mut out = vec![0.0; len];
        for i in 0..len {
            let mut sum = 0.0;
            for rank in inputs {
                sum += rank[i];
            }
            out[i] = sum / world as f64;
        }
        out
    }

    #[test]
    fn chunks_cover_everything_in_order() {
        for len in [0usize, 1, 7, 8, 9, 1024] {
            for world in 1..=8 {
                let ranges = chunk_ranges(len, world);
                assert_eq!(ranges.len(), world);
                assert_eq!(ranges[0].start, 0);
                assert_eq!(ranges[world - 1].end, len);
                for pair in ranges.windows(2) {
                    assert_eq!(pair[0].end, pair[1].start);
                    assert!(pair[0].len() >= pair[1].len());
                    assert!(pair[0].len() - pair[1].len() <= 1);
                }
            }
        }
    }

    #[test]
    fn identical_inputs_reduce_exactly() {
        let v = vec![1.5, -2.0, 3.25, 0.0, 9.0];
        let inputs = vec![v.clone(); 4];
        assert_eq!(ring_allreduce_mean(&inputs), v);
    }

    #[test]
    fn ring_matches_naive_for_random_payloads() {
        let mut rng = crate::tensor::Rng::new(17);
        for world in [2usize, 3, 4, 8] {
            for len in [1usize, 7, 1024] {
                let inputs: Vec<Vec<f64>> = (0..world)
                    .map(|_| (0..len).map(|_| rng.uniform(-5.0, 5.0)).collect())
                    .collect();
                let ring = ring_allreduce_mean(&inputs);
                let naive = naive_mean(&inputs);
                for (a, b) in ring.iter().zip(&naive) {
                    assert!((a - b).abs() < 1e-12, "world={world} len={len}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn short_payloads_with_empty_chunks_still_reduce() {
        let inputs = vec![vec![4.0], vec![8.0], vec![0.0]];
        let out = ring_allreduce_mean(&inputs);
        assert!((out[0] - 4.0).abs() < 1e-15);
    }
}
