//! Reproducible random streams.
//!
//! Each stream is a ChaCha8 generator keyed by a 64-bit seed and positioned
//! on its own ChaCha stream number, derived from a `(run, agent, purpose)`
//! triple. ChaCha8 output is specified independently of platform and word
//! size, so a given `(seed, StreamId)` yields the same draws everywhere.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// What a stream is used for; part of the stream identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u16)]
pub enum Purpose {
    Environment = 0,
    Action = 1,
    Exploration = 2,
    Initialization = 3,
    Sampling = 4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamId {
    pub run: u32,
    pub agent: u16,
    pub purpose: Purpose,
}

impl StreamId {
    pub fn new(run: u32, agent: u16, purpose: Purpose) -> Self {
        Self { run, agent, purpose }
    }

    /// Packs the triple into a ChaCha stream number: run in the high 32 bits,
    /// then agent, then purpose.
    pub fn stream_number(self) -> u64 {
        (u64::from(self.run) << 32) | (u64::from(self.agent) << 16) | self.purpose as u64
    }
}

#[derive(Clone, Debug)]
pub struct RngStream {
    id: StreamId,
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, id: StreamId) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id.stream_number());
        Self { id, seed, rng }
    }

    pub fn id(&self) -> StreamId {
        self.id
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Inverse-CDF draw from non-negative `weights` summing to one. Rounding
    /// slack at the top end lands on the last index with positive weight.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let u = self.uniform();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                acc += w;
                last = i;
                if u < acc {
                    return i;
                }
            }
        }
        last
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_ids_give_identical_sequences() {
        let id = StreamId::new(3, 1, Purpose::Action);
        let mut a = RngStream::new(42, id);
        let mut b = RngStream::new(42, id);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn distinct_streams_diverge() {
        let mut a = RngStream::new(42, StreamId::new(0, 0, Purpose::Action));
        let mut b = RngStream::new(42, StreamId::new(0, 1, Purpose::Action));
        let mut c = RngStream::new(42, StreamId::new(0, 0, Purpose::Environment));
        let xa: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..4).map(|_| c.next_u64()).collect();
        assert_ne!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn stream_output_is_pinned() {
        // Frozen first draws; a change here breaks reproducibility of every
        // recorded run.
        let mut s = RngStream::new(7, StreamId::new(1, 2, Purpose::Environment));
        let first: Vec<u64> = (0..3).map(|_| s.next_u64()).collect();
        let mut again = RngStream::new(7, StreamId::new(1, 2, Purpose::Environment));
        assert_eq!(first, (0..3).map(|_| again.next_u64()).collect::<Vec<_>>());
        assert_eq!(first, PINNED_DRAWS);
    }

    const PINNED_DRAWS: [u64; 3] = [17558013887606754912, 3759908910912615747, 10291249007323179669];

    #[test]
    fn categorical_respects_zero_weights() {
        let mut s = RngStream::new(1, StreamId::new(0, 0, Purpose::Sampling));
        for _ in 0..1000 {
            let k = s.categorical(&[0.0, 0.5, 0.0, 0.5, 0.0]);
            assert!(k == 1 || k == 3);
        }
    }
}
