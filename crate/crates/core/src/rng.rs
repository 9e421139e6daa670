//! Seeded random number streams.
//!
//! All randomness in the crate flows through ChaCha8 generators so that runs
//! are reproducible across platforms and releases. A run's seed is split into
//! independent named streams; this keeps unrelated consumers from perturbing
//! each other. For example, whether a distillation variant samples task
//! groups has no effect on the data-shuffling stream, which is what makes a
//! zero-weight distillation run bit-identical to a plain fine-tuning run.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used everywhere randomness is needed.
pub type RunRng = ChaCha8Rng;

/// Independent sub-streams of a single run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Parameter initialization (head expansion, encoder init).
    Init,
    /// Per-epoch shuffling and replay sampling.
    Data,
    /// Task-group sampling for the random distillation variant.
    Group,
    /// Perturbation draws for the flatness probe.
    Perturb,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 0,
            Stream::Data => 1,
            Stream::Group => 2,
            Stream::Perturb => 3,
        }
    }
}

/// A generator for one named stream of `seed`.
pub fn stream_rng(seed: u64, stream: Stream) -> RunRng {
    let mut rng = RunRng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_independent() {
        let mut a = stream_rng(7, Stream::Data);
        let mut b = stream_rng(7, Stream::Group);
        let xs: Vec<u64> = (0..8).map(|_| a.gen()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.gen()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn same_seed_same_stream_reproduces() {
        let mut a = stream_rng(42, Stream::Init);
        let mut b = stream_rng(42, Stream::Init);
        let xs: Vec<u64> = (0..8).map(|_| a.gen()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.gen()).collect();
        assert_eq!(xs, ys);
    }
}
