use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purposes that get independent random streams from one run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Rollout = 2,
    Shuffle = 3,
    Pretrain = 4,
    Eval = 5,
    Conditions = 6,
    Oracle = 7,
    Data = 8,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for `(seed, purpose, indices...)`; the same tuple always yields
/// the same stream, regardless of what else was drawn before.
pub fn stream_rng(seed: u64, purpose: Stream, indices: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed ^ splitmix(purpose as u64));
    for &i in indices {
        h = splitmix(h ^ splitmix(i.wrapping_add(0x1234_5678)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Seeds a batch of rollouts: trajectory `i` draws from
/// `(seed, stream, index, i)` regardless of batching.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RolloutKey {
    pub seed: u64,
    pub stream: Stream,
    pub index: u64,
}

impl RolloutKey {
    /// Training rollouts of `epoch`.
    pub fn train(seed: u64, epoch: u64) -> Self {
        RolloutKey { seed, stream: Stream::Rollout, index: epoch }
    }

    /// Evaluation draws, disjoint from every training stream.
    pub fn eval(seed: u64, index: u64) -> Self {
        RolloutKey { seed, stream: Stream::Eval, index }
    }

    pub fn trajectory_rng(&self, i: usize) -> ChaCha8Rng {
        stream_rng(self.seed, self.stream, &[self.index, i as u64])
    }
}
