//! Named random sub-streams derived from one root seed.
//!
//! Every consumer of randomness asks for its own stream so that enabling one
//! feature (say, teleportation) never shifts the draws seen by another (say,
//! PCGrad task shuffling).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    Init,
    Batches,
    PcGradShuffle,
    LoraInit,
    SphereSamples,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 0x6461_7461,
            Stream::Init => 0x696e_6974,
            Stream::Batches => 0x6261_7463,
            Stream::PcGradShuffle => 0x7063_6772,
            Stream::LoraInit => 0x6c6f_7261,
            Stream::SphereSamples => 0x7370_6872,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed for `(stream, index)` from `root`.
pub fn derive_seed(root: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ splitmix64(stream.id())) ^ splitmix64(index.wrapping_add(1)))
}

pub fn stream_rng(root: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stream, index))
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
