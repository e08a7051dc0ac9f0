//! Named random substreams derived from one root seed.
//!
//! Every consumer of randomness (data generation, initialization, batch
//! shuffling, augmentation, bootstrap) asks for its own stream by name and
//! index, so changing how much randomness one component draws never shifts
//! another component's numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    Init,
    Shuffle,
    Augment,
    Balance,
    Split,
    Bootstrap,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Data => 0x6461_7461,
            Stream::Init => 0x696e_6974,
            Stream::Shuffle => 0x7368_7566,
            Stream::Augment => 0x6175_676d,
            Stream::Balance => 0x6261_6c61,
            Stream::Split => 0x7370_6c69,
            Stream::Bootstrap => 0x626f_6f74,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for stream `stream` at position `path` under `root`.
pub fn derive_seed(root: u64, stream: Stream, path: &[u64]) -> u64 {
    let mut h = splitmix64(root ^ splitmix64(stream.tag()));
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

pub fn substream(root: u64, stream: Stream, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(root, stream, path))
}
