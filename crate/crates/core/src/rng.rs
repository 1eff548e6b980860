//! Deterministic, counter-based random number streams.
//!
//! Every source of randomness in a simulation is a ChaCha8 stream derived
//! from the experiment seed plus a small tuple of identifiers (purpose tag,
//! client id, round). Streams are independent of scheduling order, so
//! client work can run in parallel without perturbing results.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// Purpose tags keep unrelated streams apart even when their numeric ids
/// collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    DataGen,
    Partition,
    ModelInit,
    ClientTrain,
    ClientSampling,
    Attack,
    Defense,
    Probe,
}

impl StreamKind {
    fn tag(self) -> u64 {
        match self {
            StreamKind::DataGen => 1,
            StreamKind::Partition => 2,
            StreamKind::ModelInit => 3,
            StreamKind::ClientTrain => 4,
            StreamKind::ClientSampling => 5,
            StreamKind::Attack => 6,
            StreamKind::Defense => 7,
            StreamKind::Probe => 8,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives an independent ChaCha8 stream from `(seed, kind, a, b)`.
///
/// `a`/`b` are caller-defined counters, typically `(client_id, round)`.
pub fn stream(seed: u64, kind: StreamKind, a: u64, b: u64) -> ChaCha8Rng {
    let mut state = splitmix64(seed ^ 0xA076_1D64_78BD_642F);
    state = splitmix64(state ^ kind.tag());
    state = splitmix64(state ^ a);
    state = splitmix64(state ^ b);
    let mut bytes = [0u8; 32];
    let mut x = state;
    for chunk in bytes.chunks_exact_mut(8) {
        x = splitmix64(x);
        chunk.copy_from_slice(&x.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}
