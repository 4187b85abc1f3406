//! Every random draw in the toolkit comes from one seed split into named
//! ChaCha streams, so stages can be re-run in isolation and still replay.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(name.as_bytes());
    let stream = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
