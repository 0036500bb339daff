//! Seeded random streams.
//!
//! Every Monte-Carlo consumer takes a master seed plus a stream id, so that
//! per-cell or per-epoch draws do not depend on the order in which work is
//! scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
