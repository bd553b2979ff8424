//! Seeding contract: every random quantity comes from a ChaCha8 stream keyed
//! by the master seed and a `(domain, index)` pair, so results never depend
//! on scheduling order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Conductivity = 1,
    Location = 2,
    Trial = 3,
}

pub fn substream(master_seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    debug_assert!(index < 1 << 48);
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(((domain as u64) << 48) | index);
    rng
}
