use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent generator for `(seed, stream)`. Trials and samples each get
/// their own stream so results do not depend on execution order.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Packs two indices into one stream id.
pub fn stream_id(major: usize, minor: usize) -> u64 {
    ((major as u64) << 32) | minor as u64
}
