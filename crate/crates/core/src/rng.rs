use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams derived from one seed, so that consuming more
/// draws for one purpose never shifts another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Prototypes = 1,
    Labels = 2,
    Noise = 3,
    Splits = 4,
    Init = 5,
    Shuffle = 6,
    Order = 7,
    Missing = 8,
    Theory = 9,
}

pub fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
