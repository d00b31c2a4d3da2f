//! Named random substreams.
//!
//! Every run derives all of its randomness from one seed. Each consumer gets
//! its own ChaCha stream so that, e.g., changing the sampler never perturbs
//! the training data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    Init,
    Training,
    Sampling,
    Eval,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Init => 2,
            Stream::Training => 3,
            Stream::Sampling => 4,
            Stream::Eval => 5,
        }
    }
}

/// The root generator for `stream` under `seed`.
pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    keyed(seed, stream, 0)
}

/// A generator keyed by `(seed, stream, key)`; used for per-step sampler
/// noise so that different strategies see common random numbers.
pub fn keyed(seed: u64, stream: Stream, key: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream.id() << 48) ^ key);
    rng
}

pub fn standard_normal_vec<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
