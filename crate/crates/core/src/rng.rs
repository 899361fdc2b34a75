//! Deterministic RNG stream derivation.
//!
//! Every randomized stage draws from its own ChaCha stream derived from
//! `(seed, tag, index)`, so results are reproducible and independent of
//! thread count or the order in which stages run.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Stage tags. Each tag owns a disjoint family of streams.
#[derive(Debug, Clone, Copy)]
pub enum Stage {
    DictInit,
    LambdaBatch,
    WindowBatch,
    Activations,
    Noise,
    Artifacts,
    TruthDict,
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::DictInit => 1,
            Stage::LambdaBatch => 2,
            Stage::WindowBatch => 3,
            Stage::Activations => 4,
            Stage::Noise => 5,
            Stage::Artifacts => 6,
            Stage::TruthDict => 7,
        }
    }
}

/// RNG for `(seed, stage, index)`. `index` distinguishes repeated uses of a
/// stage (iteration number, signal number).
pub fn stream(seed: u64, stage: Stage, index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream((stage.tag() << 48) ^ index);
    rng
}
