//! Seeded random streams.
//!
//! Every source of randomness in a run is derived from one root seed. Each
//! consumer gets its own ChaCha8 stream, selected by a fixed stream id, so
//! adding draws to one consumer never shifts the draws seen by another.
//!
//! | stream          | id | consumer                                   |
//! |-----------------|----|--------------------------------------------|
//! | `Env`           | 1  | environment reset seeds                    |
//! | `PolicyInit`    | 2  | network initialization                     |
//! | `Rollout`       | 3  | stochastic actions during data collection  |
//! | `Minibatch`     | 4  | replay sampling                            |
//! | `TargetSampling`| 5  | commanded-target draws during collection   |
//! | `Eval`          | 6  | evaluation and diagnostic episodes         |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Env,
    PolicyInit,
    Rollout,
    Minibatch,
    TargetSampling,
    Eval,
}

impl Stream {
    pub fn id(self) -> u64 {
        match self {
            Stream::Env => 1,
            Stream::PolicyInit => 2,
            Stream::Rollout => 3,
            Stream::Minibatch => 4,
            Stream::TargetSampling => 5,
            Stream::Eval => 6,
        }
    }
}

/// Opens the named sub-stream of `root_seed`.
pub fn stream(root_seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(which.id());
    rng
}

/// A plain seeded generator, for tests and one-off consumers.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
