//! Seeded, counter-based random streams.
//!
//! Every `(domain, point, class)` triple maps to its own ChaCha8 stream, so
//! results never depend on the order in which points are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// The generator handed to samplers and score oracles.
pub type StreamRng = ChaCha8Rng;

/// Class slot used for streams shared by all classes of a point.
pub const ALL_CLASSES: u32 = u32::MAX;

/// Named stream families, kept apart so that e.g. attack search never
/// consumes randomness meant for certification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    Calibration,
    Test,
    AttackedTest,
    Attack,
    Poison,
    Data,
    Custom(u32),
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::Calibration => 1,
            Domain::Test => 2,
            Domain::AttackedTest => 3,
            Domain::Attack => 4,
            Domain::Poison => 5,
            Domain::Data => 6,
            Domain::Custom(c) => 0x1_0000_0000 | u64::from(c),
        }
    }
}

/// Root of a family of independent streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStreams {
    seed: u64,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(self) -> u64 {
        self.seed
    }

    /// Derives a child family, e.g. one per trial.
    pub fn child(self, index: u64) -> Self {
        Self::new(splitmix64(self.seed ^ splitmix64(index.wrapping_add(0x5eed))))
    }

    pub fn stream(self, domain: Domain, point: u64, class: u32) -> StreamRng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&domain.tag().to_le_bytes());
        key[16..24].copy_from_slice(&splitmix64(point).to_le_bytes());
        key[24..28].copy_from_slice(&class.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(point);
        rng
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
