//! Training/evaluation samples shared by the generator, trainer and I/O.

use serde::{Deserialize, Serialize};

use crate::field::Field;
use crate::grid_mdp::Trajectory;
use crate::reward_model::{FeatureStack, ImuWindow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One demonstration with its sensor inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub features: FeatureStack,
    pub imu: ImuWindow,
    pub trajectory: Trajectory,
    /// Ground-truth traversability cost, available for synthetic data.
    pub gt_cost: Option<Field>,
    pub split: Split,
}

impl Sample {
    pub fn aec(&self) -> Option<f64> {
        self.trajectory.aec
    }
}

/// Samples carrying the given split tag.
pub fn split_of(samples: &[Sample], split: Split) -> Vec<&Sample> {
    samples.iter().filter(|s| s.split == split).collect()
}

/// SplitMix64 finalizer, used to derive independent per-item seeds.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)
        ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
