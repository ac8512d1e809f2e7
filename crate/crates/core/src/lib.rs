//! Terrain traversability cost learning from demonstrations.
//!
//! A reward network maps terrain features and an IMU window to path and
//! goal reward maps; maximum-entropy inverse RL (MEDIRL) fits it to
//! demonstrated trajectories, and an energy-ranked pairwise loss
//! (T-MEDIRL) lets the learned reward improve on suboptimal demonstrators.
//! The traversability cost map is the negated path reward.

pub mod cli_io;
pub mod field;
pub mod grid_mdp;
pub mod irl_solver;
pub mod ranking;
pub mod reward_model;
pub mod metrics;
pub mod sample;
pub mod synth;
pub mod trainer;

pub use field::{Cell, Field};
pub use grid_mdp::{Action, GridMdp, GridSpec, StateId, Step, Trajectory};
pub use reward_model::{FeatureStack, ImuWindow, ModelConfig, ModelKind, RewardMaps, RewardNet};
