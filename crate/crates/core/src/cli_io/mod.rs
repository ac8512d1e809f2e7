//! File formats, rendering, and the command implementations behind the
//! `trav` binary.

pub mod checkpoint;
pub mod commands;
pub mod manifest;
pub mod render;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use commands::CliError;
pub use manifest::{read_dataset, write_dataset, ManifestEntry};
pub use tensor::{Tensor, TensorData, TensorError};
