//! Multi-pass blind restoration of fundus images.
//!
//! An unpaired CycleGAN core translates low-quality images toward the
//! high-quality domain. Training proceeds in passes: each pass trains on the
//! previous pass's restored outputs, starts from the previous pass's best
//! checkpoint, and selects its own best epoch by the validation adversarial
//! loss of the low-to-high direction. Restored datasets, checkpoints, and a
//! downstream classifier harness quantify the per-pass benefit.

pub mod config;
pub mod cycle_trainer;
pub mod data_pipeline;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod networks;
pub mod ptl_orchestrator;

pub use config::{InitMode, InitSpec, LossWeights, NetworkConfig, RunConfig, TrainingConfig};
pub use error::{Error, Result};
