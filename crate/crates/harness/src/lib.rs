//! Commands behind the `mvacon` binary: training, gradient verification,
//! the attention complexity benchmark, visualizations and scene export.

pub mod bench;
pub mod error;
pub mod gradcheck;
pub mod output;
pub mod scene_gen;
pub mod train;
pub mod viz;

pub use error::{HarnessError, Result};

use mvacon_core::config::RunConfig;

/// Overrides both the scene and the initialization seed.
pub fn with_seed(mut cfg: RunConfig, seed: Option<u64>) -> RunConfig {
    if let Some(s) = seed {
        cfg.scene.seed = s;
        cfg.training.seed = s;
    }
    cfg
}
