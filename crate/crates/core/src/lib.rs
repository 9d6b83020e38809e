//! Reward-driven channel pruning.
//!
//! - [`arch`]: architecture templates, NEV encoding and analytic FLOPs/parameter counts
//! - [`reward`]: accuracy and efficiency coefficients and their product
//! - [`evosearch`]: evolutionary search over NEVs inside a FLOPs window
//! - [`tensorcore`]: small reverse-mode autodiff core used for training
//! - [`hypernet`]: NEV-conditioned weight generators and their meta-training
//! - [`model`]: forward pass of a template network over explicit weights
//! - [`pipeline`]: datasets, retraining from scratch, metrics and the end-to-end run
//! - [`config`]: run configuration file

pub mod arch;
pub mod config;
pub mod evosearch;
pub mod hypernet;
pub mod model;
pub mod pipeline;
pub mod reward;
pub mod tensorcore;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// First line of every CSV this crate writes.
pub const CSV_SCHEMA: &str = "# metaprune-csv schema_version=1";
/// `schema_version` carried by every JSON document this crate writes.
pub const JSON_SCHEMA_VERSION: u32 = 1;

/// Generator for one independent stream of a seeded run.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
