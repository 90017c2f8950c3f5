//! Multi-scale feature contrastive training for speaker embeddings.
//!
//! The crate covers the full desk-scale pipeline: log-mel front end and
//! augmentation ([`features`]), a Conformer encoder that exposes every block
//! output ([`encoder`]), per-block and aggregated embedding heads ([`heads`]),
//! the margin/contrastive objectives with analytic gradients ([`losses`]),
//! verification metrics ([`metrics`]), a deterministic synthetic corpus
//! ([`synthdata`]) and the training loop ([`trainer`]).
//!
//! All numerics are `f64`. Data-parallel loops go through [`exec`], which uses
//! rayon when the `parallel` feature is on and plain iteration otherwise; every
//! reduction is performed in index order so results do not depend on the
//! thread count.

pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod features;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod synthdata;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
