//! Coarse-fine temporal detection at desk scale.
//!
//! The coarse stream resamples its features on a learned temporal grid
//! ([`gridpool`]), the fine stream keeps every frame, and [`fusion`] feeds
//! fine context back into the coarse stream. Per-frame logits are mapped
//! back to the annotation timeline and scored with per-class average
//! precision ([`losseval`]).

pub mod backbone;
pub mod config;
pub mod dataio;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod gridpool;
pub mod losseval;
pub mod params;
pub mod train;

pub use error::{CfnError, Result};
