//! Trace-driven simulator for keyframe-triggered pseudo-dual video streaming.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocator;
pub mod analytics;
pub mod config;
pub mod dualstream;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod media;
pub mod netsim;
pub mod numeric;
pub mod pacer;
pub mod ratecontrol;
pub mod receiver;
pub mod sim;
pub mod par;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
