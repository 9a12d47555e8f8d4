//! Task-aware dynamic mixture-of-experts routing for temporal grounding.

pub mod cli;
pub mod config;
pub mod error;
pub mod event_codec;
pub mod gating;
pub mod gradcheck;
pub mod lifecycle;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synthdata;
pub mod numerics;

pub use error::{Error, Result};
