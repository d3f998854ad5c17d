//! Differentiable explicit-density volume rendering for cross-view scenes.
//!
//! An overhead image fixes the horizontal layout of a scene; ground-level
//! equirectangular panoramas with sky masks constrain a non-negative density
//! grid through volume-rendered depth, opacity and copy-paste color.

pub mod camera;
pub mod error;
pub mod io;
pub mod map;
pub mod metrics;
pub mod optimize;
pub mod render;
pub mod supervise;
pub mod synth;
pub mod volume;
pub mod workflow;

pub use error::{Error, Result};
