//! Prototype memory of articulated human body configurations.
//!
//! Samples of a parametric body model are clustered with a part-aware
//! vertex distance and rotation-correct center averaging; the resulting
//! centers form a memory used to initialize and evaluate parameter fitting.

pub mod body_model;
pub mod clustering;
pub mod distance;
pub mod error;
pub mod fitting;
pub mod io;
pub mod memory;
pub mod metrics;
pub mod rotations;
pub mod synth;

pub use error::{Error, Result};
