//! Object boundary detection with situation-specific edge forests.
//!
//! Training images are grouped into situations (object classes, appearance
//! clusters within a class, or appearance clusters over the whole corpus), one
//! structured edge forest is trained per situation, and a global-appearance
//! classifier decides at test time which forests to run and how to weight
//! their boundary maps.

pub mod codec;
pub mod descriptor;
pub mod error;
pub mod eval;
pub mod forest;
pub mod fusion;
pub mod gating;
pub mod persist;
pub mod pipeline;
pub mod raster;
pub mod situations;
pub mod synth;
pub mod util;

pub use error::{Error, Result};
