//! Hierarchical navigation for an omnidirectional robot among moving
//! obstacles: a frontier-exploration upper layer over a fused-expert lower
//! layer, plus the simulator and trainer they run in.

pub mod error;
pub mod eval;
pub mod exploration;
pub mod geometry;
pub mod occupancy;
pub mod planner;
pub mod policy;
pub mod reward;
pub mod scenarios;
pub mod stack;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
