//! Analysis and desk-scale execution toolkit for the PVANet detector.

pub mod blocks;
pub mod cost;
pub mod detect;
pub mod engine;
pub mod error;
pub mod graph;
pub mod lowrank;
pub mod rf;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
