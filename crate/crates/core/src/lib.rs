//! Dual-expert hashing for whole-image and region-of-interest retrieval.

pub mod dataset;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod index;
pub mod kanhash;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, Result};
