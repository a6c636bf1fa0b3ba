//! Training engine for multi-label classifiers learned from single-positive
//! annotations.

pub mod augment;
pub mod config;
pub mod consistency;
pub mod container;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod miner;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
