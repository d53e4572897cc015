//! Simulator for collaborative multi-view classification on edge devices.

pub mod dataset;
pub mod descriptors;
pub mod error;
pub mod harness;
pub mod models;
pub mod network;
pub mod palette;
pub mod pipeline;
pub mod schemes;
pub mod seed;
pub mod types;

pub use error::{Error, Result};
