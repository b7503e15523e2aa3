//! Packer identification by unpacking-stub call-graph similarity.

pub mod cg_model;
pub mod cluster;
pub mod error;
pub mod gmn;
pub mod identify;
pub mod metrics;
pub mod registry;
pub mod stub_extract;

pub use error::{Error, Result};
