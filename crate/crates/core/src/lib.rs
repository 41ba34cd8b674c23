//! Dynamic heterogeneous graph models for fraud detection on event logs.

pub mod data;
pub mod diachronic;
pub mod error;
pub mod features;
pub mod graph;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod schema;

pub use error::{Error, Result};
