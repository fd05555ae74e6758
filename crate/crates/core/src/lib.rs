pub mod cluster;
pub mod config;
pub mod covariance;
pub mod error;
pub mod estimator;
pub mod fftn;
pub mod lattice;
pub mod oracle;
pub mod params;
pub mod potential;
pub mod quadrature;
pub mod sampler;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
