//! Indoor navigation with a variational Gaussian process state-space model.
//!
//! WiFi RSS scans are turned into coarse position fixes by a log-distance
//! path-loss model ([`pathloss`]), refined by an exact GP measurement model
//! ([`gp_regression`]), and fused with pedestrian dead-reckoning controls
//! ([`pdr`]) through a sparse variational GPSSM whose transition GP uses
//! dead reckoning as its mean ([`gpssm`]). A linear-Gaussian baseline
//! ([`lgssm`]), a synthetic office generator ([`simulator`]) and the
//! evaluation pipeline ([`pipeline`]) complete the benchmark.

pub mod error;
pub mod gp_regression;
pub mod gpssm;
pub mod io;
pub mod kernel;
pub mod lgssm;
pub mod linalg;
pub mod optim;
pub mod pathloss;
pub mod pdr;
pub mod pipeline;
pub mod simulator;

pub use error::{NavError, Result};
