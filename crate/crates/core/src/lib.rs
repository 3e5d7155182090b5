//! Gridless maximum-likelihood structured covariance estimation for
//! direction-of-arrival and line-spectrum recovery.

pub mod error;
pub mod estimate;
pub mod experiment;
pub mod geometry;
pub mod metrics;
pub mod mlesolve;
pub mod numerics;
pub mod refine;
pub mod sbl;
pub mod sigmodel;

pub use error::{Error, Result};
