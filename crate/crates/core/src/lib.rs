//! Chance-constrained covariance steering for spacecraft under navigation
//! and execution uncertainty.

pub mod dynamics;
pub mod linalg;
pub mod uncertainty;
pub mod navigation;
pub mod blockstats;
pub mod convexifier;
pub mod planner;
pub mod scenarios;
pub mod simulator;

#[cfg(test)]
pub(crate) mod testutil;
