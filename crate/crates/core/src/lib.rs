//! Recovery-rate transfer-learning laboratory.
//!
//! The crate bundles everything needed to study transfer of loan recovery-rate
//! models across portfolios with shifted distributions and partially
//! overlapping feature sets:
//!
//! - [`datagen`]: a controllable synthetic generator (two-component recovery
//!   mixture, conditionally dependent features, structured shifts).
//! - [`schema`]: global feature universe, vocabularies, scaling and splits.
//! - [`model`]: the feature-token transformer with mixture-density and
//!   regression heads, including schema reconfiguration.
//! - [`transfer`]: training loops, the two-stage transfer schedule, the three
//!   evaluation scenarios and the MLP baseline.
//! - [`driftdiag`]: histogram KL drift scores.
//! - [`metrics`]: R², MAE, NLL and portfolio mixture-of-mixtures densities.
//! - [`harness`]: seeded, resumable Monte Carlo orchestration and reporting.

pub mod datagen;
pub mod driftdiag;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod schema;
pub mod seeds;
pub mod transfer;

pub use error::{Error, Result};
