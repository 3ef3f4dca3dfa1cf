//! Packet-count BLE localization toolkit.
//!
//! The crate models BLE packet reception as a log-quadratic function of
//! distance, advertising frequency, and transmit power, stratified by the
//! number of shelving stacks between beacon and receiver. On top of that
//! model it provides:
//!
//! - [`inference`]: ML and Bayesian (MCMC) fitting of the reception model
//!   from windowed packet counts;
//! - [`simulator`]: scripted walks through a store layout and per-packet
//!   Bernoulli trace simulation;
//! - [`localizer`]: PC-MCL, a batch MCMC over the whole trajectory with
//!   latent per-leg speeds and aisle thresholds, plus a range-free MCL
//!   particle-filter baseline;
//! - [`evaluation`]: error metrics against ground truth and report exports.
//!
//! All randomized code paths take explicit seeds and produce identical
//! output for identical inputs, independent of thread count.

pub mod error;
pub mod evaluation;
pub mod inference;
pub mod io;
pub mod layout;
pub mod localizer;
pub mod mcmc;
pub mod model;
pub mod simulator;
pub mod trace;

pub use error::{Error, Result};
