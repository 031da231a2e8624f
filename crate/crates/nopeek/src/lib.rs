//! Split learning with information-leakage reduction.
//!
//! Trains a classifier split across a client and a server while minimizing
//! the distance correlation between the raw client data and the
//! activations that cross the wire, so an attacker holding leaked
//! (activation, input) pairs learns much less from the rest. Ships with a
//! reconstruction-attack testbed that quantifies exactly that.
//!
//! Start from the runnable examples:
//!
//! - `dcor_estimator`: the dependence measure itself
//! - `gradient_check`: reverse-mode and analytic gradients vs finite differences
//! - `burnin_decorrelation`: communication-free device-level decorrelation
//! - `split_training`: a full client/server session over the loopback wire
//! - `reconstruction_attack`: attacking baseline vs leakage-reduced activations
//! - `alpha_sweep`: the privacy-utility curve
//! - `attribute_privacy`: decorrelating one protected attribute
//! - `noise_baseline`: the uniform-noise alternative
//! - `activation_images`: PPM dumps of what the wire reveals
//! - `tcp_session`: the same protocol over TCP

pub mod attack;
pub mod burnin;
pub mod config;
pub mod depmeasure;
pub mod error;
pub mod harness;
pub mod loss;
pub mod model;
pub mod numcore;
pub mod splitnet;

pub use error::{Error, Result};
