//! Signal-propagation laboratory for randomly initialized ReLU multilayer
//! perceptrons.
//!
//! Two sides of the same question are covered here: the wide-network
//! (mean-field) prediction of how the squared sample mean and the sample
//! variance of pre-activations evolve with depth, and finite-width Monte
//! Carlo ensembles that measure the same quantities on concrete networks.
//!
//! - [`meanfield`]: the correlation map `K`, its iterates, trajectories and
//!   the batch-norm gradient predictions.
//! - [`network`]: dense ReLU MLPs, Kaiming / scale / scale+bias
//!   initialization, forward propagation with optional batch normalization.
//! - [`gradients`]: reverse-mode activation gradients under a random linear
//!   loss and log-slope fits.
//! - [`stats`]: sample/total statistics, the mean-to-std ratio and ensemble
//!   aggregation.
//! - [`experiments`]: ensemble drivers shared by the CLI and the acceptance
//!   suite.
//! - [`cli`]: the `varprop` command line.
//!
//! Ensembles run on rayon when the `parallel` feature (default) is enabled and
//! fall back to plain iteration otherwise. Every network owns its RNG streams,
//! so results do not depend on the thread count.

pub mod cli;
pub mod error;
pub mod experiments;
pub mod gradients;
pub mod meanfield;
pub mod network;
pub mod par;
pub mod plot;
pub mod seed;
pub mod serialize;
pub mod stats;

pub use error::{Error, Result};
