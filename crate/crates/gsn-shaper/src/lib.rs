//! Generative stochastic networks built from variational blocks, trained as
//! unrolled Markov chains and shaped by a collaborative guide, together with
//! exact finite-space machinery for checking the underlying claims.
//!
//! The crate is organised around three layers:
//!
//! - a small reverse-mode autodiff engine ([`autodiff`]) with the network and
//!   distribution vocabulary on top ([`nets`], [`dists`]);
//! - the chain model itself ([`sgsn`]), its variational objective ([`vfe`]),
//!   the collaborative shaping losses ([`shaping`]), and the training loop
//!   that ties them together ([`train`], [`data`]);
//! - exact discrete-space counterparts ([`exact`]) and verification suites
//!   ([`suites`]) that test the continuous machinery against closed forms,
//!   brute-force enumeration, and finite differences.
//!
//! Everything is `f64`, deterministic under explicit seeds, and free of
//! global state.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod dists;
pub mod error;
pub mod exact;
mod iofmt;
pub mod nets;
pub mod ppm;
pub mod rng;
pub mod sgsn;
pub mod shaping;
pub mod suites;
pub mod train;
pub mod vfe;

pub use error::{GsnError, Result};
