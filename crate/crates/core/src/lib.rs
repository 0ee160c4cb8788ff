//! Tracking benchmark: a stochastic target-tracking MDP, exact and
//! approximate solvers, and a Gabor-dictionary image codec used to build
//! state features.

pub mod approx;
pub mod codec;
pub mod container;
pub mod dynamics;
pub mod error;
pub mod mdp;
pub mod rng;
pub mod solve;
pub mod stats;

pub use error::{Error, Result};
