//! Exponential-utility investment games with relative performance concerns on
//! random interaction graphs and their graphon limits.

pub mod bsde;
pub mod chaos_lab;
pub mod error;
pub mod fixed_point_finite;
pub mod graphon;
pub mod graphon_game;
pub mod indifference;
pub mod market;
pub mod optim;
pub mod rng;

pub use error::{Error, Result};
