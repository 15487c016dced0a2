//! Kinodynamic route search, corridor planning and GP-augmented model
//! predictive control for a simulated quadrotor.

pub mod bench;
pub mod dynamics;
pub mod error;
pub mod gp;
pub mod mpc;
pub mod planner;
pub mod quad;
pub mod rng;
pub mod search;
pub mod sim;
pub mod world;

pub use error::{Error, Result};
