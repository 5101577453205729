//! Physics-informed surrogate modelling and design optimisation of
//! two-hold autoclave cure cycles for thermoset composite laminates.

pub mod cure_cycle;
pub mod design_opt;
pub mod error;
pub mod fd_sim;
pub mod material;
pub mod nn;
pub mod pidon;

pub use error::{Error, Result};
