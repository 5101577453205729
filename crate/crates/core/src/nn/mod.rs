//! Minimal neural-network substrate: MLPs, jets for coordinate derivatives,
//! a reverse-mode tape and Adam.

pub mod adam;
pub mod kernels;
pub mod mlp;
pub mod tape;

pub use adam::{AdamState, StepDecay};
pub use kernels::{JetLayout, Tensor};
pub use mlp::{Activation, CoordDerivs, Dense, Mlp};
pub use tape::{BoundMlp, Gradients, Tape, Var};
