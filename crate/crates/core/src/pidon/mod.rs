//! Physics-informed DeepONet surrogate of the cure process.
//!
//! Three operators (part temperature, tool temperature, degree of cure) map a
//! design vector to a field over normalised time `τ = t / t_obj(u)` and a
//! per-layer local coordinate. Time is split into subdomains, each owning
//! its own three networks, trained one after another with the end state of
//! a subdomain serving as the initial condition of the next.

mod checkpoint;
mod model;
mod physics;
mod train;

pub use checkpoint::{
    load_checkpoint, load_model, save_model, save_progress, Checkpoint, CheckpointProgress,
    SCHEMA_VERSION,
};
pub use model::{
    operator_forward, Architecture, DeepOnet, OutputScaler, PidonModel, Prediction, SubPidon,
    Subdomain, SurrogateProblem, Variable,
};
pub use physics::{
    residual_doc, residual_part, residual_tool, LocalFrame, LossComponents, LossWeights,
};
pub use train::{
    boundary_mismatch, end_targets, initial_targets, resume, train_all, train_subdomain,
    training_designs, AttemptReport, IcTargets, LossRecord, NoObserver, TrainConfig,
    TrainObserver, TrainReport, TrainState,
};
