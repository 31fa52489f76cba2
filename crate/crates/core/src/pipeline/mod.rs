//! The joint objective, gradient routing, the alternating schedule and
//! checkpoints.

mod config;
mod model;
mod state;
mod train;

pub use config::{ProposalSource, TrainConfig};
pub use model::{boxes, Model};
pub use state::{load_checkpoint, save_checkpoint, sidecar_path, Sidecar};
pub use train::{
    alternating_schedule, build_objective, joint_step, propose_all, routing_holds, train_on,
    BatchItem, Components, Objective, Phase, StepLosses, TrainOutcome, TrainState,
};
