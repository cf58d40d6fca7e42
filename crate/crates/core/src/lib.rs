//! Simulator for federated segmentation training where clients hold labels of
//! different strength: pixel masks, bounding boxes, image-level classes, or
//! nothing at all.
//!
//! Each client trains two differently initialized models that supervise each
//! other with refined pseudo labels, keeps only samples on which the models
//! agree, and the server blends client updates with weights that account for
//! both data quantity and training loss.

pub mod aggregation;
pub mod cli;
pub mod client;
pub mod config;
pub mod error;
pub mod grid;
pub mod model;
pub mod orchestrator;
pub mod report;
pub mod seed;
pub mod stats;
pub mod synth;

pub use aggregation::{adaptive_weights, apply_update, fedavg_weights, Aggregation};
pub use client::{refine, ClientState, LocalConfig, LocalUpdate};
pub use error::{Error, Result};
pub use grid::{dice_coefficient, soft_dice_loss, soft_dice_loss_gradient, Grid2D};
pub use model::{adam_step, backward, forward, init_params, AdamState, ModelSpec, ParamVector};
pub use orchestrator::{
    evaluate, run_experiment, run_experiment_with, run_round, ExperimentConfig, ExperimentOutcome, Globals,
    Regime, RoundReport, RunOptions,
};
pub use synth::{
    canonicalize, degrade_supervision, generate_client, ClientDataset, Sample, Supervision, SupervisionLevel,
};
