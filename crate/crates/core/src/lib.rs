//! Desk-scale simulator for anchor-sampling federated learning (FedAMD) and
//! the baselines it is usually compared against: FedAvg, SCAFFOLD,
//! distributed minibatch SGD, and BVR-L-SGD.
//!
//! The crate is organized around the round engine in [`engine`], which runs
//! the anchor/miner protocol: each round a subset of clients is sampled, every
//! participant is classified as an anchor (refreshes its cached large-batch
//! gradient) or a miner (runs K variance-reduced local steps guided by the
//! average of all cached gradients), and only miner deltas move the global
//! model. [`schedules`] supplies the anchor-probability rules and the
//! theorem-derived learning-rate presets, [`objectives`] the three model
//! families, [`data`] the partitioning and sampling machinery, [`metrics`]
//! the cost accounting, and [`harness`] the config-driven experiment runner
//! behind the CLI.
//!
//! Every random decision flows through keyed streams from [`numerics`], so a
//! run is a pure function of its configuration and seed, independent of
//! thread count.

pub mod baselines;
pub mod data;
pub mod engine;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod objectives;
pub mod schedules;

pub use error::{Error, Result};
