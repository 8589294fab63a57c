//! Delay-aware remote state estimation and energy-aware sensor scheduling.
//!
//! A multi-sensor linear process is observed through links with random
//! measurement staleness. The estimator folds stale measurements in with a
//! posterior-fusion pipeline instead of re-filtering, and a scheduler decides
//! at each slot which sensor (if any) transmits, trading estimation error
//! against transmission energy.
//!
//! Module map:
//!
//! * [`linmodel`]: process and sensor models, random system generation, ground truth.
//! * [`kalman`]: prediction and timely updates on [`kalman::BeliefState`].
//! * [`delay_fusion`]: stale-measurement fusion, information gain, replay oracle.
//! * [`stability`]: spectral split and observability feasibility of unstable modes.
//! * [`link_energy`]: Friis gain, SNR and per-packet energy.
//! * [`env`]: the scheduling MDP.
//! * [`nn`]: small dense networks with reverse-mode gradients and Adam.
//! * [`scheduling`]: baseline schedulers, GAE, PPO loss and trainer, evaluation.
//! * [`harness`]: configuration, seeding, experiments and CSV output.

pub mod delay_fusion;
pub mod env;
pub mod error;
pub mod harness;
pub mod kalman;
pub mod linalg;
pub mod link_energy;
pub mod linmodel;
pub mod nn;
pub mod scheduling;
pub mod seeds;
pub mod snapshot;
pub mod stability;

pub use error::{Error, Result};
