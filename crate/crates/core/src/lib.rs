//! Round-based federated training.
//!
//! - [`tensor`]: weight containers, weighted aggregation and the `FTM1` encoding.
//! - [`trainer`]: the reference local learner behind the [`trainer::LocalTrainer`] trait.
//! - [`datakit`]: site datasets, splitting, CSV and the synthetic multi-site generator.
//! - [`metrics`]: confusion metrics, ROC AUC and cross-site evaluation.
//! - [`proto`]: framing, messages and challenge-response authentication.
//! - [`coordinator`]: the round state machine and checkpoints.
//! - [`federation`]: connection handling, authentication and the operator control API.
//! - [`agent`]: the site-side participant.
//! - [`sim`]: deterministic in-process federation with fault injection.
//! - [`experiments`]: local-versus-federated comparison and the dataset-size sweep.

pub mod agent;
pub mod coordinator;
pub mod datakit;
pub mod experiments;
pub mod federation;
pub mod metrics;
pub mod proto;
pub mod seed;
pub mod sim;
pub mod tensor;
pub mod trainer;
