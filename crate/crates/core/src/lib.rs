//! Passive observatory for the Bitcoin peer-to-peer network.
//!
//! The pipeline is: [`crawler`] listens to peers speaking the [`wire`]
//! protocol and appends every inventory announcement to an [`eventlog`];
//! [`classify`] labels blocks and transactions against a [`chainview`]
//! ledger; [`analytics`] turns the labelled log into propagation and
//! confirmation-latency statistics. [`sim`] produces ledgers and logs with
//! known ground truth.

pub mod analytics;
pub mod chainview;
pub mod classify;
pub mod cli;
pub mod crawler;
pub mod eventlog;
pub mod sim;
pub mod types;
pub mod wire;

pub use types::{Hash32, ObjectKind};
