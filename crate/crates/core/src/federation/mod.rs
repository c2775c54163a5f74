//! Simulated federated rounds: the server broadcasts weights and global
//! statistic variances, clients train locally and upload weights plus their
//! accumulated feature statistics, the server averages weights and turns the
//! statistics into the next round's variances.
//!
//! Every message passes through its byte encoding even in-process.

mod aggregate;
mod client;
mod config;
mod message;
mod server;

pub use aggregate::{aggregate_weights, global_stat_variance, layer_variances};
pub use client::{client_local_round, stack_samples, ClientRound, ClientState};
pub use config::{AblationFlags, FedConfig, Variant};
pub use message::{
    broadcast_size, deserialize_broadcast, deserialize_update, serialize_broadcast, serialize_update, update_size,
    ClientUpdate, GlobalBroadcast, LayerStats, MessageError, FVM_MAGIC, FVM_VERSION, KIND_BROADCAST, KIND_UPDATE,
};
pub use server::{Checkpoint, ClientLog, Federation, RoundLog, CHECKPOINT_VERSION};

use crate::segnet::SegError;
use crate::vfda::VfdaError;

#[derive(Debug, thiserror::Error)]
pub enum FedError {
    #[error("no client updates to aggregate")]
    NoUpdates,
    #[error("parameter length mismatch: expected {expected}, got {actual}")]
    ParamLength { expected: usize, actual: usize },
    #[error("channel count mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("broadcast for round {found} but client expects round {expected}")]
    RoundMismatch { expected: u32, found: u32 },
    #[error("{key}: {msg}")]
    Config { key: String, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("client {client_id} failed: {source}")]
    Client { client_id: u32, source: Box<FedError> },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Message(#[from] MessageError),
    #[error(transparent)]
    Seg(#[from] SegError),
    #[error(transparent)]
    Vfda(#[from] VfdaError),
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}
