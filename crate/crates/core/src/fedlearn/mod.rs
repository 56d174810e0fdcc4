//! The federated learning phase.

mod aggregate;
mod checkpoint;
mod client;
mod config;
mod pipeline;
mod server;
mod snapshot;

pub use aggregate::{fedavg, fedavg_sparse, Participant};
pub use checkpoint::{
    load_checkpoint, manifest_path, read_manifest, read_matrix, save_checkpoint, write_matrix, Checkpoint,
    CheckpointManifest,
};
pub use client::{local_train, ClientState, LocalUpdate};
pub use config::{LocalDataMode, ServerMode, TrainConfig};
pub use pipeline::{append_metrics, run_learning, select_clients, server_round, Federation, RoundMetrics, ServerRoundStats};
pub use server::{server_client_update, server_refine, RefineStats, ServerState, SharedData};
pub use snapshot::{Snapshot, SnapshotStore};

