//! Checkpoint directory: `manifest.json` plus raw little-endian f64 matrices
//! and the shared graph dump.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::pipeline::Federation;
use super::server::ServerState;
use super::snapshot::SnapshotStore;
use crate::datasets::{InteractionTable, SharingPartition};
use crate::error::{Error, Result};
use crate::graph::{dump, BipartiteGraph, EmbeddingTable, Matrix};

const ITEMS: &str = "item_table.f64";
const SERVER_USERS: &str = "server_users.f64";
const CLIENT_USERS: &str = "client_users.f64";
const SHARED_GRAPH: &str = "shared_graph.bin";
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub round: usize,
    pub config_hash: String,
    pub seed: u64,
    pub dim: usize,
    pub num_items: usize,
    pub num_users: usize,
    pub server_user_ids: Vec<usize>,
    pub snapshot_capacity: usize,
    pub snapshot_rounds: Vec<usize>,
    /// `learned`, `unlearned` or `retrained`.
    pub phase: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub item_table: EmbeddingTable,
    pub server_user_table: Option<EmbeddingTable>,
    pub client_users: Matrix,
    pub snapshots: SnapshotStore,
    pub shared_graph: Option<BipartiteGraph>,
}

fn snapshot_file(round: usize) -> String {
    format!("snapshot_{round}.f64")
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.as_slice().len() * 8);
    for v in m.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path, rows: usize, cols: usize) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != rows * cols * 8 {
        return Err(Error::Shape(format!(
            "{}: expected {rows}x{cols} f64 values, found {} bytes",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn save_checkpoint(dir: &Path, fed: &Federation, config_hash: &str, phase: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let server = &fed.server;
    // stale snapshot files from an earlier save would confuse readers
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("snapshot_") && name.ends_with(".f64") {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    write_matrix(&dir.join(ITEMS), server.item_table.values())?;
    write_matrix(&dir.join(CLIENT_USERS), &fed.client_user_matrix())?;
    let server_user_ids = match &server.server_user_table {
        Some(t) => {
            write_matrix(&dir.join(SERVER_USERS), t.values())?;
            t.ids()
        }
        None => Vec::new(),
    };
    let graph_path = dir.join(SHARED_GRAPH);
    match &server.shared_graph {
        Some(g) => dump::write(g, &graph_path)?,
        None if graph_path.exists() => fs::remove_file(&graph_path).map_err(|e| Error::io(&graph_path, e))?,
        None => {}
    }
    for s in fed.snapshots.iter() {
        write_matrix(&dir.join(snapshot_file(s.round)), s.table.values())?;
    }
    let manifest = CheckpointManifest {
        round: server.round,
        config_hash: config_hash.to_string(),
        seed: fed.config.seed,
        dim: fed.config.dim,
        num_items: server.item_table.rows(),
        num_users: fed.clients.len(),
        server_user_ids,
        snapshot_capacity: fed.snapshots.capacity(),
        snapshot_rounds: fed.snapshots.rounds(),
        phase: phase.to_string(),
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let (n, d) = (manifest.num_items, manifest.dim);
    let item_table = EmbeddingTable::from_matrix(read_matrix(&dir.join(ITEMS), n, d)?);
    let client_users = read_matrix(&dir.join(CLIENT_USERS), manifest.num_users, d)?;
    let server_user_table = if manifest.server_user_ids.is_empty() {
        None
    } else {
        let m = read_matrix(&dir.join(SERVER_USERS), manifest.server_user_ids.len(), d)?;
        Some(EmbeddingTable::keyed(manifest.server_user_ids.clone(), m)?)
    };
    let graph_path = dir.join(SHARED_GRAPH);
    let shared_graph = if graph_path.exists() {
        Some(dump::read(&graph_path)?)
    } else {
        None
    };
    let mut snapshots = SnapshotStore::new(manifest.snapshot_capacity)?;
    for &r in &manifest.snapshot_rounds {
        let m = read_matrix(&dir.join(snapshot_file(r)), n, d)?;
        snapshots.push(r, &EmbeddingTable::from_matrix(m))?;
    }
    Ok(Checkpoint {
        manifest,
        item_table,
        server_user_table,
        client_users,
        snapshots,
        shared_graph,
    })
}

impl Federation {
    /// Rebuilds a federation from a checkpoint: client data comes from
    /// `train`/`partition`, parameters from the checkpoint.
    pub fn restore(
        checkpoint: Checkpoint,
        train: &InteractionTable,
        partition: &SharingPartition,
        config: &TrainConfig,
    ) -> Result<Self> {
        let m = &checkpoint.manifest;
        if m.dim != config.dim || m.num_users != train.num_users() {
            return Err(Error::Shape("checkpoint does not match the prepared data or config".into()));
        }
        let mut fed = Federation::new(m.num_items, train, partition, config)?;
        for (c, row) in fed.clients.iter_mut().zip(checkpoint.client_users.iter_rows()) {
            c.set_user_embedding(row.to_vec());
        }
        fed.server = ServerState {
            item_table: checkpoint.item_table,
            server_user_table: checkpoint.server_user_table,
            shared_graph: checkpoint.shared_graph,
            round: m.round,
        };
        fed.snapshots = checkpoint.snapshots;
        Ok(fed)
    }
}
