//! The learning phase: select, broadcast, train locally, aggregate, refine,
//! snapshot.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::aggregate::{fedavg_sparse, Participant};
use super::client::{local_train, ClientState, LocalUpdate};
use super::config::{LocalDataMode, ServerMode, TrainConfig};
use super::server::{server_client_update, server_refine, ServerState, SharedData};
use super::snapshot::SnapshotStore;
use crate::datasets::{InteractionTable, SharingPartition};
use crate::error::{Error, Result};
use crate::graph::{EmbeddingTable, Matrix};
use crate::seed::{ceil_count, derive_seed, rng_for};

/// `⌈fraction · n⌉` client ids, a function of `(seed, round)` only.
pub fn select_clients(num_clients: usize, fraction: f64, round: usize, seed: u64) -> Result<BTreeSet<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("client fraction {fraction} outside (0, 1]")));
    }
    let k = ceil_count(fraction * num_clients as f64).min(num_clients);
    if k == num_clients {
        return Ok((0..num_clients).collect());
    }
    let mut rng = rng_for(seed, "select", round as u64);
    Ok(sample(&mut rng, num_clients, k).into_iter().collect())
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub participants: usize,
    pub client_loss: f64,
    pub server_bpr_loss: f64,
    pub server_cl_loss: f64,
    #[serde(flatten)]
    pub eval: BTreeMap<String, f64>,
    pub wall_time_ms: f64,
}

pub fn append_metrics(path: &Path, metrics: &RoundMetrics) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(metrics)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Result of one server step given the uploads of a round.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ServerRoundStats {
    pub server_bpr_loss: f64,
    pub server_cl_loss: f64,
}

/// Server side of a round: aggregate the uploads, then refine on the shared
/// graph (or, in the FedAvg-client mode, aggregate the server's own update
/// with the clients'). Sees only uploaded rows, their weights and the shared
/// graph held in `server`.
pub fn server_round(
    server: &mut ServerState,
    mut uploads: BTreeMap<Participant, LocalUpdate>,
    config: &TrainConfig,
    round: usize,
) -> Result<ServerRoundStats> {
    let mut rng = rng_for(config.seed, "server", round as u64);
    let broadcast = server.item_table.clone();
    let mut stats = ServerRoundStats::default();
    if config.server_mode == ServerMode::FedAvgClient {
        if let Some(up) = server_client_update(server, &broadcast, config, &mut rng)? {
            stats.server_bpr_loss = up.loss;
            uploads.insert(Participant::Server, up);
        }
    }
    let local_view = if uploads.is_empty() {
        broadcast
    } else {
        fedavg_sparse(&broadcast, &uploads)?
    };
    match config.server_mode {
        ServerMode::Refine => {
            let s = server_refine(server, &local_view, config, &mut rng)?;
            stats.server_bpr_loss = s.bpr_loss;
            stats.server_cl_loss = s.cl_loss;
        }
        ServerMode::FedAvgClient => server.item_table = local_view,
    }
    if !server.item_table.all_finite() {
        return Err(Error::NonFinite(format!("item table after round {round}")));
    }
    server.round = round;
    Ok(stats)
}

/// Clients, server and snapshot history of one federation.
#[derive(Debug, Clone)]
pub struct Federation {
    pub config: TrainConfig,
    pub clients: Vec<ClientState>,
    pub server: ServerState,
    pub snapshots: SnapshotStore,
    pub history: Vec<RoundMetrics>,
}

impl Federation {
    /// Fresh federation: Xavier item table, per-user Xavier user rows,
    /// clients holding their local data, server holding the shared graph.
    pub fn new(
        num_items: usize,
        train: &InteractionTable,
        partition: &SharingPartition,
        config: &TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        partition.validate(train)?;
        if num_items < train.num_items() {
            return Err(Error::InvalidArgument("item count smaller than the train table".into()));
        }
        let clients = build_clients(train, partition, config)?;
        let shared = SharedData::from_partition(partition);
        let server = ServerState::init(num_items, &shared, config)?;
        Ok(Federation {
            config: config.clone(),
            clients,
            server,
            snapshots: SnapshotStore::new(config.snapshot_capacity.max(1))?,
            history: Vec::new(),
        })
    }

    pub fn num_users(&self) -> usize {
        self.clients.len()
    }

    pub fn item_table(&self) -> &EmbeddingTable {
        &self.server.item_table
    }

    /// Selection, broadcast and parallel local training for `round`. The
    /// stream name keeps unlearning passes apart from learning rounds.
    pub(crate) fn client_pass(
        &mut self,
        round: usize,
        stream: &str,
        fraction: f64,
        seed: u64,
    ) -> Result<(BTreeMap<Participant, LocalUpdate>, f64, usize)> {
        let config = &self.config;
        let selection_seed = if stream == "local" { seed } else { derive_seed(seed, stream, 0) };
        let selected = select_clients(self.clients.len(), fraction, round, selection_seed)?;
        let broadcast = &self.server.item_table;
        let results: Vec<(usize, Option<LocalUpdate>)> = self
            .clients
            .par_iter_mut()
            .filter(|c| selected.contains(&c.user()))
            .map(|c| {
                let key = ((round as u64) << 32) | c.user() as u64;
                let mut rng = rng_for(seed, stream, key);
                let up = local_train(c, broadcast, config, &mut rng)?;
                if up.is_none() {
                    log::debug!("client {} has no local items; skipped", c.user());
                }
                Ok((c.user(), up))
            })
            .collect::<Result<_>>()?;
        let mut uploads = BTreeMap::new();
        let mut loss = 0.0;
        for (u, up) in results {
            if let Some(up) = up {
                loss += up.loss;
                uploads.insert(Participant::User(u), up);
            }
        }
        let n = uploads.len();
        let mean = if n == 0 { 0.0 } else { loss / n as f64 };
        Ok((uploads, mean, n))
    }

    /// One learning round; `round` starts at 1.
    pub fn run_round(&mut self, round: usize) -> Result<RoundMetrics> {
        let start = Instant::now();
        let (uploads, client_loss, participants) = self.client_pass(round, "local", self.config.clients_per_round, self.config.seed)?;
        let stats = server_round(&mut self.server, uploads, &self.config, round)?;
        self.snapshots.push(round, &self.server.item_table)?;
        Ok(RoundMetrics {
            round,
            participants,
            client_loss,
            server_bpr_loss: stats.server_bpr_loss,
            server_cl_loss: stats.server_cl_loss,
            eval: BTreeMap::new(),
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Runs `config.rounds` rounds after the current one. `observe` sees the
    /// federation after each round and may add evaluation entries.
    pub fn train<F>(&mut self, mut observe: F) -> Result<()>
    where
        F: FnMut(&Federation, &mut RoundMetrics) -> Result<()>,
    {
        let first = self.server.round + 1;
        for round in first..first + self.config.rounds {
            let mut m = self.run_round(round)?;
            observe(self, &mut m)?;
            log::info!(
                "round {round}: client loss {:.4}, server bpr {:.4}, cl {:.4}",
                m.client_loss,
                m.server_bpr_loss,
                m.server_cl_loss
            );
            self.history.push(m);
        }
        Ok(())
    }

    /// Raw user embeddings `u_u`, one row per user.
    pub fn client_user_matrix(&self) -> Matrix {
        let dim = self.config.dim;
        let mut m = Matrix::zeros(self.clients.len(), dim);
        for (r, c) in self.clients.iter().enumerate() {
            m.row_mut(r).copy_from_slice(c.user_embedding());
        }
        m
    }

    /// Per-user scoring vectors against the current item table.
    pub fn inference_users(&self) -> Result<EmbeddingTable> {
        let rows: Vec<Vec<f64>> = self
            .clients
            .par_iter()
            .map(|c| c.inference_embedding(&self.server.item_table, &self.config))
            .collect::<Result<_>>()?;
        let data = rows.into_iter().flatten().collect();
        Ok(EmbeddingTable::from_matrix(Matrix::from_vec(
            self.clients.len(),
            self.config.dim,
            data,
        )?))
    }
}

pub(crate) fn build_clients(
    train: &InteractionTable,
    partition: &SharingPartition,
    config: &TrainConfig,
) -> Result<Vec<ClientState>> {
    (0..train.num_users())
        .map(|u| {
            let share = partition.user(u);
            let items = match config.local_data {
                LocalDataMode::RemainingOnly => share.local.clone(),
                LocalDataMode::AllTrain => train.items_of(u).to_vec(),
            };
            let mut rng = rng_for(config.seed, "user", u as u64);
            let row = EmbeddingTable::xavier(1, config.dim, &mut rng).values().row(0).to_vec();
            ClientState::new(u, row, items, train.items_of(u).to_vec())
        })
        .collect()
}

/// Runs the whole learning phase.
pub fn run_learning<F>(
    num_items: usize,
    train: &InteractionTable,
    partition: &SharingPartition,
    config: &TrainConfig,
    observe: F,
) -> Result<Federation>
where
    F: FnMut(&Federation, &mut RoundMetrics) -> Result<()>,
{
    let mut fed = Federation::new(num_items, train, partition, config)?;
    fed.train(observe)?;
    Ok(fed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_examples() {
        assert_eq!(select_clients(7, 1.0, 3, 9).unwrap().len(), 7);
        assert_eq!(select_clients(100, 0.1, 3, 9).unwrap().len(), 10);
        assert_eq!(select_clients(100, 0.101, 3, 9).unwrap().len(), 11);
        assert_eq!(select_clients(100, 0.1, 3, 9).unwrap(), select_clients(100, 0.1, 3, 9).unwrap());
        assert_ne!(select_clients(100, 0.1, 3, 9).unwrap(), select_clients(100, 0.1, 4, 9).unwrap());
        assert!(select_clients(10, 0.0, 1, 1).is_err());
        assert!(select_clients(10, 1.5, 1, 1).is_err());
    }

    #[test]
    fn metrics_line_has_flat_eval_keys() {
        let m = RoundMetrics {
            round: 2,
            participants: 3,
            client_loss: 0.5,
            server_bpr_loss: 0.0,
            server_cl_loss: 0.0,
            eval: [("hr@20".to_string(), 0.25)].into_iter().collect(),
            wall_time_ms: 1.0,
        };
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["hr@20"], 0.25);
        let back: RoundMetrics = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
    }
}
