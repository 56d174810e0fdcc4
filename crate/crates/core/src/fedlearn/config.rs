use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::PropagationSpec;
use crate::losses::LossConfig;

/// Which of a client's train interactions it trains on locally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalDataMode {
    /// Only interactions kept local after sharing.
    RemainingOnly,
    /// Local and shared interactions.
    AllTrain,
}

/// What the server does with the aggregated item table each round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerMode {
    /// BPR on the shared graph plus local/global contrastive alignment.
    Refine,
    /// The server joins FedAvg as one more client holding all shared data.
    FedAvgClient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub rounds: usize,
    pub clients_per_round: f64,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub server_learning_rate: f64,
    pub server_epochs: usize,
    pub bpr_batch_size: usize,
    pub cl_batch_size: usize,
    pub client_layers: usize,
    pub server_layers: usize,
    pub snapshot_capacity: usize,
    pub loss: LossConfig,
    pub local_data: LocalDataMode,
    pub server_mode: ServerMode,
    pub server_bpr: bool,
    pub eval_interval: usize,
    pub eval_k: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 32,
            rounds: 40,
            clients_per_round: 1.0,
            local_epochs: 1,
            learning_rate: 0.01,
            server_learning_rate: 0.01,
            server_epochs: 1,
            bpr_batch_size: 1024,
            cl_batch_size: 256,
            client_layers: 1,
            server_layers: 3,
            snapshot_capacity: 3,
            loss: LossConfig::default(),
            local_data: LocalDataMode::RemainingOnly,
            server_mode: ServerMode::Refine,
            server_bpr: true,
            eval_interval: 0,
            eval_k: vec![20],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.rounds == 0 {
            return bad("rounds must be >= 1".into());
        }
        if !(self.clients_per_round > 0.0 && self.clients_per_round <= 1.0) {
            return bad(format!("clients_per_round {} outside (0, 1]", self.clients_per_round));
        }
        if !(self.learning_rate >= 0.0) || !(self.server_learning_rate >= 0.0) {
            return bad("learning rates must be >= 0".into());
        }
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.bpr_batch_size == 0 || self.cl_batch_size < 2 {
            return bad("bpr_batch_size must be >= 1 and cl_batch_size >= 2".into());
        }
        if self.eval_k.iter().any(|&k| k == 0) {
            return bad("eval_k entries must be >= 1".into());
        }
        self.loss.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn client_spec(&self) -> PropagationSpec {
        PropagationSpec::uniform(self.client_layers)
    }

    pub fn server_spec(&self) -> PropagationSpec {
        PropagationSpec::uniform(self.server_layers)
    }
}
