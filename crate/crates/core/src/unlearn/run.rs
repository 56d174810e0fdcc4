//! Contrastive unlearning rounds and the retrain reference.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::forget::{build_forgotten_graph, forgotten_views, recent_snapshots, snapshot_views, ForgottenViewSet};
use crate::datasets::{InteractionTable, SharingPartition};
use crate::error::{Error, Result};
use crate::fedlearn::{fedavg_sparse, run_learning, Federation, RoundMetrics, TrainConfig};
use crate::graph::{infer, propagate_adjoint, GradAccumulator, Matrix};
use crate::losses::{contrastive_unlearn_loss_grad, LossConfig};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnConfig {
    pub rounds: usize,
    pub clients_per_round: f64,
    pub learning_rate: f64,
    pub tau: f64,
    /// Most recent snapshots used; 0 uses all stored.
    pub snapshots_used: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Infer forgotten views on the forgotten graph (off: raw snapshot rows).
    pub forgotten_graph: bool,
    /// Fresh federated pass for the local views each round (off: reuse the
    /// current item table).
    pub remaining_fl: bool,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        UnlearnConfig {
            rounds: 8,
            clients_per_round: 1.0,
            learning_rate: 0.01,
            tau: 0.2,
            snapshots_used: 0,
            batch_size: 256,
            epochs: 1,
            forgotten_graph: true,
            remaining_fl: true,
            seed: 0,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.rounds == 0 {
            return bad("unlearning rounds must be >= 1");
        }
        if !(self.clients_per_round > 0.0 && self.clients_per_round <= 1.0) {
            return bad("unlearning clients_per_round outside (0, 1]");
        }
        if !(self.learning_rate >= 0.0) {
            return bad("unlearning learning rate must be >= 0");
        }
        if !(self.tau > 0.0) {
            return bad("unlearning tau must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("unlearning batch_size and epochs must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnRoundStats {
    pub round: usize,
    pub participants: usize,
    pub client_loss: f64,
    pub cu_loss: f64,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnReport {
    pub forgotten_items: usize,
    pub snapshot_rounds: Vec<usize>,
    pub mean_cos_before: f64,
    pub mean_cos_after: f64,
    pub rounds: Vec<UnlearnRoundStats>,
    pub wall_time_ms: f64,
}

/// Unlearns the withdrawn interactions of `partition` from `fed`.
///
/// `apply_unshare` must already have run on `fed.server`. Each round takes
/// a fresh federated pass over the clients' remaining data for the local
/// views, then minimizes the contrastive unlearning loss over the shared
/// and forgotten items. The item table rows (the local views) and the server
/// user table are trainable; global views are their propagation on the
/// updated shared graph. Snapshots are read only.
pub fn run_unlearning(fed: &mut Federation, partition: &SharingPartition, config: &UnlearnConfig) -> Result<UnlearnReport> {
    config.validate()?;
    let start = Instant::now();
    let graph_f = build_forgotten_graph(partition)?;
    let snaps = recent_snapshots(&fed.snapshots, config.snapshots_used)?;
    let spec = fed.config.server_spec();
    let forgotten = if config.forgotten_graph {
        forgotten_views(&graph_f, &snaps, &spec)?
    } else {
        snapshot_views(&graph_f, &snaps)?
    };
    let snapshot_rounds = forgotten.rounds.clone();
    let mean_cos_before = forgotten.mean_cosine(&fed.server.item_table)?;

    // withdrawn items leave the clients' training data as well
    for (u, client) in fed.clients.iter_mut().enumerate() {
        let withdrawn = &partition.user(u).unlearn;
        if !withdrawn.is_empty() {
            client.withdraw(withdrawn)?;
        }
    }

    let mut items: BTreeSet<usize> = forgotten.views.keys().copied().collect();
    if let Some(g) = &fed.server.shared_graph {
        items.extend(g.item_ids());
    }
    let items: Vec<usize> = items.into_iter().collect();
    let loss_cfg = LossConfig {
        tau: config.tau,
        ..fed.config.loss.clone()
    };

    let mut rounds = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        let t0 = Instant::now();
        let (mut participants, mut client_loss) = (0, 0.0);
        if config.remaining_fl {
            let (uploads, loss, n) = fed.client_pass(round, "unlearn", config.clients_per_round, config.seed)?;
            if !uploads.is_empty() {
                fed.server.item_table = fedavg_sparse(&fed.server.item_table, &uploads)?;
            }
            participants = n;
            client_loss = loss;
        }
        let mut rng = rng_for(config.seed, "unlearn_batches", round as u64);
        let cu_loss = unlearn_steps(fed, &forgotten, &items, &loss_cfg, config, &mut rng)?;
        if !fed.server.item_table.all_finite() {
            return Err(Error::NonFinite(format!("item table after unlearning round {round}")));
        }
        log::info!("unlearning round {round}: contrastive loss {cu_loss:.4}");
        rounds.push(UnlearnRoundStats {
            round,
            participants,
            client_loss,
            cu_loss,
            wall_time_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(UnlearnReport {
        forgotten_items: forgotten.views.len(),
        snapshot_rounds,
        mean_cos_before,
        mean_cos_after: forgotten.mean_cosine(&fed.server.item_table)?,
        rounds,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

fn unlearn_steps(
    fed: &mut Federation,
    forgotten: &ForgottenViewSet,
    items: &[usize],
    loss_cfg: &LossConfig,
    config: &UnlearnConfig,
    rng: &mut crate::seed::Rng,
) -> Result<f64> {
    let spec = fed.config.server_spec();
    let server = &mut fed.server;
    let dim = server.item_table.dim();
    let mut total = 0.0;
    for _ in 0..config.epochs {
        let mut order = items.to_vec();
        order.shuffle(rng);
        for batch in order.chunks(config.batch_size) {
            let mut global: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            let graph = server.shared_graph.as_ref();
            let inferred = match (graph, &server.server_user_table) {
                (Some(g), Some(users)) => Some(infer(g, users, &server.item_table, &spec)?),
                _ => None,
            };
            for &i in batch {
                let row = match (graph.and_then(|g| g.item_pos(i)), &inferred) {
                    (Some(p), Some(inf)) => inf.items.row(p).to_vec(),
                    _ => server.item_table.get(i).ok_or(Error::MissingRow { kind: "item", id: i })?.to_vec(),
                };
                global.insert(i, row);
            }
            let out = contrastive_unlearn_loss_grad(&server.item_table, &global, &forgotten.views, batch, loss_cfg)?;
            total += out.loss;

            let mut item_grads = out.local;
            let mut user_grads = GradAccumulator::new(dim);
            match graph {
                Some(g) => {
                    let mut up_items = Matrix::zeros(g.num_items(), dim);
                    let mut through_graph = false;
                    for (&i, gr) in out.global.iter() {
                        match g.item_pos(i) {
                            Some(p) => {
                                up_items.row_mut(p).copy_from_slice(gr);
                                through_graph = true;
                            }
                            None => item_grads.add(i, gr, 1.0),
                        }
                    }
                    if through_graph {
                        let up_users = Matrix::zeros(g.num_users(), dim);
                        let (gu, gi) = propagate_adjoint(g, &spec, &up_users, &up_items)?;
                        for (p, &u) in g.user_ids().iter().enumerate() {
                            user_grads.add(u, gu.row(p), 1.0);
                        }
                        for (p, &i) in g.item_ids().iter().enumerate() {
                            item_grads.add(i, gi.row(p), 1.0);
                        }
                    }
                }
                None => item_grads.merge(&out.global, 1.0),
            }
            if !item_grads.all_finite() || !user_grads.all_finite() {
                return Err(Error::NonFinite("unlearning gradient".into()));
            }
            server.item_table.apply_step(&item_grads, config.learning_rate)?;
            if let Some(users) = server.server_user_table.as_mut() {
                users.apply_step(&user_grads, config.learning_rate)?;
            }
        }
    }
    Ok(total)
}

/// Trains from scratch on the remaining data: withdrawn items leave the
/// shared sets and the train table.
pub fn retrain_oracle<F>(
    num_items: usize,
    train: &InteractionTable,
    partition: &SharingPartition,
    config: &TrainConfig,
    observe: F,
) -> Result<Federation>
where
    F: FnMut(&Federation, &mut RoundMetrics) -> Result<()>,
{
    let (remaining, train_remaining) = partition.without_withdrawn(train);
    run_learning(num_items, &train_remaining, &remaining, config, observe)
}
