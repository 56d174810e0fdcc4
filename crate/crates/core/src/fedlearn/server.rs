//! Server-side state and the refinement step on the shared graph.
//!
//! Nothing in this module takes client user embeddings, kept-local item
//! sets, or held-out interactions as input: the server sees uploaded item
//! tables with their weights and the shared interactions only.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;

use super::client::{sample_negative, LocalUpdate};
use super::config::TrainConfig;
use crate::datasets::SharingPartition;
use crate::error::{Error, Result};
use crate::graph::{
    infer, propagate_adjoint, BipartiteGraph, EmbeddingTable, GradAccumulator, Matrix, RowSource,
};
use crate::losses::{bpr_loss_grad, infonce_cl_loss_grad, BprTriple, LossConfig};
use crate::seed::{rng_for, Rng};

/// Interactions users chose to share (`D_s`), as `(user, item)` edges.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SharedData {
    edges: BTreeSet<(usize, usize)>,
}

impl SharedData {
    /// Reads only the shared sets of the partition.
    pub fn from_partition(partition: &SharingPartition) -> Self {
        SharedData {
            edges: partition.shared_edges(),
        }
    }

    pub fn from_edges(edges: BTreeSet<(usize, usize)>) -> Self {
        SharedData { edges }
    }

    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn graph(&self) -> Result<Option<BipartiteGraph>> {
        if self.edges.is_empty() {
            Ok(None)
        } else {
            BipartiteGraph::build(self.edges.iter().copied()).map(Some)
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub item_table: EmbeddingTable,
    /// Server-trained user rows for users present in the shared graph.
    pub server_user_table: Option<EmbeddingTable>,
    pub shared_graph: Option<BipartiteGraph>,
    pub round: usize,
}

impl ServerState {
    /// Xavier-initialized item table and server user table.
    pub fn init(num_items: usize, shared: &SharedData, config: &TrainConfig) -> Result<Self> {
        let item_table = EmbeddingTable::xavier(num_items, config.dim, &mut rng_for(config.seed, "items", 0));
        let shared_graph = shared.graph()?;
        let server_user_table = match &shared_graph {
            Some(g) => Some(EmbeddingTable::xavier_keyed(
                g.user_ids().to_vec(),
                config.dim,
                &mut rng_for(config.seed, "server_users", 0),
            )?),
            None => None,
        };
        if let Some(g) = &shared_graph {
            if g.item_ids().last().is_some_and(|&i| i >= num_items) {
                return Err(Error::InvalidArgument("shared item id outside the catalogue".into()));
            }
        }
        Ok(ServerState {
            item_table,
            server_user_table,
            shared_graph,
            round: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RefineStats {
    pub bpr_loss: f64,
    pub cl_loss: f64,
    pub steps: usize,
}

pub(crate) struct GraphObjective<'a> {
    pub bpr: bool,
    pub lambda_cl: f64,
    pub anchors: Option<&'a EmbeddingTable>,
    pub epochs: usize,
    pub learning_rate: f64,
}

fn cl_batches(items: &[usize], size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    if items.len() < 2 {
        return Vec::new();
    }
    let mut perm = items.to_vec();
    perm.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = perm.chunks(size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    batches
}

/// Minibatch SGD of `L_BPR(G_s) + λ_1 L_CL + λ·reg` on the item table and the
/// server user table. Each step recomputes the global views on the graph and
/// back-propagates through the LGC adjoint.
pub(crate) fn train_on_graph(
    graph: &BipartiteGraph,
    items: &mut EmbeddingTable,
    users: &mut EmbeddingTable,
    objective: &GraphObjective<'_>,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<RefineStats> {
    let spec = config.server_spec();
    let dim = items.dim();
    let num_items = items.rows();
    let lambda = config.loss.lambda_reg;
    let rank_only = LossConfig {
        lambda_reg: 0.0,
        ..config.loss.clone()
    };
    let use_cl = objective.lambda_cl > 0.0 && objective.anchors.is_some();
    let neighbors: BTreeMap<usize, Vec<usize>> = graph
        .user_ids()
        .iter()
        .map(|&u| (u, graph.items_of(u)))
        .collect();
    let mut stats = RefineStats::default();

    for _ in 0..objective.epochs {
        let bpr_batches: Vec<Vec<(usize, usize)>> = if objective.bpr {
            let mut edges = graph.edges();
            edges.shuffle(rng);
            edges.chunks(config.bpr_batch_size).map(<[_]>::to_vec).collect()
        } else {
            Vec::new()
        };
        let cl = if use_cl {
            cl_batches(graph.item_ids(), config.cl_batch_size, rng)
        } else {
            Vec::new()
        };
        let steps = bpr_batches.len().max(cl.len());

        for s in 0..steps {
            let inferred = infer(graph, &*users, &*items, &spec)?;
            let final_item = |id: usize| -> Option<&[f64]> {
                match graph.item_pos(id) {
                    Some(p) => Some(inferred.items.row(p)),
                    None => items.get(id),
                }
            };
            let mut up_users = Matrix::zeros(graph.num_users(), dim);
            let mut up_items = Matrix::zeros(graph.num_items(), dim);
            let mut direct = GradAccumulator::new(dim);

            if let Some(batch) = (!bpr_batches.is_empty()).then(|| &bpr_batches[s % bpr_batches.len()]) {
                let mut triples = Vec::with_capacity(batch.len() * rank_only.negatives_per_positive);
                for &(u, i) in batch {
                    for _ in 0..rank_only.negatives_per_positive {
                        let j = sample_negative(rng, num_items, &neighbors[&u])
                            .ok_or_else(|| Error::InvalidArgument(format!("shared user {u} covers every item")))?;
                        triples.push(BprTriple { user: u, pos: i, neg: j });
                    }
                }
                let mut fu: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
                let mut fi: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
                for t in &triples {
                    fu.entry(t.user).or_insert_with(|| {
                        inferred.users.row(graph.user_pos(t.user).expect("edge user")).to_vec()
                    });
                    for id in [t.pos, t.neg] {
                        fi.entry(id)
                            .or_insert_with(|| final_item(id).expect("dense item table").to_vec());
                    }
                }
                let out = bpr_loss_grad(&fu, &fi, &triples, &rank_only)?;
                stats.bpr_loss += out.loss;
                for (&u, g) in out.users.iter() {
                    let p = graph.user_pos(u).expect("edge user");
                    up_users.row_mut(p).iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                for (&id, g) in out.items.iter() {
                    match graph.item_pos(id) {
                        Some(p) => up_items.row_mut(p).iter_mut().zip(g).for_each(|(a, b)| *a += b),
                        None => direct.add(id, g, 1.0),
                    }
                }
            }

            if let (Some(batch), Some(anchors)) = ((!cl.is_empty()).then(|| &cl[s % cl.len()]), objective.anchors) {
                let global: BTreeMap<usize, Vec<f64>> = batch
                    .iter()
                    .map(|&id| (id, final_item(id).expect("graph item").to_vec()))
                    .collect();
                let out = infonce_cl_loss_grad(anchors, &global, batch, &config.loss)?;
                stats.cl_loss += out.loss;
                for (&id, g) in out.global.iter() {
                    let p = graph.item_pos(id).expect("graph item");
                    up_items
                        .row_mut(p)
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += objective.lambda_cl * b);
                }
            }

            let (gu, gi) = propagate_adjoint(graph, &spec, &up_users, &up_items)?;
            let mut user_grads = GradAccumulator::new(dim);
            for (p, &u) in graph.user_ids().iter().enumerate() {
                user_grads.add(u, gu.row(p), 1.0);
            }
            let mut item_grads = direct;
            for (p, &i) in graph.item_ids().iter().enumerate() {
                item_grads.add(i, gi.row(p), 1.0);
            }
            if lambda > 0.0 {
                add_reg(&mut user_grads, &*users, lambda);
                add_reg(&mut item_grads, &*items, lambda);
            }
            if !item_grads.all_finite() || !user_grads.all_finite() {
                return Err(Error::NonFinite("server gradient".into()));
            }
            items.apply_step(&item_grads, objective.learning_rate)?;
            users.apply_step(&user_grads, objective.learning_rate)?;
            stats.steps += 1;
        }
    }
    Ok(stats)
}

fn add_reg<S: RowSource>(grads: &mut GradAccumulator, params: &S, lambda: f64) {
    let ids: Vec<usize> = grads.ids().collect();
    for id in ids {
        let row = params.row(id).expect("gradient row exists").to_vec();
        grads.add(id, &row, 2.0 * lambda);
    }
}

/// Server refinement of the aggregated (local-view) table.
///
/// The local views are held fixed as contrastive anchors; the trainable
/// parameters are the item table, initialized from the local views, and the
/// server user table. Without a shared graph the local views are returned.
pub fn server_refine(
    state: &mut ServerState,
    local_view_table: &EmbeddingTable,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<RefineStats> {
    state.item_table = local_view_table.clone();
    let (Some(graph), Some(users)) = (&state.shared_graph, state.server_user_table.as_mut()) else {
        return Ok(RefineStats::default());
    };
    let objective = GraphObjective {
        bpr: config.server_bpr,
        lambda_cl: config.loss.lambda_cl,
        anchors: Some(local_view_table),
        epochs: config.server_epochs,
        learning_rate: config.server_learning_rate,
    };
    train_on_graph(graph, &mut state.item_table, users, &objective, config, rng)
}

/// The server's own local training when it acts as a FedAvg client over the
/// shared data: BPR on the shared graph starting from the broadcast table.
pub fn server_client_update(
    state: &mut ServerState,
    broadcast: &EmbeddingTable,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<Option<LocalUpdate>> {
    let (Some(graph), Some(users)) = (&state.shared_graph, state.server_user_table.as_mut()) else {
        return Ok(None);
    };
    let mut table = broadcast.clone();
    let objective = GraphObjective {
        bpr: true,
        lambda_cl: 0.0,
        anchors: None,
        epochs: config.local_epochs,
        learning_rate: config.server_learning_rate,
    };
    let stats = train_on_graph(graph, &mut table, users, &objective, config, rng)?;
    let mut rows = BTreeMap::new();
    for (id, (a, b)) in table
        .values()
        .iter_rows()
        .zip(broadcast.values().iter_rows())
        .enumerate()
    {
        if a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()) {
            rows.insert(id, a.to_vec());
        }
    }
    Ok(Some(LocalUpdate {
        rows,
        weight: graph.num_edges() as f64,
        loss: stats.bpr_loss,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    fn config() -> TrainConfig {
        TrainConfig {
            dim: 4,
            server_layers: 2,
            cl_batch_size: 4,
            bpr_batch_size: 4,
            ..TrainConfig::default()
        }
    }

    fn state(edges: &[(usize, usize)], items: usize) -> ServerState {
        let shared = SharedData::from_edges(edges.iter().copied().collect());
        ServerState::init(items, &shared, &config()).unwrap()
    }

    #[test]
    fn empty_shared_graph_is_identity() {
        let mut s = state(&[], 6);
        assert!(s.server_user_table.is_none());
        let local = EmbeddingTable::xavier(6, 4, &mut rng_from_seed(1));
        server_refine(&mut s, &local, &config(), &mut rng_from_seed(2)).unwrap();
        assert!(s.item_table.bit_eq(&local));
    }

    #[test]
    fn no_objective_is_identity() {
        let mut s = state(&[(0, 1), (1, 2), (1, 1)], 6);
        let local = EmbeddingTable::xavier(6, 4, &mut rng_from_seed(1));
        let mut c = config();
        c.server_bpr = false;
        c.loss.lambda_cl = 0.0;
        server_refine(&mut s, &local, &c, &mut rng_from_seed(2)).unwrap();
        assert!(s.item_table.bit_eq(&local));
    }

    #[test]
    fn contrastive_step_lowers_the_loss() {
        // two shared items, one CL step with a small learning rate
        let mut s = state(&[(0, 0), (0, 1), (1, 1)], 2);
        let local = EmbeddingTable::xavier(2, 4, &mut rng_from_seed(5));
        let mut c = config();
        c.server_bpr = false;
        c.loss.lambda_cl = 1.0;
        c.server_learning_rate = 1e-3;

        let cl_loss = |st: &ServerState, items: &EmbeddingTable| {
            let g = st.shared_graph.as_ref().unwrap();
            let inf = infer(g, st.server_user_table.as_ref().unwrap(), items, &c.server_spec()).unwrap();
            let global: BTreeMap<usize, Vec<f64>> =
                (0..2).map(|i| (i, inf.items.row(g.item_pos(i).unwrap()).to_vec())).collect();
            infonce_cl_loss_grad(&local, &global, &[0, 1], &c.loss).unwrap().loss
        };
        let before = cl_loss(&s, &local);
        let stats = server_refine(&mut s, &local, &c, &mut rng_from_seed(3)).unwrap();
        assert_eq!(stats.steps, 1);
        let after = cl_loss(&s, &s.item_table.clone());
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn refinement_touches_only_reachable_rows() {
        let mut s = state(&[(0, 0), (1, 1), (1, 2)], 8);
        let local = EmbeddingTable::xavier(8, 4, &mut rng_from_seed(1));
        let mut c = config();
        c.server_bpr = false;
        c.loss.lambda_cl = 0.5;
        server_refine(&mut s, &local, &c, &mut rng_from_seed(2)).unwrap();
        for id in 3..8 {
            assert_eq!(s.item_table.get(id), local.get(id));
        }
        assert_ne!(s.item_table.get(0), local.get(0));
    }

    #[test]
    fn server_as_client_reports_changed_rows() {
        let mut s = state(&[(0, 0), (1, 1), (1, 2)], 8);
        let broadcast = s.item_table.clone();
        let up = server_client_update(&mut s, &broadcast, &config(), &mut rng_from_seed(4))
            .unwrap()
            .unwrap();
        assert_eq!(up.weight, 3.0);
        assert!(!up.rows.is_empty());
        assert!(up.rows.keys().all(|&k| k < 8));
    }
}
