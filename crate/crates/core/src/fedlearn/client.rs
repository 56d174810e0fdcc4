//! Client-side state and local LGC + BPR training.

use std::collections::BTreeMap;

use rand::Rng as _;

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::{infer, propagate_adjoint, BipartiteGraph, EmbeddingTable, GradAccumulator, Matrix, RowSource};
use crate::losses::{bpr_loss_grad, BprTriple, LossConfig};
use crate::seed::Rng;

/// A client's private model and data. Nothing here is sent to the server
/// except the item rows returned by [`local_train`].
#[derive(Debug, Clone)]
pub struct ClientState {
    user: usize,
    user_embedding: Vec<f64>,
    /// Items the client trains on.
    items: Vec<usize>,
    /// Every train item of the user; negatives are drawn outside this set.
    known_items: Vec<usize>,
    ego_graph: Option<BipartiteGraph>,
}

impl ClientState {
    pub fn new(user: usize, user_embedding: Vec<f64>, items: Vec<usize>, known_items: Vec<usize>) -> Result<Self> {
        let mut items = items;
        items.sort_unstable();
        items.dedup();
        let mut known_items = known_items;
        known_items.sort_unstable();
        known_items.dedup();
        if !items.iter().all(|i| known_items.binary_search(i).is_ok()) {
            return Err(Error::InvalidArgument(format!(
                "client {user}: training items must be among its known items"
            )));
        }
        let ego_graph = if items.is_empty() {
            None
        } else {
            Some(BipartiteGraph::build(items.iter().map(|&i| (user, i)))?)
        };
        Ok(ClientState {
            user,
            user_embedding,
            items,
            known_items,
            ego_graph,
        })
    }

    pub fn user(&self) -> usize {
        self.user
    }

    pub fn user_embedding(&self) -> &[f64] {
        &self.user_embedding
    }

    pub fn set_user_embedding(&mut self, v: Vec<f64>) {
        self.user_embedding = v;
    }

    pub fn items(&self) -> &[usize] {
        &self.items
    }

    pub fn known_items(&self) -> &[usize] {
        &self.known_items
    }

    pub fn ego_graph(&self) -> Option<&BipartiteGraph> {
        self.ego_graph.as_ref()
    }

    /// Drops withdrawn items from both the training set and the known set.
    pub fn withdraw(&mut self, withdrawn: &[usize]) -> Result<()> {
        let keep = |v: &[usize]| -> Vec<usize> { v.iter().copied().filter(|i| !withdrawn.contains(i)).collect() };
        let (items, known) = (keep(&self.items), keep(&self.known_items));
        *self = ClientState::new(self.user, std::mem::take(&mut self.user_embedding), items, known)?;
        Ok(())
    }

    /// The user representation the client scores items with: its LGC
    /// output on the graph of all its known items, or the raw embedding if
    /// it has none.
    pub fn inference_embedding(&self, item_table: &EmbeddingTable, config: &TrainConfig) -> Result<Vec<f64>> {
        if self.known_items.is_empty() {
            return Ok(self.user_embedding.clone());
        }
        let graph = BipartiteGraph::build(self.known_items.iter().map(|&i| (self.user, i)))?;
        let users = single(self.user, &self.user_embedding);
        let out = infer(&graph, &users, item_table, &config.client_spec())?;
        Ok(out.users.row(0).to_vec())
    }
}

fn single(id: usize, row: &[f64]) -> BTreeMap<usize, Vec<f64>> {
    [(id, row.to_vec())].into_iter().collect()
}

/// Rows of a client's copy of the item table that differ from the broadcast.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub rows: BTreeMap<usize, Vec<f64>>,
    /// Aggregation weight `|D_u|`.
    pub weight: f64,
    pub loss: f64,
}

impl LocalUpdate {
    /// The full local table `V_u`.
    pub fn to_table(&self, broadcast: &EmbeddingTable) -> Result<EmbeddingTable> {
        let mut t = broadcast.clone();
        for (&id, row) in &self.rows {
            t.get_mut(id)
                .ok_or(Error::MissingRow { kind: "item", id })?
                .copy_from_slice(row);
        }
        Ok(t)
    }
}

/// Item rows with a sparse overlay on a base table.
pub(crate) struct Overlay<'a> {
    pub base: &'a EmbeddingTable,
    pub rows: &'a BTreeMap<usize, Vec<f64>>,
}

impl RowSource for Overlay<'_> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn row(&self, id: usize) -> Option<&[f64]> {
        match self.rows.get(&id) {
            Some(r) => Some(r),
            None => self.base.get(id),
        }
    }
}

pub(crate) fn sample_negative(rng: &mut Rng, num_items: usize, exclude: &[usize]) -> Option<usize> {
    if exclude.len() >= num_items {
        return None;
    }
    loop {
        let j = rng.gen_range(0..num_items);
        if exclude.binary_search(&j).is_err() {
            return Some(j);
        }
    }
}

/// Local training from the broadcast table.
///
/// Each epoch runs one forward pass of the L-layer LGC on the ego graph,
/// computes BPR over every training item with freshly sampled negatives, and
/// takes one SGD step on `u_u` and the touched item rows. Items outside the
/// ego graph (the negatives) are scored with their raw rows. Returns `None`
/// for a client with nothing to train on.
pub fn local_train(
    client: &mut ClientState,
    broadcast: &EmbeddingTable,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<Option<LocalUpdate>> {
    let Some(graph) = client.ego_graph.clone() else {
        return Ok(None);
    };
    let spec = config.client_spec();
    let num_items = broadcast.rows();
    let dim = broadcast.dim();
    let k = config.loss.negatives_per_positive;
    let lambda = config.loss.lambda_reg;
    let rank_only = LossConfig {
        lambda_reg: 0.0,
        ..config.loss.clone()
    };
    let mut rows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut last_loss = 0.0;

    for _ in 0..config.local_epochs {
        let mut negatives = Vec::with_capacity(client.items.len() * k);
        for _ in 0..client.items.len() * k {
            let j = sample_negative(rng, num_items, &client.known_items).ok_or_else(|| {
                Error::InvalidArgument(format!("user {} interacted with every item", client.user))
            })?;
            negatives.push(j);
        }
        let triples = BprTriple::expand(client.user, &client.items, &negatives, k)?;

        let users = single(client.user, &client.user_embedding);
        let params = Overlay { base: broadcast, rows: &rows };
        let inferred = infer(&graph, &users, &params, &spec)?;

        // final item rows: propagated for ego items, raw for negatives
        let mut finals: BTreeMap<usize, Vec<f64>> = graph
            .item_ids()
            .iter()
            .enumerate()
            .map(|(pos, &i)| (i, inferred.items.row(pos).to_vec()))
            .collect();
        for &j in &negatives {
            finals
                .entry(j)
                .or_insert_with(|| params.row(j).expect("dense item table").to_vec());
        }
        let final_user = single(client.user, inferred.users.row(0));
        let out = bpr_loss_grad(&final_user, &finals, &triples, &rank_only)?;

        let mut up_users = Matrix::zeros(1, dim);
        if let Some(g) = out.users.get(client.user) {
            up_users.row_mut(0).copy_from_slice(g);
        }
        let mut up_items = Matrix::zeros(graph.num_items(), dim);
        let mut item_grads = GradAccumulator::new(dim);
        for (&id, g) in out.items.iter() {
            match graph.item_pos(id) {
                Some(pos) => up_items.row_mut(pos).copy_from_slice(g),
                None => item_grads.add(id, g, 1.0),
            }
        }
        let (gu, gi) = propagate_adjoint(&graph, &spec, &up_users, &up_items)?;
        for (pos, &id) in graph.item_ids().iter().enumerate() {
            item_grads.add(id, gi.row(pos), 1.0);
        }
        let mut user_grad = gu.row(0).to_vec();

        let mut loss = out.loss;
        if lambda > 0.0 {
            for (g, p) in user_grad.iter_mut().zip(&client.user_embedding) {
                *g += 2.0 * lambda * p;
            }
            loss += lambda * client.user_embedding.iter().map(|v| v * v).sum::<f64>();
            let touched: Vec<usize> = item_grads.ids().collect();
            for id in touched {
                let row = params.row(id).expect("dense item table").to_vec();
                loss += lambda * row.iter().map(|v| v * v).sum::<f64>();
                item_grads.add(id, &row, 2.0 * lambda);
            }
        }
        last_loss = loss;

        let lr = config.learning_rate;
        for (p, g) in client.user_embedding.iter_mut().zip(&user_grad) {
            *p -= lr * g;
        }
        for (&id, g) in item_grads.iter() {
            let row = rows
                .entry(id)
                .or_insert_with(|| broadcast.get(id).expect("dense item table").to_vec());
            for (p, gv) in row.iter_mut().zip(g) {
                *p -= lr * gv;
            }
        }
    }

    if !client.user_embedding.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("user {} embedding", client.user)));
    }
    Ok(Some(LocalUpdate {
        rows,
        weight: client.items.len() as f64,
        loss: last_loss,
    }))
}
