//! Light graph convolution: parameter-free symmetric-normalized propagation
//! with weighted layer combination, and the exact adjoint of that linear map.
//!
//! One layer maps `(U, I)` to `(A I, Aᵀ U)` with
//! `A[u,i] = 1 / sqrt(|N(u)| |N(i)|)`. The stacked operator
//! `P = [[0, A], [Aᵀ, 0]]` is symmetric, so the adjoint of
//! `X ↦ Σ_l α_l P^l X` is the same polynomial applied to the upstream
//! gradient; it is evaluated with Horner's rule.

use serde::{Deserialize, Serialize};

use super::bipartite::BipartiteGraph;
use super::embedding::{EmbeddingTable, Matrix, RowSource};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationSpec {
    alphas: Vec<f64>,
}

impl PropagationSpec {
    /// Uniform weights `1 / (L + 1)`.
    pub fn uniform(layers: usize) -> Self {
        let w = 1.0 / (layers + 1) as f64;
        PropagationSpec {
            alphas: vec![w; layers + 1],
        }
    }

    pub fn with_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::InvalidArgument("need at least alpha_0".into()));
        }
        if alphas.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::InvalidArgument(
                "layer weights must be finite and non-negative".into(),
            ));
        }
        Ok(PropagationSpec { alphas })
    }

    pub fn layers(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }
}

/// Per-layer embeddings in graph-local row order; index 0 is the input layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    pub users: Vec<Matrix>,
    pub items: Vec<Matrix>,
}

fn gather<S: RowSource + ?Sized>(
    ids: &[usize],
    source: &S,
    dim: usize,
    kind: &'static str,
) -> Result<Matrix> {
    let mut out = Matrix::zeros(ids.len(), dim);
    for (pos, &id) in ids.iter().enumerate() {
        let row = source.row(id).ok_or(Error::MissingRow { kind, id })?;
        if row.len() != dim {
            return Err(Error::Shape(format!(
                "{kind} {id} has dimension {} (expected {dim})",
                row.len()
            )));
        }
        out.row_mut(pos).copy_from_slice(row);
    }
    Ok(out)
}

/// One application of the normalized adjacency: returns `(A I, Aᵀ U)`.
fn step(graph: &BipartiteGraph, users: &Matrix, items: &Matrix) -> (Matrix, Matrix) {
    let dim = users.cols();
    let ud: Vec<f64> = graph
        .user_degrees()
        .into_iter()
        .map(|d| (d as f64).sqrt())
        .collect();
    let id: Vec<f64> = graph
        .item_degrees()
        .into_iter()
        .map(|d| (d as f64).sqrt())
        .collect();

    let mut next_users = Matrix::zeros(graph.num_users(), dim);
    for upos in 0..graph.num_users() {
        let out = next_users.row_mut(upos);
        for &ipos in graph.user_neighbors_pos(upos) {
            let w = 1.0 / (ud[upos] * id[ipos]);
            for (o, v) in out.iter_mut().zip(items.row(ipos)) {
                *o += w * v;
            }
        }
    }
    let mut next_items = Matrix::zeros(graph.num_items(), dim);
    for ipos in 0..graph.num_items() {
        let out = next_items.row_mut(ipos);
        for &upos in graph.item_neighbors_pos(ipos) {
            let w = 1.0 / (id[ipos] * ud[upos]);
            for (o, v) in out.iter_mut().zip(users.row(upos)) {
                *o += w * v;
            }
        }
    }
    (next_users, next_items)
}

/// Runs `spec.layers()` propagation layers seeded from the two tables.
pub fn propagate<U, I>(
    graph: &BipartiteGraph,
    user_emb: &U,
    item_emb: &I,
    spec: &PropagationSpec,
) -> Result<LayerStack>
where
    U: RowSource + ?Sized,
    I: RowSource + ?Sized,
{
    let dim = item_emb.dim();
    let users0 = gather(graph.user_ids(), user_emb, dim, "user")?;
    let items0 = gather(graph.item_ids(), item_emb, dim, "item")?;
    Ok(propagate_local(graph, users0, items0, spec.layers()))
}

pub(crate) fn propagate_local(
    graph: &BipartiteGraph,
    users0: Matrix,
    items0: Matrix,
    layers: usize,
) -> LayerStack {
    let mut users = vec![users0];
    let mut items = vec![items0];
    for l in 0..layers {
        let (u, i) = step(graph, &users[l], &items[l]);
        users.push(u);
        items.push(i);
    }
    LayerStack { users, items }
}

/// `Σ_l α_l · layer_l`.
pub fn combine_layers(layers: &[Matrix], spec: &PropagationSpec) -> Result<Matrix> {
    if layers.len() != spec.alphas().len() {
        return Err(Error::Shape(format!(
            "{} layers for {} weights",
            layers.len(),
            spec.alphas().len()
        )));
    }
    let first = &layers[0];
    let mut out = Matrix::zeros(first.rows(), first.cols());
    for (layer, &alpha) in layers.iter().zip(spec.alphas()) {
        out.add_scaled(layer, alpha)?;
    }
    Ok(out)
}

/// Final (combined) user and item rows in graph-local order.
#[derive(Debug, Clone, PartialEq)]
pub struct Inferred {
    pub users: Matrix,
    pub items: Matrix,
}

pub fn infer<U, I>(
    graph: &BipartiteGraph,
    user_emb: &U,
    item_emb: &I,
    spec: &PropagationSpec,
) -> Result<Inferred>
where
    U: RowSource + ?Sized,
    I: RowSource + ?Sized,
{
    let stack = propagate(graph, user_emb, item_emb, spec)?;
    Ok(Inferred {
        users: combine_layers(&stack.users, spec)?,
        items: combine_layers(&stack.items, spec)?,
    })
}

/// `Jᵀ · upstream` for the propagation + combination map `J`.
///
/// Upstream gradients are in graph-local order (as produced by [`infer`]);
/// the returned gradients are with respect to the gathered input rows.
pub fn propagate_adjoint(
    graph: &BipartiteGraph,
    spec: &PropagationSpec,
    upstream_users: &Matrix,
    upstream_items: &Matrix,
) -> Result<(Matrix, Matrix)> {
    if upstream_users.rows() != graph.num_users() || upstream_items.rows() != graph.num_items() {
        return Err(Error::Shape(format!(
            "upstream {}/{} rows for a graph with {} users and {} items",
            upstream_users.rows(),
            upstream_items.rows(),
            graph.num_users(),
            graph.num_items()
        )));
    }
    if upstream_users.cols() != upstream_items.cols() {
        return Err(Error::Shape("user/item gradient widths differ".into()));
    }
    let alphas = spec.alphas();
    let last = alphas.len() - 1;
    let mut acc_u = upstream_users.scaled(alphas[last]);
    let mut acc_i = upstream_items.scaled(alphas[last]);
    for l in (0..last).rev() {
        let (mut u, mut i) = step(graph, &acc_u, &acc_i);
        u.add_scaled(upstream_users, alphas[l])?;
        i.add_scaled(upstream_items, alphas[l])?;
        acc_u = u;
        acc_i = i;
    }
    Ok((acc_u, acc_i))
}

/// Full item table whose rows for items in the graph are replaced by their
/// propagated views; items absent from the graph keep their input row.
pub fn item_views_with_fallback<U>(
    graph: Option<&BipartiteGraph>,
    user_emb: &U,
    item_table: &EmbeddingTable,
    spec: &PropagationSpec,
) -> Result<EmbeddingTable>
where
    U: RowSource + ?Sized,
{
    let mut out = item_table.clone();
    if let Some(graph) = graph {
        let inferred = infer(graph, user_emb, item_table, spec)?;
        for (ipos, &item) in graph.item_ids().iter().enumerate() {
            out.get_mut(item)
                .ok_or(Error::MissingRow { kind: "item", id: item })?
                .copy_from_slice(inferred.items.row(ipos));
        }
    }
    Ok(out)
}
