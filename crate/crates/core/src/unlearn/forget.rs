//! Unsharing on the server graph, the forgotten graph and the views derived
//! from it.

use std::collections::BTreeMap;

use crate::datasets::SharingPartition;
use crate::error::{Error, Result};
use crate::fedlearn::{ServerState, SnapshotStore};
use crate::graph::{combine_layers, item_views_with_fallback, propagate, BipartiteGraph, EmbeddingTable, Matrix, PropagationSpec, RowSource};
use crate::losses::score;

/// Removes every requested `(user, item)` edge from the shared graph.
/// Nodes left without edges disappear, and the server user table keeps only
/// users still in the graph. The item table is not touched. Returns the
/// number of removed edges.
pub fn apply_unshare(state: &mut ServerState, partition: &SharingPartition) -> Result<usize> {
    let removed = partition.unlearn_edges();
    if removed.is_empty() {
        return Ok(0);
    }
    let Some(graph) = state.shared_graph.as_ref() else {
        let &(user, item) = removed.first().expect("non-empty");
        return Err(Error::NotShared { user, item });
    };
    if let Some(&(user, item)) = removed.iter().find(|&&(u, i)| !graph.has_edge(u, i)) {
        return Err(Error::NotShared { user, item });
    }
    let next = graph.without_edges(&removed)?;
    state.server_user_table = match (&next, &state.server_user_table) {
        (Some(g), Some(t)) => Some(t.restrict(g.user_ids())?),
        _ => None,
    };
    state.shared_graph = next;
    Ok(removed.len())
}

/// `G_f`: every user's withdrawn items as edges.
pub fn build_forgotten_graph(partition: &SharingPartition) -> Result<BipartiteGraph> {
    let edges = partition.unlearn_edges();
    if edges.is_empty() {
        return Err(Error::Empty("no unshare requests: nothing to unlearn".into()));
    }
    BipartiteGraph::build(edges)
}

/// Per forgotten item, one view per snapshot (oldest first).
#[derive(Debug, Clone, PartialEq)]
pub struct ForgottenViewSet {
    pub rounds: Vec<usize>,
    pub views: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl ForgottenViewSet {
    pub fn items(&self) -> Vec<usize> {
        self.views.keys().copied().collect()
    }

    /// Mean over forgotten items and their views of `cos(table_i, view)`.
    pub fn mean_cosine(&self, table: &EmbeddingTable) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for (&i, vs) in &self.views {
            let row = table.get(i).ok_or(Error::MissingRow { kind: "item", id: i })?;
            for v in vs {
                total += score(row, v)?;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Empty("no forgotten views".into()));
        }
        Ok(total / n as f64)
    }
}

/// Keeps the most recent `m` snapshots (`0` means all of them).
pub fn recent_snapshots(snapshots: &SnapshotStore, m: usize) -> Result<Vec<(usize, &EmbeddingTable)>> {
    if snapshots.is_empty() {
        return Err(Error::Prerequisite("no snapshots recorded; run training first".into()));
    }
    let all: Vec<_> = snapshots.iter().map(|s| (s.round, &s.table)).collect();
    if m > all.len() {
        return Err(Error::InvalidArgument(format!(
            "{m} snapshots requested but only {} stored",
            all.len()
        )));
    }
    let skip = if m == 0 { 0 } else { all.len() - m };
    Ok(all.into_iter().skip(skip).collect())
}

/// LGC inference on `G_f` seeded from each snapshot. User rows start as the
/// mean of the user's withdrawn items' snapshot rows.
pub fn forgotten_views(
    graph_f: &BipartiteGraph,
    snapshots: &[(usize, &EmbeddingTable)],
    spec: &PropagationSpec,
) -> Result<ForgottenViewSet> {
    if snapshots.is_empty() {
        return Err(Error::Prerequisite("no snapshots recorded; run training first".into()));
    }
    let mut views: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for &(_, table) in snapshots {
        let dim = table.dim();
        let mut users = Matrix::zeros(graph_f.num_users(), dim);
        for upos in 0..graph_f.num_users() {
            let nbrs = graph_f.user_neighbors_pos(upos);
            let row = users.row_mut(upos);
            for &ipos in nbrs {
                let id = graph_f.item_ids()[ipos];
                let v = table.get(id).ok_or(Error::MissingRow { kind: "item", id })?;
                for (a, b) in row.iter_mut().zip(v) {
                    *a += b / nbrs.len() as f64;
                }
            }
        }
        let user_rows = EmbeddingTable::keyed(graph_f.user_ids().to_vec(), users)?;
        let stack = propagate(graph_f, &user_rows, table, spec)?;
        let items = combine_layers(&stack.items, spec)?;
        for (ipos, &id) in graph_f.item_ids().iter().enumerate() {
            views.entry(id).or_default().push(items.row(ipos).to_vec());
        }
    }
    Ok(ForgottenViewSet {
        rounds: snapshots.iter().map(|s| s.0).collect(),
        views,
    })
}

/// The raw snapshot rows of the forgotten items, without inference on `G_f`.
pub fn snapshot_views(graph_f: &BipartiteGraph, snapshots: &[(usize, &EmbeddingTable)]) -> Result<ForgottenViewSet> {
    if snapshots.is_empty() {
        return Err(Error::Prerequisite("no snapshots recorded; run training first".into()));
    }
    let mut views: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for &(_, table) in snapshots {
        for &id in graph_f.item_ids() {
            let v = table.get(id).ok_or(Error::MissingRow { kind: "item", id })?;
            views.entry(id).or_default().push(v.to_vec());
        }
    }
    Ok(ForgottenViewSet {
        rounds: snapshots.iter().map(|s| s.0).collect(),
        views,
    })
}

/// Propagation on the updated shared graph seeded from the local views and
/// the server user table; items outside the graph keep their local view.
pub fn new_global_views<U>(
    graph_s: Option<&BipartiteGraph>,
    local_view_table: &EmbeddingTable,
    server_user_table: &U,
    spec: &PropagationSpec,
) -> Result<EmbeddingTable>
where
    U: RowSource + ?Sized,
{
    item_views_with_fallback(graph_s, server_user_table, local_view_table, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{ShareGroup, UserShare};
    use crate::fedlearn::{SharedData, TrainConfig};
    use crate::seed::rng_from_seed;

    fn share(local: &[usize], share: &[usize], unlearn: &[usize]) -> UserShare {
        UserShare {
            group: if share.is_empty() { ShareGroup::None } else { ShareGroup::Partial },
            local: local.to_vec(),
            share: share.to_vec(),
            unlearn: unlearn.to_vec(),
        }
    }

    fn server(p: &SharingPartition, items: usize) -> ServerState {
        let cfg = TrainConfig { dim: 3, ..TrainConfig::default() };
        ServerState::init(items, &SharedData::from_partition(p), &cfg).unwrap()
    }

    #[test]
    fn unsharing_a_whole_user_drops_the_node() {
        let p = SharingPartition::new(vec![share(&[], &[0, 1], &[0, 1]), share(&[2], &[1, 3], &[])]);
        let mut s = server(&p, 5);
        let before = s.item_table.clone();
        assert_eq!(apply_unshare(&mut s, &p).unwrap(), 2);
        let g = s.shared_graph.as_ref().unwrap();
        assert_eq!(g.user_ids(), &[1]);
        assert_eq!(g.num_edges(), 2);
        assert_eq!(s.server_user_table.as_ref().unwrap().ids(), vec![1]);
        assert!(s.item_table.bit_eq(&before));
    }

    #[test]
    fn empty_requests_are_identity() {
        let p = SharingPartition::new(vec![share(&[], &[0, 1], &[])]);
        let mut s = server(&p, 3);
        let g = s.shared_graph.clone();
        assert_eq!(apply_unshare(&mut s, &p).unwrap(), 0);
        assert_eq!(s.shared_graph, g);
    }

    #[test]
    fn request_for_unshared_edge_is_rejected() {
        let shared = SharingPartition::new(vec![share(&[], &[0], &[])]);
        let mut s = server(&shared, 3);
        let bogus = SharingPartition::new(vec![share(&[], &[0], &[2])]);
        assert!(matches!(apply_unshare(&mut s, &bogus), Err(Error::NotShared { user: 0, item: 2 })));
    }

    #[test]
    fn forgotten_graph_shapes() {
        let p = SharingPartition::new(vec![share(&[], &[3, 4], &[3, 4]), share(&[], &[1], &[])]);
        let g = build_forgotten_graph(&p).unwrap();
        assert_eq!((g.num_users() + g.num_items(), g.num_edges()), (3, 2));

        let p = SharingPartition::new(vec![share(&[], &[3], &[3]), share(&[], &[3], &[3])]);
        let g = build_forgotten_graph(&p).unwrap();
        assert_eq!(g.item_degree(g.item_pos(3).unwrap()), 2);

        let none = SharingPartition::new(vec![share(&[1], &[], &[])]);
        assert!(build_forgotten_graph(&none).is_err());
    }

    #[test]
    fn single_edge_forgotten_view_by_hand() {
        // L=1, α=(0.5, 0.5): view = 0.5·v_i + 0.5·u_init, u_init = v_i
        let g = BipartiteGraph::build([(0, 1)]).unwrap();
        let snap = EmbeddingTable::from_matrix(Matrix::from_vec(2, 2, vec![9.0, 9.0, 0.3, -0.8]).unwrap());
        let spec = PropagationSpec::with_alphas(vec![0.5, 0.5]).unwrap();
        let f = forgotten_views(&g, &[(4, &snap)], &spec).unwrap();
        let u_init = [0.3, -0.8];
        let expect: Vec<f64> = [0.3, -0.8].iter().zip(u_init).map(|(v, u)| 0.5 * v + 0.5 * u).collect();
        assert_eq!(f.views[&1], vec![expect]);
        assert_eq!(f.rounds, vec![4]);
    }

    #[test]
    fn zero_layers_return_snapshot_rows() {
        let g = BipartiteGraph::build([(0, 0), (1, 0), (1, 2)]).unwrap();
        let snap = EmbeddingTable::xavier(3, 4, &mut rng_from_seed(2));
        let f = forgotten_views(&g, &[(1, &snap), (2, &snap)], &PropagationSpec::uniform(0)).unwrap();
        for (&i, vs) in &f.views {
            assert_eq!(vs.len(), 2);
            assert_eq!(vs[0], vs[1]);
            assert_eq!(vs[0].as_slice(), snap.get(i).unwrap());
        }
    }

    #[test]
    fn recent_snapshot_window() {
        let mut store = SnapshotStore::new(3).unwrap();
        assert!(recent_snapshots(&store, 0).is_err());
        let t = EmbeddingTable::zeros(2, 2);
        for r in 1..=3 {
            store.push(r, &t).unwrap();
        }
        let rounds = |m| recent_snapshots(&store, m).unwrap().iter().map(|s| s.0).collect::<Vec<_>>();
        assert_eq!(rounds(0), vec![1, 2, 3]);
        assert_eq!(rounds(2), vec![2, 3]);
        assert!(recent_snapshots(&store, 4).is_err());
    }

    #[test]
    fn global_views_fall_back_outside_the_graph() {
        let g = BipartiteGraph::build([(0, 0)]).unwrap();
        let local = EmbeddingTable::xavier(3, 2, &mut rng_from_seed(1));
        let users = EmbeddingTable::xavier_keyed(vec![0], 2, &mut rng_from_seed(2)).unwrap();
        let out = new_global_views(Some(&g), &local, &users, &PropagationSpec::uniform(0)).unwrap();
        assert!(out.bit_eq(&local));
        let out = new_global_views(Some(&g), &local, &users, &PropagationSpec::uniform(2)).unwrap();
        assert_eq!(out.get(1), local.get(1));
        assert_ne!(out.get(0), local.get(0));
    }
}
