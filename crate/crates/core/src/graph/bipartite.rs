use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Sparse user–item graph stored in both orientations.
///
/// Nodes are addressed by global id; internally each node has a local
/// position (its index in `user_ids` / `item_ids`). Only nodes with at least
/// one edge are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteGraph {
    user_ids: Vec<usize>,
    item_ids: Vec<usize>,
    // user position -> item positions
    user_ptr: Vec<usize>,
    user_adj: Vec<usize>,
    // item position -> user positions
    item_ptr: Vec<usize>,
    item_adj: Vec<usize>,
}

impl BipartiteGraph {
    /// Builds a graph from `(user_id, item_id)` edges. Duplicates collapse.
    pub fn build<I>(edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let edges: BTreeSet<(usize, usize)> = edges.into_iter().collect();
        if edges.is_empty() {
            return Err(Error::Empty("bipartite graph needs at least one edge".into()));
        }
        let user_ids: Vec<usize> = {
            let mut v: Vec<usize> = edges.iter().map(|e| e.0).collect();
            v.dedup();
            v
        };
        let item_ids: Vec<usize> = {
            let set: BTreeSet<usize> = edges.iter().map(|e| e.1).collect();
            set.into_iter().collect()
        };

        let mut user_ptr = vec![0usize; user_ids.len() + 1];
        let mut item_deg = vec![0usize; item_ids.len()];
        let mut user_adj = Vec::with_capacity(edges.len());
        let mut upos = 0;
        for &(u, i) in &edges {
            while user_ids[upos] != u {
                upos += 1;
            }
            let ipos = item_ids.binary_search(&i).expect("item collected above");
            user_adj.push(ipos);
            user_ptr[upos + 1] += 1;
            item_deg[ipos] += 1;
        }
        for k in 0..user_ids.len() {
            user_ptr[k + 1] += user_ptr[k];
        }

        let mut item_ptr = vec![0usize; item_ids.len() + 1];
        for k in 0..item_ids.len() {
            item_ptr[k + 1] = item_ptr[k] + item_deg[k];
        }
        let mut fill = item_ptr.clone();
        let mut item_adj = vec![0usize; edges.len()];
        // users visited in ascending order, so each item's user list is sorted
        for upos in 0..user_ids.len() {
            for &ipos in &user_adj[user_ptr[upos]..user_ptr[upos + 1]] {
                item_adj[fill[ipos]] = upos;
                fill[ipos] += 1;
            }
        }

        Ok(BipartiteGraph {
            user_ids,
            item_ids,
            user_ptr,
            user_adj,
            item_ptr,
            item_adj,
        })
    }

    pub fn user_ids(&self) -> &[usize] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[usize] {
        &self.item_ids
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn num_edges(&self) -> usize {
        self.user_adj.len()
    }

    pub fn user_pos(&self, user: usize) -> Option<usize> {
        self.user_ids.binary_search(&user).ok()
    }

    pub fn item_pos(&self, item: usize) -> Option<usize> {
        self.item_ids.binary_search(&item).ok()
    }

    pub fn has_edge(&self, user: usize, item: usize) -> bool {
        match (self.user_pos(user), self.item_pos(item)) {
            (Some(u), Some(i)) => self.user_neighbors_pos(u).binary_search(&i).is_ok(),
            _ => false,
        }
    }

    /// Item positions adjacent to the user at position `upos`.
    pub fn user_neighbors_pos(&self, upos: usize) -> &[usize] {
        &self.user_adj[self.user_ptr[upos]..self.user_ptr[upos + 1]]
    }

    /// User positions adjacent to the item at position `ipos`.
    pub fn item_neighbors_pos(&self, ipos: usize) -> &[usize] {
        &self.item_adj[self.item_ptr[ipos]..self.item_ptr[ipos + 1]]
    }

    pub fn user_degree(&self, upos: usize) -> usize {
        self.user_ptr[upos + 1] - self.user_ptr[upos]
    }

    pub fn item_degree(&self, ipos: usize) -> usize {
        self.item_ptr[ipos + 1] - self.item_ptr[ipos]
    }

    pub fn user_degrees(&self) -> Vec<usize> {
        (0..self.num_users()).map(|u| self.user_degree(u)).collect()
    }

    pub fn item_degrees(&self) -> Vec<usize> {
        (0..self.num_items()).map(|i| self.item_degree(i)).collect()
    }

    /// Global item ids adjacent to a global user id.
    pub fn items_of(&self, user: usize) -> Vec<usize> {
        self.user_pos(user)
            .map(|u| {
                self.user_neighbors_pos(u)
                    .iter()
                    .map(|&i| self.item_ids[i])
                    .collect()
            })
            .unwrap_or_default()
    }

    /// All edges as global `(user, item)` pairs in ascending order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_edges());
        for (upos, &u) in self.user_ids.iter().enumerate() {
            for &ipos in self.user_neighbors_pos(upos) {
                out.push((u, self.item_ids[ipos]));
            }
        }
        out
    }

    /// Graph without the given edges; `Ok(None)` when nothing remains.
    pub fn without_edges(&self, removed: &BTreeSet<(usize, usize)>) -> Result<Option<Self>> {
        let remaining: Vec<(usize, usize)> = self
            .edges()
            .into_iter()
            .filter(|e| !removed.contains(e))
            .collect();
        if remaining.is_empty() {
            return Ok(None);
        }
        BipartiteGraph::build(remaining).map(Some)
    }
}
