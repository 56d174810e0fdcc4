//! FedAvg: `V_s = Σ_u (|D_u| / Σ_v |D_v|) · V_u`, accumulated in ascending
//! participant order so the result does not depend on arrival order.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::client::LocalUpdate;
use crate::error::{Error, Result};
use crate::graph::{EmbeddingTable, Matrix};

/// A FedAvg contributor. Users sort before the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Participant {
    User(usize),
    /// The server acting as a client over the shared data.
    Server,
}

fn coefficients<K: Ord>(weights: impl Iterator<Item = (K, f64)>) -> Result<Vec<f64>> {
    let w: Vec<f64> = weights.map(|(_, w)| w).collect();
    if w.is_empty() {
        return Err(Error::Empty("no client updates to aggregate".into()));
    }
    if w.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Error::InvalidArgument("aggregation weights must be positive".into()));
    }
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

/// Row-wise weighted average with `row_of(k, r)` giving participant `k`'s row.
fn average<'a, F>(rows: usize, dim: usize, coef: &[f64], row_of: F) -> Matrix
where
    F: Fn(usize, usize) -> &'a [f64] + Sync,
{
    let mut out = Matrix::zeros(rows, dim);
    out.as_mut_slice()
        .par_chunks_mut(dim.max(1))
        .enumerate()
        .for_each(|(r, acc)| {
            // a row nobody changed is passed through exactly
            let first = row_of(0, r);
            if (1..coef.len()).all(|k| bits_eq(row_of(k, r), first)) {
                acc.copy_from_slice(first);
                return;
            }
            for (k, &c) in coef.iter().enumerate() {
                for (a, x) in acc.iter_mut().zip(row_of(k, r)) {
                    *a += c * x;
                }
            }
        });
    out
}

fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// FedAvg over full tables.
pub fn fedavg<K: Ord + Copy>(
    updates: &BTreeMap<K, EmbeddingTable>,
    weights: &BTreeMap<K, f64>,
) -> Result<EmbeddingTable> {
    let first = updates
        .values()
        .next()
        .ok_or_else(|| Error::Empty("no client updates to aggregate".into()))?;
    let (rows, dim) = (first.rows(), first.dim());
    if updates.values().any(|t| t.rows() != rows || t.dim() != dim || t.is_keyed()) {
        return Err(Error::Shape("client tables differ in shape".into()));
    }
    if updates.len() != weights.len() || updates.keys().any(|k| !weights.contains_key(k)) {
        return Err(Error::InvalidArgument("every update needs exactly one weight".into()));
    }
    let coef = coefficients(updates.keys().map(|k| (*k, weights[k])))?;
    let tables: Vec<&EmbeddingTable> = updates.values().collect();
    let out = average(rows, dim, &coef, |k, r| tables[k].values().row(r));
    Ok(EmbeddingTable::from_matrix(out))
}

/// FedAvg over sparse client updates on top of the broadcast table.
/// Bitwise equal to [`fedavg`] on the expanded tables.
pub fn fedavg_sparse(
    broadcast: &EmbeddingTable,
    updates: &BTreeMap<Participant, LocalUpdate>,
) -> Result<EmbeddingTable> {
    let coef = coefficients(updates.iter().map(|(k, u)| (*k, u.weight)))?;
    let dim = broadcast.dim();
    for u in updates.values() {
        for (&id, row) in &u.rows {
            if id >= broadcast.rows() || row.len() != dim {
                return Err(Error::Shape(format!("update row {id} does not fit the item table")));
            }
        }
    }
    let ups: Vec<&LocalUpdate> = updates.values().collect();
    let out = average(broadcast.rows(), dim, &coef, |k, r| match ups[k].rows.get(&r) {
        Some(row) => row.as_slice(),
        None => broadcast.values().row(r),
    });
    Ok(EmbeddingTable::from_matrix(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> EmbeddingTable {
        EmbeddingTable::from_matrix(Matrix::from_vec(1, 1, vec![v]).unwrap())
    }

    #[test]
    fn weighted_average_examples() {
        let ups: BTreeMap<_, _> = [(1, scalar(0.0)), (2, scalar(4.0))].into_iter().collect();
        let w: BTreeMap<_, _> = [(1, 1.0), (2, 3.0)].into_iter().collect();
        assert_eq!(fedavg(&ups, &w).unwrap().get(0).unwrap(), &[3.0]);

        let one: BTreeMap<_, _> = [(5, scalar(1.7))].into_iter().collect();
        let w1: BTreeMap<_, _> = [(5, 2.0)].into_iter().collect();
        assert_eq!(fedavg(&one, &w1).unwrap().get(0).unwrap(), &[1.7]);

        let empty: BTreeMap<usize, EmbeddingTable> = BTreeMap::new();
        assert!(fedavg(&empty, &BTreeMap::new()).is_err());
        let zero: BTreeMap<_, _> = [(5, 0.0)].into_iter().collect();
        assert!(fedavg(&one, &zero).is_err());
    }

    #[test]
    fn sparse_matches_dense_bitwise() {
        let base = EmbeddingTable::from_matrix(
            Matrix::from_vec(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap(),
        );
        let mut sparse = BTreeMap::new();
        sparse.insert(
            Participant::User(4),
            LocalUpdate {
                rows: [(1, vec![1.0, -1.0])].into_iter().collect(),
                weight: 3.0,
                loss: 0.0,
            },
        );
        sparse.insert(
            Participant::Server,
            LocalUpdate {
                rows: [(0, vec![0.7, 0.9]), (2, vec![-0.3, 0.25])].into_iter().collect(),
                weight: 5.0,
                loss: 0.0,
            },
        );
        let dense: BTreeMap<_, _> = sparse
            .iter()
            .map(|(k, u)| (*k, u.to_table(&base).unwrap()))
            .collect();
        let w: BTreeMap<_, _> = sparse.iter().map(|(k, u)| (*k, u.weight)).collect();
        assert!(fedavg_sparse(&base, &sparse).unwrap().bit_eq(&fedavg(&dense, &w).unwrap()));
    }

    #[test]
    fn identical_tables_pass_through_exactly() {
        let x = EmbeddingTable::from_matrix(Matrix::from_vec(2, 2, vec![0.1, 0.7, -0.3, 1e-3]).unwrap());
        let ups: BTreeMap<_, _> = (0..3).map(|k| (k, x.clone())).collect();
        let w: BTreeMap<_, _> = [(0, 1.0), (1, 3.0), (2, 7.0)].into_iter().collect();
        assert!(fedavg(&ups, &w).unwrap().bit_eq(&x));
    }
}
