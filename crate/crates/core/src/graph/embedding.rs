//! Dense row-major matrices and id-keyed embedding tables.

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed::Rng;

/// Read access to d-dimensional rows keyed by a global user or item id.
pub trait RowSource {
    fn dim(&self) -> usize;
    fn row(&self, id: usize) -> Option<&[f64]>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scaled(&self, scale: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * scale).collect(),
        }
    }

    pub fn dot(&self, other: &Matrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum RowIndex {
    /// Row r holds id r.
    Dense,
    /// Row r holds `ids[r]`; ids sorted ascending.
    Keyed(Vec<usize>),
}

/// Embedding rows addressed by global id.
///
/// Item tables are dense over the whole item id space. The server-side user
/// table is keyed and covers only users whose data is shared.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    index: RowIndex,
    values: Matrix,
}

impl EmbeddingTable {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        EmbeddingTable {
            index: RowIndex::Dense,
            values: Matrix::zeros(rows, dim),
        }
    }

    pub fn from_matrix(values: Matrix) -> Self {
        EmbeddingTable {
            index: RowIndex::Dense,
            values,
        }
    }

    pub fn keyed(ids: Vec<usize>, values: Matrix) -> Result<Self> {
        if ids.len() != values.rows() {
            return Err(Error::Shape(format!(
                "{} ids for {} rows",
                ids.len(),
                values.rows()
            )));
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "keyed table ids must be strictly increasing".into(),
            ));
        }
        Ok(EmbeddingTable {
            index: RowIndex::Keyed(ids),
            values,
        })
    }

    /// Xavier-uniform rows in `(-a, a)` with `a = sqrt(6 / (d + d))`.
    pub fn xavier(rows: usize, dim: usize, rng: &mut Rng) -> Self {
        EmbeddingTable::from_matrix(xavier_matrix(rows, dim, rng))
    }

    pub fn xavier_keyed(ids: Vec<usize>, dim: usize, rng: &mut Rng) -> Result<Self> {
        let values = xavier_matrix(ids.len(), dim, rng);
        EmbeddingTable::keyed(ids, values)
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn is_keyed(&self) -> bool {
        matches!(self.index, RowIndex::Keyed(_))
    }

    pub fn ids(&self) -> Vec<usize> {
        match &self.index {
            RowIndex::Dense => (0..self.rows()).collect(),
            RowIndex::Keyed(ids) => ids.clone(),
        }
    }

    pub fn position(&self, id: usize) -> Option<usize> {
        match &self.index {
            RowIndex::Dense => (id < self.rows()).then_some(id),
            RowIndex::Keyed(ids) => ids.binary_search(&id).ok(),
        }
    }

    pub fn contains(&self, id: usize) -> bool {
        self.position(id).is_some()
    }

    pub fn get(&self, id: usize) -> Option<&[f64]> {
        self.position(id).map(|r| self.values.row(r))
    }

    pub fn get_mut(&mut self, id: usize) -> Option<&mut [f64]> {
        let r = self.position(id)?;
        Some(self.values.row_mut(r))
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Matrix {
        &mut self.values
    }

    /// Keep only the listed ids (which must exist); result is keyed.
    pub fn restrict(&self, ids: &[usize]) -> Result<EmbeddingTable> {
        let mut sorted = ids.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut values = Matrix::zeros(sorted.len(), self.dim());
        for (r, &id) in sorted.iter().enumerate() {
            let row = self.get(id).ok_or(Error::MissingRow { kind: "row", id })?;
            values.row_mut(r).copy_from_slice(row);
        }
        EmbeddingTable::keyed(sorted, values)
    }

    pub fn all_finite(&self) -> bool {
        self.values.as_slice().iter().all(|v| v.is_finite())
    }

    /// Bitwise equality of ids and values.
    pub fn bit_eq(&self, other: &EmbeddingTable) -> bool {
        self.index == other.index
            && self.values.rows() == other.values.rows()
            && self.values.cols() == other.values.cols()
            && self
                .values
                .as_slice()
                .iter()
                .zip(other.values.as_slice())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// `self[id] -= lr * grad` for every row in the accumulator.
    pub fn apply_step(&mut self, grads: &GradAccumulator, lr: f64) -> Result<()> {
        for (&id, g) in grads.iter() {
            let row = self.get_mut(id).ok_or(Error::MissingRow { kind: "row", id })?;
            for (p, gv) in row.iter_mut().zip(g) {
                *p -= lr * gv;
            }
        }
        Ok(())
    }
}

impl RowSource for EmbeddingTable {
    fn dim(&self) -> usize {
        self.values.cols()
    }

    fn row(&self, id: usize) -> Option<&[f64]> {
        self.get(id)
    }
}

impl RowSource for BTreeMap<usize, Vec<f64>> {
    fn dim(&self) -> usize {
        self.values().next().map_or(0, Vec::len)
    }

    fn row(&self, id: usize) -> Option<&[f64]> {
        self.get(&id).map(Vec::as_slice)
    }
}

fn xavier_matrix(rows: usize, dim: usize, rng: &mut Rng) -> Matrix {
    let bound = (6.0 / (dim + dim) as f64).sqrt();
    let data = (0..rows * dim)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Matrix {
        rows,
        cols: dim,
        data,
    }
}

/// Sparse per-row gradient sums. Iteration is in ascending id order so that
/// merges and parameter updates are bitwise deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradAccumulator {
    dim: usize,
    rows: BTreeMap<usize, Vec<f64>>,
}

impl GradAccumulator {
    pub fn new(dim: usize) -> Self {
        GradAccumulator {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `row[id] += scale * grad`
    pub fn add(&mut self, id: usize, grad: &[f64], scale: f64) {
        debug_assert_eq!(grad.len(), self.dim);
        let row = self
            .rows
            .entry(id)
            .or_insert_with(|| vec![0.0; grad.len()]);
        for (a, g) in row.iter_mut().zip(grad) {
            *a += scale * g;
        }
    }

    pub fn get(&self, id: usize) -> Option<&[f64]> {
        self.rows.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&usize, &Vec<f64>)> {
        self.rows.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.keys().copied()
    }

    pub fn merge(&mut self, other: &GradAccumulator, scale: f64) {
        for (&id, g) in other.iter() {
            self.add(id, g, scale);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.rows.values().flatten().all(|v| v.is_finite())
    }

    pub fn into_map(self) -> BTreeMap<usize, Vec<f64>> {
        self.rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    #[test]
    fn xavier_bounds_and_determinism() {
        let a = EmbeddingTable::xavier(50, 32, &mut rng_from_seed(3));
        let b = EmbeddingTable::xavier(50, 32, &mut rng_from_seed(3));
        assert!(a.bit_eq(&b));
        let bound = (6.0f64 / 64.0).sqrt();
        assert!(a.values().as_slice().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn keyed_lookup() {
        let t = EmbeddingTable::keyed(vec![2, 5, 9], Matrix::zeros(3, 2)).unwrap();
        assert_eq!(t.position(5), Some(1));
        assert!(t.get(3).is_none());
        assert!(EmbeddingTable::keyed(vec![5, 2], Matrix::zeros(2, 2)).is_err());
        let r = t.restrict(&[9, 2]).unwrap();
        assert_eq!(r.ids(), vec![2, 9]);
        assert!(t.restrict(&[4]).is_err());
    }

    #[test]
    fn accumulator_merge_is_order_independent() {
        let mut a = GradAccumulator::new(2);
        a.add(3, &[1.0, 2.0], 1.0);
        let mut b = GradAccumulator::new(2);
        b.add(1, &[0.5, 0.5], 1.0);
        let mut ab = a.clone();
        ab.merge(&b, 1.0);
        let mut ba = b.clone();
        ba.merge(&a, 1.0);
        assert_eq!(ab, ba);
        assert_eq!(ab.ids().collect::<Vec<_>>(), vec![1, 3]);
    }
}
