use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::table::InteractionTable;
use crate::error::{Error, Result};
use crate::seed::{rng_for, round_count};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const EIGHT_ONE_ONE: SplitRatios = SplitRatios {
        train: 0.8,
        valid: 0.1,
        test: 0.1,
    };

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.valid, self.test];
        if parts.iter().any(|r| !(*r >= 0.0)) || self.train <= 0.0 {
            return Err(Error::InvalidArgument(format!("bad split ratios {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("split ratios {parts:?} do not sum to 1")));
        }
        Ok(())
    }
}

/// Train / validation / test tables over one id space.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: InteractionTable,
    pub valid: InteractionTable,
    pub test: InteractionTable,
}

impl DatasetSplits {
    pub fn num_users(&self) -> usize {
        self.train.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.train.num_items()
    }
}

/// Per-user holdout: each user's items are shuffled and sliced. Users with
/// fewer than three interactions keep everything in train.
pub fn split_holdout(table: &InteractionTable, ratios: SplitRatios, seed: u64) -> Result<DatasetSplits> {
    ratios.validate()?;
    let mut rng = rng_for(seed, "split", 0);
    let n_users = table.num_users();
    let mut train = Vec::with_capacity(n_users);
    let mut valid = Vec::with_capacity(n_users);
    let mut test = Vec::with_capacity(n_users);
    for u in 0..n_users {
        let mut items = table.items_of(u).to_vec();
        let n = items.len();
        if n < 3 {
            train.push(items);
            valid.push(Vec::new());
            test.push(Vec::new());
            continue;
        }
        items.shuffle(&mut rng);
        let mut n_valid = round_count(n as f64 * ratios.valid);
        let mut n_test = round_count(n as f64 * ratios.test);
        while n_valid + n_test >= n {
            if n_valid >= n_test && n_valid > 0 {
                n_valid -= 1;
            } else {
                n_test -= 1;
            }
        }
        let v: Vec<usize> = items[..n_valid].to_vec();
        let t: Vec<usize> = items[n_valid..n_valid + n_test].to_vec();
        let tr: Vec<usize> = items[n_valid + n_test..].to_vec();
        train.push(sorted(tr));
        valid.push(sorted(v));
        test.push(sorted(t));
    }
    Ok(DatasetSplits {
        train: table.with_lists(train),
        valid: table.with_lists(valid),
        test: table.with_lists(test),
    })
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::table::IdMap;
    use std::collections::BTreeSet;

    fn table(degrees: &[usize]) -> InteractionTable {
        let n_items = *degrees.iter().max().unwrap();
        let users = IdMap::from_raw((0..degrees.len()).map(|u| format!("u{u}")).collect()).unwrap();
        let items = IdMap::from_raw((0..n_items).map(|i| format!("i{i}")).collect()).unwrap();
        let lists = degrees.iter().map(|&d| (0..d).collect()).collect();
        InteractionTable::new(users, items, lists).unwrap()
    }

    #[test]
    fn ten_pairs_split_eight_one_one() {
        let s = split_holdout(&table(&[10]), SplitRatios::EIGHT_ONE_ONE, 1).unwrap();
        assert_eq!(
            (s.train.items_of(0).len(), s.valid.items_of(0).len(), s.test.items_of(0).len()),
            (8, 1, 1)
        );
    }

    #[test]
    fn train_only_ratio_is_identity() {
        let t = table(&[10, 4, 7]);
        let r = SplitRatios {
            train: 1.0,
            valid: 0.0,
            test: 0.0,
        };
        let s = split_holdout(&t, r, 3).unwrap();
        assert_eq!(s.train.user_items(), t.user_items());
        assert_eq!(s.test.num_pairs(), 0);
    }

    #[test]
    fn deterministic_disjoint_and_covering() {
        let t = table(&[10, 2, 25, 3, 40, 1]);
        let a = split_holdout(&t, SplitRatios::EIGHT_ONE_ONE, 42).unwrap();
        let b = split_holdout(&t, SplitRatios::EIGHT_ONE_ONE, 42).unwrap();
        assert_eq!(a, b);
        for u in 0..t.num_users() {
            let tr: BTreeSet<_> = a.train.items_of(u).iter().collect();
            let va: BTreeSet<_> = a.valid.items_of(u).iter().collect();
            let te: BTreeSet<_> = a.test.items_of(u).iter().collect();
            assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
            let all: BTreeSet<_> = tr.union(&va).chain(te.iter()).copied().collect();
            assert_eq!(all.len(), t.items_of(u).len());
            assert!(!tr.is_empty());
            let n = t.items_of(u).len() as f64;
            if n >= 3.0 {
                assert!((a.test.items_of(u).len() as f64 - 0.1 * n).abs() <= 1.0);
                assert!((a.valid.items_of(u).len() as f64 - 0.1 * n).abs() <= 1.0);
            }
        }
        // low-degree users keep everything in train
        assert_eq!(a.train.items_of(1).len(), 2);
        assert_eq!(a.train.items_of(5).len(), 1);
    }

    #[test]
    fn rejects_bad_ratios() {
        let t = table(&[5]);
        let bad = SplitRatios {
            train: 0.5,
            valid: 0.1,
            test: 0.1,
        };
        assert!(split_holdout(&t, bad, 0).is_err());
    }
}
