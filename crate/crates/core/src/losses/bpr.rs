use std::collections::BTreeSet;

use super::{neg_log_sigmoid, sigmoid, LossConfig, Unit};
use crate::error::{Error, Result};
use crate::graph::{GradAccumulator, RowSource};

/// One (user, observed item, unobserved item) comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BprTriple {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

impl BprTriple {
    /// Pairs each positive with its block of `k` negatives
    /// (`neg.len()` must equal `k · pos.len()`).
    pub fn expand(user: usize, pos: &[usize], neg: &[usize], k: usize) -> Result<Vec<BprTriple>> {
        if neg.len() != k * pos.len() {
            return Err(Error::Shape(format!(
                "{} negatives for {} positives at {k} per positive",
                neg.len(),
                pos.len()
            )));
        }
        Ok(pos
            .iter()
            .enumerate()
            .flat_map(|(p, &item)| {
                neg[p * k..(p + 1) * k].iter().map(move |&n| BprTriple {
                    user,
                    pos: item,
                    neg: n,
                })
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseGrads {
    pub loss: f64,
    pub users: GradAccumulator,
    pub items: GradAccumulator,
}

/// `−Σ ln σ(cos(u, v_pos) − cos(u, v_neg)) + λ Σ_{touched rows} ‖row‖²`.
///
/// The regularizer counts each distinct user and item row once.
pub fn bpr_loss_grad<U, I>(
    users: &U,
    items: &I,
    triples: &[BprTriple],
    config: &LossConfig,
) -> Result<PairwiseGrads>
where
    U: RowSource + ?Sized,
    I: RowSource + ?Sized,
{
    let dim = items.dim();
    let mut out = PairwiseGrads {
        loss: 0.0,
        users: GradAccumulator::new(dim),
        items: GradAccumulator::new(dim),
    };
    let mut touched_users = BTreeSet::new();
    let mut touched_items = BTreeSet::new();
    let mut gu = vec![0.0; dim];
    let mut gp = vec![0.0; dim];
    let mut gn = vec![0.0; dim];

    for t in triples {
        let u = Unit::new(
            users
                .row(t.user)
                .ok_or(Error::MissingRow { kind: "user", id: t.user })?,
        )?;
        let p = Unit::new(
            items
                .row(t.pos)
                .ok_or(Error::MissingRow { kind: "item", id: t.pos })?,
        )?;
        let n = Unit::new(
            items
                .row(t.neg)
                .ok_or(Error::MissingRow { kind: "item", id: t.neg })?,
        )?;
        let cp = u.cos(&p);
        let cn = u.cos(&n);
        let x = cp - cn;
        out.loss += neg_log_sigmoid(x);
        // d/dx −ln σ(x) = −σ(−x)
        let g = -sigmoid(-x);

        gu.iter_mut().for_each(|v| *v = 0.0);
        gp.iter_mut().for_each(|v| *v = 0.0);
        gn.iter_mut().for_each(|v| *v = 0.0);
        u.add_cos_grad(&p, cp, g, &mut gu);
        u.add_cos_grad(&n, cn, -g, &mut gu);
        p.add_cos_grad(&u, cp, g, &mut gp);
        n.add_cos_grad(&u, cn, -g, &mut gn);
        out.users.add(t.user, &gu, 1.0);
        out.items.add(t.pos, &gp, 1.0);
        out.items.add(t.neg, &gn, 1.0);
        touched_users.insert(t.user);
        touched_items.insert(t.pos);
        touched_items.insert(t.neg);
    }

    if config.lambda_reg > 0.0 {
        let lambda = config.lambda_reg;
        for &id in &touched_users {
            let row = users.row(id).expect("checked above");
            out.loss += lambda * row.iter().map(|v| v * v).sum::<f64>();
            out.users.add(id, row, 2.0 * lambda);
        }
        for &id in &touched_items {
            let row = items.row(id).expect("checked above");
            out.loss += lambda * row.iter().map(|v| v * v).sum::<f64>();
            out.items.add(id, row, 2.0 * lambda);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::losses::finite_diff_check;

    fn cfg(lambda: f64) -> LossConfig {
        LossConfig {
            lambda_reg: lambda,
            ..LossConfig::default()
        }
    }

    fn rows(v: &[(usize, Vec<f64>)]) -> BTreeMap<usize, Vec<f64>> {
        v.iter().cloned().collect()
    }

    #[test]
    fn equal_scores_cost_ln2() {
        let users = rows(&[(0, vec![1.0, 0.0])]);
        let items = rows(&[(1, vec![1.0, 1.0]), (2, vec![1.0, -1.0])]);
        let t = [BprTriple { user: 0, pos: 1, neg: 2 }];
        let out = bpr_loss_grad(&users, &items, &t, &cfg(0.0)).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn large_gap_costs_nearly_nothing() {
        let users = rows(&[(0, vec![1.0, 0.0])]);
        let items = rows(&[(1, vec![1.0, 0.0]), (2, vec![-1.0, 0.0])]);
        let t = [BprTriple { user: 0, pos: 1, neg: 2 }];
        let out = bpr_loss_grad(&users, &items, &t, &cfg(0.0)).unwrap();
        // gap of 2 in cosine space is the maximum
        assert!((out.loss - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-15);
        assert!(out.loss >= 0.0);
    }

    #[test]
    fn zero_norm_rows_are_rejected() {
        let users = rows(&[(0, vec![0.0, 0.0])]);
        let items = rows(&[(1, vec![1.0, 0.0]), (2, vec![-1.0, 0.0])]);
        let t = [BprTriple { user: 0, pos: 1, neg: 2 }];
        assert!(matches!(
            bpr_loss_grad(&users, &items, &t, &cfg(0.0)),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn expand_checks_negative_count() {
        let t = BprTriple::expand(3, &[1, 2], &[7, 8, 9, 10], 2).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t[2], BprTriple { user: 3, pos: 2, neg: 9 });
        assert!(BprTriple::expand(3, &[1, 2], &[7], 1).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // 1 user, 2 items, d = 4, with regularization
        let params = vec![
            0.3, -0.7, 0.2, 0.9, // user 0
            -0.4, 0.5, 0.8, -0.1, // item 0
            0.6, 0.1, -0.3, 0.4, // item 1
        ];
        let f = |x: &[f64]| {
            let users = rows(&[(0, x[0..4].to_vec())]);
            let items = rows(&[(0, x[4..8].to_vec()), (1, x[8..12].to_vec())]);
            let t = [BprTriple { user: 0, pos: 0, neg: 1 }];
            let out = bpr_loss_grad(&users, &items, &t, &cfg(0.05))?;
            let mut g = out.users.get(0).unwrap().to_vec();
            g.extend_from_slice(out.items.get(0).unwrap());
            g.extend_from_slice(out.items.get(1).unwrap());
            Ok((out.loss, g))
        };
        let err = finite_diff_check(f, &params, 1e-6).unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }
}
