//! Top-K ranking metrics and forgetting measurements.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{InteractionTable, SharingPartition};
use crate::error::{Error, Result};
use crate::fedlearn::Federation;
use crate::graph::{infer, EmbeddingTable};

use crate::unlearn::ForgottenViewSet;

/// Cosine score of every item; zero item rows score 0.
pub fn score_all(user: &[f64], items: &EmbeddingTable) -> Result<Vec<f64>> {
    let un = user.iter().map(|v| v * v).sum::<f64>().sqrt();
    if un == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(items
        .values()
        .iter_rows()
        .map(|row| {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                0.0
            } else {
                row.iter().zip(user).map(|(a, b)| a * b).sum::<f64>() / (n * un)
            }
        })
        .collect())
}

fn better(scores: &[f64], a: usize, b: usize) -> std::cmp::Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// The first `k` items by descending score, ties to the lower id, skipping
/// `exclude` (sorted).
pub fn top_k(scores: &[f64], exclude: &[usize], k: usize) -> Vec<usize> {
    let mut cand: Vec<usize> = (0..scores.len()).filter(|i| exclude.binary_search(i).is_err()).collect();
    if k < cand.len() {
        cand.select_nth_unstable_by(k, |&a, &b| better(scores, a, b));
        cand.truncate(k);
    }
    cand.sort_unstable_by(|&a, &b| better(scores, a, b));
    cand
}

/// Full ranking of non-excluded items.
pub fn rank_items(user: &[f64], items: &EmbeddingTable, exclude: &[usize]) -> Result<Vec<usize>> {
    let scores = score_all(user, items)?;
    Ok(top_k(&scores, exclude, scores.len()))
}

/// 1-based position of `item` among all items under the same ordering.
pub fn rank_of(scores: &[f64], item: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&j| j != item && better(scores, j, item).is_lt())
        .count()
}

/// `hr = hits / min(K, |test|)`, `ndcg = DCG@K / IDCG@K` with gain
/// `1/log2(rank + 1)`.
pub fn hr_ndcg_at_k(ranked: &[usize], test_items: &[usize], k: usize) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    if test_items.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (pos, item) in ranked.iter().take(k).enumerate() {
        if test_items.contains(item) {
            hits += 1;
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let ideal = k.min(test_items.len());
    let idcg: f64 = (0..ideal).map(|pos| 1.0 / ((pos + 2) as f64).log2()).sum();
    Ok((hits as f64 / ideal as f64, dcg / idcg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Learning,
    Unlearning,
    Retrain,
}

/// Which user vector scores items for users present in the shared graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserSource {
    /// The client's own propagated `u_u`.
    Local,
    /// The server's propagated user row on the shared graph.
    Server,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: usize,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    pub users: usize,
    pub phase: Phase,
    pub seed: u64,
    pub config_hash: String,
    pub mean: BTreeMap<String, f64>,
    pub per_user: Vec<UserMetrics>,
}

impl MetricsReport {
    pub fn hr(&self, k: usize) -> Option<f64> {
        self.mean.get(&format!("hr@{k}")).copied()
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.mean.get(&format!("ndcg@{k}")).copied()
    }

    pub fn to_csv(&self) -> String {
        let keys: Vec<&String> = self.mean.keys().collect();
        let mut out = String::from("user");
        for k in &keys {
            out.push(',');
            out.push_str(k);
        }
        out.push('\n');
        for u in &self.per_user {
            let _ = write!(out, "{}", u.user);
            for k in &keys {
                let _ = write!(out, ",{}", u.values[*k]);
            }
            out.push('\n');
        }
        out
    }

    /// Aligned text table of the means.
    pub fn render_table(&self) -> String {
        let width = self.mean.keys().map(String::len).max().unwrap_or(0).max(6);
        let mut out = format!("{:<width$}  value\n", "metric");
        for (k, v) in &self.mean {
            let _ = writeln!(out, "{k:<width$}  {v:.6}");
        }
        let _ = writeln!(out, "{:<width$}  {}", "users", self.users);
        out
    }
}

/// Holdout for one evaluation: the target interactions and the
/// interactions excluded from ranking.
pub struct EvalData<'a> {
    pub holdout: &'a InteractionTable,
    pub exclude: Vec<&'a InteractionTable>,
}

/// Mean metrics over users with a non-empty holdout, in user-id order.
pub fn evaluate(
    user_embeddings: &EmbeddingTable,
    item_table: &EmbeddingTable,
    data: &EvalData<'_>,
    ks: &[usize],
) -> Result<Vec<UserMetrics>> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidArgument("K values must be >= 1".into()));
    }
    let kmax = *ks.iter().max().expect("non-empty");
    let users: Vec<usize> = (0..data.holdout.num_users())
        .filter(|&u| !data.holdout.items_of(u).is_empty())
        .collect();
    users
        .par_iter()
        .map(|&u| {
            let row = user_embeddings.get(u).ok_or(Error::MissingRow { kind: "user", id: u })?;
            let scores = score_all(row, item_table)?;
            let mut exclude: Vec<usize> = data
                .exclude
                .iter()
                .flat_map(|t| t.items_of(u).iter().copied())
                .collect();
            exclude.sort_unstable();
            exclude.dedup();
            let ranked = top_k(&scores, &exclude, kmax);
            let test = data.holdout.items_of(u);
            let mut values = BTreeMap::new();
            for &k in ks {
                let (hr, ndcg) = hr_ndcg_at_k(&ranked, test, k)?;
                values.insert(format!("hr@{k}"), hr);
                values.insert(format!("ndcg@{k}"), ndcg);
            }
            Ok(UserMetrics { user: u, values })
        })
        .collect()
}

pub fn summarize(
    per_user: Vec<UserMetrics>,
    ks: &[usize],
    phase: Phase,
    seed: u64,
    config_hash: &str,
) -> Result<MetricsReport> {
    if per_user.is_empty() {
        return Err(Error::Empty("no users with held-out interactions".into()));
    }
    let mut mean: BTreeMap<String, f64> = BTreeMap::new();
    for u in &per_user {
        for (k, v) in &u.values {
            *mean.entry(k.clone()).or_default() += v;
        }
    }
    let n = per_user.len() as f64;
    mean.values_mut().for_each(|v| *v /= n);
    Ok(MetricsReport {
        ks: ks.to_vec(),
        users: per_user.len(),
        phase,
        seed,
        config_hash: config_hash.to_string(),
        mean,
        per_user,
    })
}

/// Scoring vectors for every user of a federation.
pub fn federation_users(fed: &Federation, source: UserSource) -> Result<EmbeddingTable> {
    let mut users = fed.inference_users()?;
    if source == UserSource::Server {
        let server = &fed.server;
        if let (Some(g), Some(su)) = (&server.shared_graph, &server.server_user_table) {
            let inf = infer(g, su, &server.item_table, &fed.config.server_spec())?;
            for (p, &u) in g.user_ids().iter().enumerate() {
                users
                    .get_mut(u)
                    .ok_or(Error::MissingRow { kind: "user", id: u })?
                    .copy_from_slice(inf.users.row(p));
            }
        }
    }
    Ok(users)
}

/// Evaluates a federation's current model.
pub fn evaluate_federation(
    fed: &Federation,
    data: &EvalData<'_>,
    ks: &[usize],
    source: UserSource,
) -> Result<BTreeMap<String, f64>> {
    let users = federation_users(fed, source)?;
    let per_user = evaluate(&users, &fed.server.item_table, data, ks)?;
    Ok(summarize(per_user, ks, Phase::Learning, 0, "")?.mean)
}

/// User and item tables of one model.
#[derive(Debug, Clone, Copy)]
pub struct ModelView<'a> {
    pub users: &'a EmbeddingTable,
    pub items: &'a EmbeddingTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingScore {
    pub mean_cos_before: f64,
    pub mean_cos_after: f64,
    pub mean_rank_before: f64,
    pub mean_rank_after: f64,
    /// Positive when withdrawn items moved down the lists.
    pub mean_rank_shift: f64,
    pub pairs: usize,
}

/// Cosine to the forgotten views, and the rank of each withdrawn item in
/// its requesting user's full list (nothing excluded), before and after.
pub fn forgetting_score(
    before: ModelView<'_>,
    after: ModelView<'_>,
    forgotten: &ForgottenViewSet,
    partition: &SharingPartition,
) -> Result<ForgettingScore> {
    if forgotten.views.is_empty() {
        return Err(Error::Empty("no forgotten items".into()));
    }
    let mean_cos_before = forgotten.mean_cosine(before.items)?;
    let mean_cos_after = forgotten.mean_cosine(after.items)?;
    let ranks = |m: ModelView<'_>| -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for u in partition.requesting_users() {
            let row = m.users.get(u).ok_or(Error::MissingRow { kind: "user", id: u })?;
            let scores = score_all(row, m.items)?;
            out.extend(partition.user(u).unlearn.iter().map(|&i| rank_of(&scores, i)));
        }
        Ok(out)
    };
    let (rb, ra) = (ranks(before)?, ranks(after)?);
    let mean = |v: &[usize]| v.iter().sum::<usize>() as f64 / v.len().max(1) as f64;
    Ok(ForgettingScore {
        mean_cos_before,
        mean_cos_after,
        mean_rank_before: mean(&rb),
        mean_rank_after: mean(&ra),
        mean_rank_shift: mean(&ra) - mean(&rb),
        pairs: rb.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{IdMap, ShareGroup, UserShare};
    use crate::graph::Matrix;
    use crate::seed::rng_from_seed;

    fn items(rows: &[[f64; 2]]) -> EmbeddingTable {
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        EmbeddingTable::from_matrix(Matrix::from_vec(rows.len(), 2, data).unwrap())
    }

    #[test]
    fn ranking_order_and_ties() {
        let t = items(&[[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]]);
        assert_eq!(rank_items(&[1.0, 0.1], &t, &[]).unwrap(), vec![1, 2, 0]);
        let tied = items(&[[0.0, 1.0], [2.0, 0.0], [1.0, 0.0]]);
        assert_eq!(rank_items(&[1.0, 0.0], &tied, &[]).unwrap(), vec![1, 2, 0]);
        assert_eq!(rank_items(&[1.0, 0.0], &tied, &[0, 1]).unwrap(), vec![2]);
        assert!(rank_items(&[0.0, 0.0], &tied, &[]).is_err());
        let scores = score_all(&[1.0, 0.0], &tied).unwrap();
        assert_eq!((rank_of(&scores, 1), rank_of(&scores, 2), rank_of(&scores, 0)), (1, 2, 3));
    }

    #[test]
    fn metric_closed_forms() {
        assert_eq!(hr_ndcg_at_k(&[7, 1, 2], &[7], 20).unwrap(), (1.0, 1.0));
        let (hr, ndcg) = hr_ndcg_at_k(&[1, 2, 7, 3], &[7], 20).unwrap();
        assert_eq!(hr, 1.0);
        assert!((ndcg - 0.5).abs() < 1e-15);
        assert_eq!(hr_ndcg_at_k(&[1, 2, 3], &[7], 2).unwrap(), (0.0, 0.0));
        assert!(hr_ndcg_at_k(&[1], &[], 2).is_err());
        assert!(hr_ndcg_at_k(&[1], &[1], 0).is_err());
    }

    #[test]
    fn metrics_monotone_in_k_for_single_targets() {
        let ranked: Vec<usize> = (0..30).collect();
        for target in [0, 4, 17, 29] {
            let mut prev = (0.0, 0.0);
            for k in 1..=30 {
                let m = hr_ndcg_at_k(&ranked, &[target], k).unwrap();
                assert!(m.0 >= prev.0 && m.1 >= prev.1);
                prev = m;
            }
        }
        // with several targets the hit count still grows with K
        let test = [3, 11, 25];
        let mut prev = 0.0;
        for k in 1..=30 {
            let hits = hr_ndcg_at_k(&ranked, &test, k).unwrap().0 * k.min(test.len()) as f64;
            assert!(hits >= prev);
            prev = hits;
        }
    }

    fn table(lists: Vec<Vec<usize>>, n_items: usize) -> InteractionTable {
        let users = IdMap::from_raw((0..lists.len()).map(|u| format!("u{u}")).collect()).unwrap();
        let items = IdMap::from_raw((0..n_items).map(|i| format!("i{i}")).collect()).unwrap();
        InteractionTable::new(users, items, lists).unwrap()
    }

    #[test]
    fn perfect_embeddings_score_one() {
        // user u likes item u only; rows are one-hot
        let n = 6;
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.row_mut(i)[i] = 1.0;
        }
        let t = EmbeddingTable::from_matrix(m);
        let test = table((0..n).map(|u| vec![u]).collect(), n);
        let train = table((0..n).map(|u| vec![(u + 1) % n]).collect(), n);
        let data = EvalData { holdout: &test, exclude: vec![&train] };
        let r = summarize(evaluate(&t, &t, &data, &[1, 3]).unwrap(), &[1, 3], Phase::Learning, 0, "h").unwrap();
        assert_eq!(r.hr(1), Some(1.0));
        assert_eq!(r.ndcg(3), Some(1.0));
        assert_eq!(r.users, n);
        let again = summarize(evaluate(&t, &t, &data, &[1, 3]).unwrap(), &[1, 3], Phase::Learning, 0, "h").unwrap();
        assert_eq!(r, again);
        assert!(r.to_csv().starts_with("user,hr@1,hr@3,ndcg@1,ndcg@3\n0,1,1,1,1\n"));
        assert!(r.render_table().contains("hr@1"));
    }

    #[test]
    fn random_embeddings_match_null_model() {
        // one test item per user among n_items candidates: P(hit) = K / n_items
        let (users, n_items, k) = (2000, 400, 20);
        let mut rng = rng_from_seed(11);
        let u = EmbeddingTable::xavier(users, 8, &mut rng);
        let v = EmbeddingTable::xavier(n_items, 8, &mut rng);
        let test = table((0..users).map(|u| vec![(u * 7) % n_items]).collect(), n_items);
        let data = EvalData { holdout: &test, exclude: vec![] };
        let r = summarize(evaluate(&u, &v, &data, &[k]).unwrap(), &[k], Phase::Learning, 0, "").unwrap();
        let p = k as f64 / n_items as f64;
        let sigma = (p * (1.0 - p) / users as f64).sqrt();
        let hr = r.hr(k).unwrap();
        assert!((hr - p).abs() < 3.0 * sigma, "hr {hr} vs {p} ± {}", 3.0 * sigma);
    }

    #[test]
    fn forgetting_score_identity_and_negation() {
        let mut rng = rng_from_seed(4);
        let users = EmbeddingTable::xavier(2, 3, &mut rng);
        let its = EmbeddingTable::xavier(5, 3, &mut rng);
        let part = SharingPartition::new(vec![
            UserShare { group: ShareGroup::Full, local: vec![], share: vec![1, 2], unlearn: vec![1, 2] },
            UserShare { group: ShareGroup::None, local: vec![0], share: vec![], unlearn: vec![] },
        ]);
        let f = ForgottenViewSet {
            rounds: vec![1],
            views: [(1, vec![vec![0.2, 0.1, 0.0]]), (2, vec![vec![-0.3, 0.5, 0.4]])].into_iter().collect(),
        };
        let m = ModelView { users: &users, items: &its };
        let s = forgetting_score(m, m, &f, &part).unwrap();
        assert_eq!(s.mean_cos_before, s.mean_cos_after);
        assert_eq!(s.mean_rank_shift, 0.0);
        assert_eq!(s.pairs, 2);

        let mut neg = its.clone();
        for i in [1, 2] {
            neg.get_mut(i).unwrap().iter_mut().for_each(|v| *v = -*v);
        }
        let s = forgetting_score(m, ModelView { users: &users, items: &neg }, &f, &part).unwrap();
        assert!((s.mean_cos_after + s.mean_cos_before).abs() < 1e-15);
        let empty = ForgottenViewSet { rounds: vec![], views: BTreeMap::new() };
        assert!(forgetting_score(m, m, &empty, &part).is_err());
    }
}
