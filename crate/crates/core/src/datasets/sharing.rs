//! Per-user local / shared / withdrawn interaction sets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::split::DatasetSplits;
use super::table::{IdMap, InteractionTable};
use crate::error::{Error, Result};
use crate::seed::{ceil_count, rng_for, round_count};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShareGroup {
    Full,
    Partial,
    None,
}

impl fmt::Display for ShareGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShareGroup::Full => "full",
            ShareGroup::Partial => "partial",
            ShareGroup::None => "none",
        })
    }
}

impl FromStr for ShareGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ShareGroup::Full),
            "partial" => Ok(ShareGroup::Partial),
            "none" => Ok(ShareGroup::None),
            other => Err(Error::InvalidArgument(format!("unknown share group {other:?}"))),
        }
    }
}

/// One user's view of their train interactions. All lists are sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserShare {
    pub group: ShareGroup,
    pub local: Vec<usize>,
    pub share: Vec<usize>,
    pub unlearn: Vec<usize>,
}

impl UserShare {
    /// Shared items that have not been withdrawn.
    pub fn remaining_share(&self) -> Vec<usize> {
        self.share
            .iter()
            .copied()
            .filter(|i| self.unlearn.binary_search(i).is_err())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharingPartition {
    users: Vec<UserShare>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRatios {
    pub full: f64,
    pub partial: f64,
    pub none: f64,
}

impl GroupRatios {
    pub const ONE_TWO_SEVEN: GroupRatios = GroupRatios {
        full: 0.1,
        partial: 0.2,
        none: 0.7,
    };

    pub fn validate(&self) -> Result<()> {
        let parts = [self.full, self.partial, self.none];
        if parts.iter().any(|r| !(*r >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "group ratios {parts:?} must be non-negative and sum to 1"
            )));
        }
        Ok(())
    }
}

impl SharingPartition {
    pub fn new(users: Vec<UserShare>) -> Self {
        SharingPartition { users }
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn user(&self, u: usize) -> &UserShare {
        &self.users[u]
    }

    pub fn users(&self) -> &[UserShare] {
        &self.users
    }

    pub fn users_mut(&mut self) -> &mut [UserShare] {
        &mut self.users
    }

    pub fn sharing_users(&self) -> Vec<usize> {
        (0..self.users.len())
            .filter(|&u| !self.users[u].share.is_empty())
            .collect()
    }

    pub fn requesting_users(&self) -> Vec<usize> {
        (0..self.users.len())
            .filter(|&u| !self.users[u].unlearn.is_empty())
            .collect()
    }

    /// `D_s` as `(user, item)` edges, before any withdrawal.
    pub fn shared_edges(&self) -> BTreeSet<(usize, usize)> {
        self.edges(|s| s.share.clone())
    }

    pub fn remaining_shared_edges(&self) -> BTreeSet<(usize, usize)> {
        self.edges(UserShare::remaining_share)
    }

    pub fn unlearn_edges(&self) -> BTreeSet<(usize, usize)> {
        self.edges(|s| s.unlearn.clone())
    }

    fn edges(&self, pick: impl Fn(&UserShare) -> Vec<usize>) -> BTreeSet<(usize, usize)> {
        self.users
            .iter()
            .enumerate()
            .flat_map(|(u, s)| pick(s).into_iter().map(move |i| (u, i)))
            .collect()
    }

    pub fn group_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for s in &self.users {
            *out.entry(s.group.to_string()).or_insert(0) += 1;
        }
        out
    }

    /// Checks `local ⊎ share = train_u`, `unlearn ⊆ share`, and the group rules.
    pub fn validate(&self, train: &InteractionTable) -> Result<()> {
        if self.users.len() != train.num_users() {
            return Err(Error::Shape(format!(
                "partition has {} users, train has {}",
                self.users.len(),
                train.num_users()
            )));
        }
        for (u, s) in self.users.iter().enumerate() {
            let bad = |m: &str| Err(Error::InvalidArgument(format!("user {u}: {m}")));
            for list in [&s.local, &s.share, &s.unlearn] {
                if list.windows(2).any(|w| w[0] >= w[1]) {
                    return bad("sets must be sorted and duplicate-free");
                }
            }
            let local: BTreeSet<_> = s.local.iter().copied().collect();
            let share: BTreeSet<_> = s.share.iter().copied().collect();
            if !local.is_disjoint(&share) {
                return bad("local and shared sets overlap");
            }
            let union: Vec<usize> = local.union(&share).copied().collect();
            if union != train.items_of(u) {
                return bad("local ∪ share differs from train items");
            }
            if !s.unlearn.iter().all(|i| share.contains(i)) {
                return bad("unlearn set is not a subset of the shared set");
            }
            match s.group {
                ShareGroup::None if !s.share.is_empty() => return bad("non-sharing user shares"),
                ShareGroup::Full if !s.local.is_empty() => return bad("full sharer keeps local items"),
                _ => {}
            }
        }
        Ok(())
    }

    /// Partition and train table for retraining on remaining data only:
    /// withdrawn items leave both the shared set and the train table.
    pub fn without_withdrawn(&self, train: &InteractionTable) -> (SharingPartition, InteractionTable) {
        let mut lists = Vec::with_capacity(self.users.len());
        let users = self
            .users
            .iter()
            .enumerate()
            .map(|(u, s)| {
                lists.push(
                    train
                        .items_of(u)
                        .iter()
                        .copied()
                        .filter(|i| s.unlearn.binary_search(i).is_err())
                        .collect(),
                );
                UserShare {
                    group: s.group,
                    local: s.local.clone(),
                    share: s.remaining_share(),
                    unlearn: Vec::new(),
                }
            })
            .collect();
        (SharingPartition { users }, train.with_lists(lists))
    }
}

/// Assigns users to full / partial / none groups and picks shared items.
///
/// Users are shuffled, the first `round(full·N)` become full sharers and the
/// next `round(partial·N)` partial sharers. A partial sharer shares
/// `ceil(partial_ratio · |train_u|)` uniformly chosen train items.
pub fn assign_sharing(
    splits: &DatasetSplits,
    group_ratios: GroupRatios,
    partial_ratio: f64,
    seed: u64,
) -> Result<SharingPartition> {
    group_ratios.validate()?;
    if !(0.0..=1.0).contains(&partial_ratio) {
        return Err(Error::InvalidArgument(format!(
            "partial sharing ratio {partial_ratio} outside [0, 1]"
        )));
    }
    let n = splits.num_users();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, "groups", 0));
    let n_full = round_count(group_ratios.full * n as f64).min(n);
    let n_partial = round_count(group_ratios.partial * n as f64).min(n - n_full);
    let mut groups = vec![ShareGroup::None; n];
    for &u in &order[..n_full] {
        groups[u] = ShareGroup::Full;
    }
    for &u in &order[n_full..n_full + n_partial] {
        groups[u] = ShareGroup::Partial;
    }

    let users = (0..n)
        .map(|u| {
            let train = splits.train.items_of(u).to_vec();
            let (local, share) = match groups[u] {
                ShareGroup::Full => (Vec::new(), train),
                ShareGroup::None => (train, Vec::new()),
                ShareGroup::Partial => {
                    let k = ceil_count(partial_ratio * train.len() as f64).min(train.len());
                    let mut shuffled = train;
                    shuffled.shuffle(&mut rng_for(seed, "partial", u as u64));
                    let mut share = shuffled[..k].to_vec();
                    let mut local = shuffled[k..].to_vec();
                    share.sort_unstable();
                    local.sort_unstable();
                    (local, share)
                }
            };
            UserShare {
                group: groups[u],
                local,
                share,
                unlearn: Vec::new(),
            }
        })
        .collect();
    Ok(SharingPartition { users })
}

/// Selects `round(unshare_ratio · |sharing users|)` sharing users at random;
/// each withdraws its whole shared set.
pub fn issue_unshare_requests(
    partition: &SharingPartition,
    unshare_ratio: f64,
    seed: u64,
) -> Result<SharingPartition> {
    if !(0.0..=1.0).contains(&unshare_ratio) {
        return Err(Error::InvalidArgument(format!(
            "unshare ratio {unshare_ratio} outside [0, 1]"
        )));
    }
    let mut sharing = partition.sharing_users();
    if sharing.is_empty() {
        return Err(Error::InvalidArgument("no user shares data; nothing to unshare".into()));
    }
    sharing.shuffle(&mut rng_for(seed, "unshare", 0));
    let k = round_count(unshare_ratio * sharing.len() as f64).min(sharing.len());
    let mut out = partition.clone();
    for &u in &sharing[..k] {
        let s = &mut out.users[u];
        s.unlearn = s.share.clone();
    }
    Ok(out)
}

/// Items named in an unshare request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RequestedItems {
    All(AllMarker),
    Items(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllMarker {
    All,
}

/// One line of an unshare request file: `{"user": .., "items": [..] | "all"}`
/// with raw ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnshareRequest {
    pub user: String,
    pub items: RequestedItems,
}

pub fn parse_unshare_requests(text: &str) -> Result<Vec<UnshareRequest>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: "unshare requests".into(),
                line: n + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn render_unshare_requests(requests: &[UnshareRequest]) -> Result<String> {
    let mut out = String::new();
    for r in requests {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Requests that reproduce the partition's unlearn sets (whole-set
/// withdrawals are written as `"all"`).
pub fn requests_from_partition(partition: &SharingPartition, users: &IdMap, items: &IdMap) -> Vec<UnshareRequest> {
    partition
        .requesting_users()
        .into_iter()
        .map(|u| {
            let s = partition.user(u);
            let items = if s.unlearn == s.share {
                RequestedItems::All(AllMarker::All)
            } else {
                RequestedItems::Items(s.unlearn.iter().map(|&i| items.raw(i).to_string()).collect())
            };
            UnshareRequest {
                user: users.raw(u).to_string(),
                items,
            }
        })
        .collect()
}

/// Sets unlearn sets from explicit requests; every requested item must be
/// in the user's shared set.
pub fn apply_unshare_requests(
    partition: &SharingPartition,
    requests: &[UnshareRequest],
    users: &IdMap,
    items: &IdMap,
) -> Result<SharingPartition> {
    let mut out = partition.clone();
    for s in out.users.iter_mut() {
        s.unlearn.clear();
    }
    for r in requests {
        let u = users
            .get(&r.user)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown user {:?} in unshare request", r.user)))?;
        let s = &mut out.users[u];
        let mut wanted = match &r.items {
            RequestedItems::All(_) => s.share.clone(),
            RequestedItems::Items(list) => list
                .iter()
                .map(|raw| {
                    items.get(raw).ok_or_else(|| {
                        Error::InvalidArgument(format!("unknown item {raw:?} in unshare request"))
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        };
        for &i in &wanted {
            if s.share.binary_search(&i).is_err() {
                return Err(Error::NotShared { user: u, item: i });
            }
        }
        wanted.extend_from_slice(&s.unlearn);
        wanted.sort_unstable();
        wanted.dedup();
        s.unlearn = wanted;
    }
    Ok(out)
}
