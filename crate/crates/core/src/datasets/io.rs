//! Prepared-data directory: raw id lists, one TSV per split (dense indices),
//! the sharing partition as JSON lines, and a JSON manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sharing::{SharingPartition, UserShare};
use super::split::{DatasetSplits, SplitRatios};
use super::table::{IdMap, InteractionTable};
use super::GroupRatios;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedManifest {
    pub source: String,
    pub source_records: usize,
    pub min_interactions: usize,
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub split_ratios: SplitRatios,
    pub group_ratios: GroupRatios,
    pub partial_ratio: f64,
    pub unshare_ratio: f64,
    pub groups: BTreeMap<String, usize>,
    pub shared_interactions: usize,
    pub unshared_interactions: usize,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub splits: DatasetSplits,
    pub partition: SharingPartition,
    pub manifest: PreparedManifest,
}

#[derive(Serialize, Deserialize)]
struct PartitionLine {
    user: usize,
    #[serde(flatten)]
    share: UserShare,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn render_pairs(table: &InteractionTable) -> String {
    let mut out = String::new();
    for (u, i) in table.pairs() {
        writeln!(out, "{u}\t{i}").expect("string write");
    }
    out
}

pub fn save_prepared(dir: &Path, prepared: &Prepared) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let splits = &prepared.splits;
    let ids = |m: &IdMap| m.raw_ids().iter().map(|s| format!("{s}\n")).collect::<String>();
    write(&dir.join("users.txt"), &ids(splits.train.users()))?;
    write(&dir.join("items.txt"), &ids(splits.train.items()))?;
    write(&dir.join("train.tsv"), &render_pairs(&splits.train))?;
    write(&dir.join("valid.tsv"), &render_pairs(&splits.valid))?;
    write(&dir.join("test.tsv"), &render_pairs(&splits.test))?;
    let mut part = String::new();
    for (user, share) in prepared.partition.users().iter().enumerate() {
        let line = PartitionLine {
            user,
            share: share.clone(),
        };
        part.push_str(&serde_json::to_string(&line)?);
        part.push('\n');
    }
    write(&dir.join("partition.jsonl"), &part)?;
    write(
        &dir.join("manifest.json"),
        &(serde_json::to_string_pretty(&prepared.manifest)? + "\n"),
    )
}

fn parse_pairs(path: &Path, n_users: usize) -> Result<Vec<Vec<usize>>> {
    let text = read(path)?;
    let mut lists = vec![Vec::new(); n_users];
    for (n, line) in text.lines().enumerate() {
        let parse_err = |m: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: m,
        };
        let mut parts = line.split('\t');
        let (Some(u), Some(i), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err(format!("expected two fields, got {line:?}")));
        };
        let u: usize = u.parse().map_err(|_| parse_err(format!("bad user index {u:?}")))?;
        let i: usize = i.parse().map_err(|_| parse_err(format!("bad item index {i:?}")))?;
        lists
            .get_mut(u)
            .ok_or_else(|| parse_err(format!("user index {u} out of range")))?
            .push(i);
    }
    Ok(lists)
}

pub fn load_prepared(dir: &Path) -> Result<Prepared> {
    let manifest: PreparedManifest = serde_json::from_str(&read(&dir.join("manifest.json"))?)?;
    let users = IdMap::from_raw(read(&dir.join("users.txt"))?.lines().map(String::from).collect())?;
    let items = IdMap::from_raw(read(&dir.join("items.txt"))?.lines().map(String::from).collect())?;
    let n = users.len();
    let table = |name: &str| -> Result<InteractionTable> {
        InteractionTable::new(users.clone(), items.clone(), parse_pairs(&dir.join(name), n)?)
    };
    let splits = DatasetSplits {
        train: table("train.tsv")?,
        valid: table("valid.tsv")?,
        test: table("test.tsv")?,
    };
    let part_path = dir.join("partition.jsonl");
    let mut shares = Vec::with_capacity(n);
    for (k, line) in read(&part_path)?.lines().enumerate() {
        let parsed: PartitionLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: part_path.clone(),
            line: k + 1,
            message: e.to_string(),
        })?;
        if parsed.user != k {
            return Err(Error::Parse {
                path: part_path.clone(),
                line: k + 1,
                message: format!("expected user {k}, found {}", parsed.user),
            });
        }
        shares.push(parsed.share);
    }
    let partition = SharingPartition::new(shares);
    partition.validate(&splits.train)?;
    Ok(Prepared {
        splits,
        partition,
        manifest,
    })
}
