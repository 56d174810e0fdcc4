use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Bidirectional raw-id ↔ dense-index map; indices follow first appearance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdMap {
    raw: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn new() -> Self {
        IdMap::default()
    }

    pub fn from_raw(raw: Vec<String>) -> Result<Self> {
        let mut map = IdMap::new();
        for r in raw {
            if map.index.contains_key(&r) {
                return Err(Error::InvalidArgument(format!("duplicate raw id {r:?}")));
            }
            map.intern(&r);
        }
        Ok(map)
    }

    pub fn intern(&mut self, raw: &str) -> usize {
        if let Some(&i) = self.index.get(raw) {
            return i;
        }
        let i = self.raw.len();
        self.raw.push(raw.to_string());
        self.index.insert(raw.to_string(), i);
        i
    }

    pub fn get(&self, raw: &str) -> Option<usize> {
        self.index.get(raw).copied()
    }

    pub fn raw(&self, index: usize) -> &str {
        &self.raw[index]
    }

    pub fn raw_ids(&self) -> &[String] {
        &self.raw
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// Deduplicated implicit-feedback pairs, stored as each user's sorted item list.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionTable {
    users: IdMap,
    items: IdMap,
    user_items: Vec<Vec<usize>>,
    source_records: usize,
}

impl InteractionTable {
    /// Builds a table from per-user item lists (sorted and deduplicated here).
    pub fn new(users: IdMap, items: IdMap, mut user_items: Vec<Vec<usize>>) -> Result<Self> {
        if user_items.len() != users.len() {
            return Err(Error::Shape(format!(
                "{} item lists for {} users",
                user_items.len(),
                users.len()
            )));
        }
        for list in &mut user_items {
            list.sort_unstable();
            list.dedup();
            if let Some(&last) = list.last() {
                if last >= items.len() {
                    return Err(Error::InvalidArgument(format!("item index {last} out of range")));
                }
            }
        }
        let source_records = user_items.iter().map(Vec::len).sum();
        Ok(InteractionTable {
            users,
            items,
            user_items,
            source_records,
        })
    }

    pub(crate) fn with_source_records(mut self, n: usize) -> Self {
        self.source_records = n;
        self
    }

    pub fn users(&self) -> &IdMap {
        &self.users
    }

    pub fn items(&self) -> &IdMap {
        &self.items
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_pairs(&self) -> usize {
        self.user_items.iter().map(Vec::len).sum()
    }

    /// Records read from the source before deduplication and filtering.
    pub fn source_records(&self) -> usize {
        self.source_records
    }

    pub fn items_of(&self, user: usize) -> &[usize] {
        &self.user_items[user]
    }

    pub fn user_items(&self) -> &[Vec<usize>] {
        &self.user_items
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.user_items
            .get(user)
            .is_some_and(|l| l.binary_search(&item).is_ok())
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.user_items
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
    }

    /// Same id space, different pairs.
    pub(crate) fn with_lists(&self, user_items: Vec<Vec<usize>>) -> InteractionTable {
        InteractionTable {
            users: self.users.clone(),
            items: self.items.clone(),
            source_records: user_items.iter().map(Vec::len).sum(),
            user_items,
        }
    }
}

/// Field separator of an interaction log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Delimiter {
    Tab,
    Whitespace,
    Literal(String),
}

impl Delimiter {
    fn split<'a>(&self, line: &'a str) -> Vec<&'a str> {
        match self {
            Delimiter::Tab => line.split('\t').map(str::trim).collect(),
            Delimiter::Whitespace => line.split_whitespace().collect(),
            Delimiter::Literal(s) => line.split(s.as_str()).map(str::trim).collect(),
        }
    }
}

impl FromStr for Delimiter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tab" | "\\t" | "\t" => Ok(Delimiter::Tab),
            "whitespace" | "space" => Ok(Delimiter::Whitespace),
            "" => Err(Error::Config("empty delimiter".into())),
            other => Ok(Delimiter::Literal(other.to_string())),
        }
    }
}

impl fmt::Display for Delimiter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Delimiter::Tab => f.write_str("tab"),
            Delimiter::Whitespace => f.write_str("whitespace"),
            Delimiter::Literal(s) => f.write_str(s),
        }
    }
}

/// Reads `user<d>item[<d>rating[<d>timestamp]]` records. Ratings and
/// timestamps are ignored; any record is an interaction.
pub fn load_interactions(path: &Path, delimiter: &Delimiter) -> Result<InteractionTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text, delimiter, path)
}

pub(crate) fn parse_interactions(
    text: &str,
    delimiter: &Delimiter,
    path: &Path,
) -> Result<InteractionTable> {
    let mut users = IdMap::new();
    let mut items = IdMap::new();
    let mut lists: Vec<Vec<usize>> = Vec::new();
    let mut records = 0usize;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields = delimiter.split(line);
        if fields.len() < 2 || fields.len() > 4 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: format!("expected user{delimiter}item[{delimiter}rating[{delimiter}timestamp]], got {line:?}"),
            });
        }
        let u = users.intern(fields[0]);
        let i = items.intern(fields[1]);
        if u == lists.len() {
            lists.push(Vec::new());
        }
        lists[u].push(i);
        records += 1;
    }
    if records == 0 {
        return Err(Error::Empty(format!("{} has no interaction records", path.display())));
    }
    Ok(InteractionTable::new(users, items, lists)?.with_source_records(records))
}

/// Drops users with fewer than `k` interactions, then re-densifies ids.
/// Items are never filtered by degree, so a single pass reaches the fixpoint.
pub fn filter_min_interactions(table: &InteractionTable, k: usize) -> Result<InteractionTable> {
    let kept_users: Vec<usize> = (0..table.num_users())
        .filter(|&u| table.items_of(u).len() >= k && !table.items_of(u).is_empty())
        .collect();
    if kept_users.is_empty() {
        return Err(Error::Empty(format!("no user has at least {k} interactions")));
    }
    let mut item_used = vec![false; table.num_items()];
    for &u in &kept_users {
        for &i in table.items_of(u) {
            item_used[i] = true;
        }
    }
    let mut remap = vec![usize::MAX; table.num_items()];
    let mut items = IdMap::new();
    for (old, used) in item_used.iter().enumerate() {
        if *used {
            remap[old] = items.intern(table.items().raw(old));
        }
    }
    let mut users = IdMap::new();
    let mut lists = Vec::with_capacity(kept_users.len());
    for &u in &kept_users {
        users.intern(table.users().raw(u));
        lists.push(table.items_of(u).iter().map(|&i| remap[i]).collect());
    }
    Ok(InteractionTable::new(users, items, lists)?.with_source_records(table.source_records()))
}
