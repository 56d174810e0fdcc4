//! Plain-text `key = value` run configuration.
//!
//! Every key has a default; unknown keys and repeated keys are errors.
//! Lines starting with `#` are comments.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::datasets::synthetic::{LatentPreferences, PlantedClusters};
use crate::datasets::{
    assign_sharing, filter_min_interactions, issue_unshare_requests, load_interactions, split_holdout,
    Delimiter, GroupRatios, InteractionTable, Prepared, PreparedManifest, SplitRatios,
};
use crate::error::{Error, Result};
use crate::eval::UserSource;
use crate::fedlearn::{LocalDataMode, ServerMode, TrainConfig};
use crate::seed::ceil_count;
use crate::unlearn::{StorageParams, UnlearnConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// A path to an interaction log, or `synthetic:planted` /
    /// `synthetic:latent`.
    pub source: String,
    pub delimiter: Delimiter,
    pub min_interactions: usize,
    pub split: SplitRatios,
    pub groups: GroupRatios,
    pub partial_ratio: f64,
    pub unshare_ratio: f64,
    pub train: TrainConfig,
    pub unlearn: UnlearnConfig,
    pub retention: f64,
    /// Catalogue size and user count for storage reports when no prepared
    /// data exists (0: take them from the data).
    pub storage_items: usize,
    pub storage_users: usize,
    pub user_source: UserSource,
    pub out: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            source: "synthetic:planted".into(),
            delimiter: Delimiter::Tab,
            min_interactions: 0,
            split: SplitRatios::EIGHT_ONE_ONE,
            groups: GroupRatios::ONE_TWO_SEVEN,
            partial_ratio: 0.3,
            unshare_ratio: 0.3,
            train: TrainConfig {
                eval_k: vec![10, 20],
                ..TrainConfig::default()
            },
            unlearn: UnlearnConfig::default(),
            retention: 1.0,
            storage_items: 0,
            storage_users: 0,
            user_source: UserSource::Local,
            out: PathBuf::from("runs/default"),
            seed: 0,
        };
        c.set_seed(0);
        c
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Section {
    Data,
    Train,
    Unlearn,
    Report,
    Location,
}

const KEYS: &[(&str, Section)] = &[
    ("seed", Section::Data),
    ("data.source", Section::Data),
    ("data.delimiter", Section::Data),
    ("data.min_interactions", Section::Data),
    ("split.train", Section::Data),
    ("split.valid", Section::Data),
    ("split.test", Section::Data),
    ("groups.full", Section::Data),
    ("groups.partial", Section::Data),
    ("groups.none", Section::Data),
    ("share.partial_ratio", Section::Data),
    ("share.unshare_ratio", Section::Data),
    ("train.dim", Section::Train),
    ("train.rounds", Section::Train),
    ("train.clients_per_round", Section::Train),
    ("train.local_epochs", Section::Train),
    ("train.learning_rate", Section::Train),
    ("train.server_learning_rate", Section::Train),
    ("train.server_epochs", Section::Train),
    ("train.bpr_batch_size", Section::Train),
    ("train.cl_batch_size", Section::Train),
    ("train.client_layers", Section::Train),
    ("train.server_layers", Section::Train),
    ("train.snapshot_capacity", Section::Train),
    ("train.local_data", Section::Train),
    ("train.server_mode", Section::Train),
    ("train.server_bpr", Section::Train),
    ("train.eval_interval", Section::Train),
    ("loss.tau", Section::Train),
    ("loss.lambda_reg", Section::Train),
    ("loss.lambda_cl", Section::Train),
    ("loss.negatives", Section::Train),
    ("unlearn.rounds", Section::Unlearn),
    ("unlearn.clients_per_round", Section::Unlearn),
    ("unlearn.learning_rate", Section::Unlearn),
    ("unlearn.tau", Section::Unlearn),
    ("unlearn.snapshots_used", Section::Unlearn),
    ("unlearn.batch_size", Section::Unlearn),
    ("unlearn.epochs", Section::Unlearn),
    ("unlearn.forgotten_graph", Section::Unlearn),
    ("unlearn.remaining_fl", Section::Unlearn),
    ("eval.k", Section::Report),
    ("eval.user_source", Section::Report),
    ("storage.retention", Section::Report),
    ("storage.num_items", Section::Report),
    ("storage.num_users", Section::Report),
    ("out", Section::Location),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn local_data_name(m: LocalDataMode) -> &'static str {
    match m {
        LocalDataMode::RemainingOnly => "remaining_only",
        LocalDataMode::AllTrain => "all_train",
    }
}

fn server_mode_name(m: ServerMode) -> &'static str {
    match m {
        ServerMode::Refine => "refine",
        ServerMode::FedAvgClient => "fedavg_client",
    }
}

impl RunConfig {
    /// Sets the master seed everywhere it is used.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.unlearn.seed = seed;
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: {key} set twice", n + 1)));
            }
            c.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config error: "))))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let u = &mut self.unlearn;
        match key {
            "seed" => {
                let s = parse(key, value)?;
                self.set_seed(s);
            }
            "data.source" => self.source = value.to_string(),
            "data.delimiter" => self.delimiter = value.parse().map_err(|_| Error::Config(format!("{key}: bad delimiter")))?,
            "data.min_interactions" => self.min_interactions = parse(key, value)?,
            "split.train" => self.split.train = parse(key, value)?,
            "split.valid" => self.split.valid = parse(key, value)?,
            "split.test" => self.split.test = parse(key, value)?,
            "groups.full" => self.groups.full = parse(key, value)?,
            "groups.partial" => self.groups.partial = parse(key, value)?,
            "groups.none" => self.groups.none = parse(key, value)?,
            "share.partial_ratio" => self.partial_ratio = parse(key, value)?,
            "share.unshare_ratio" => self.unshare_ratio = parse(key, value)?,
            "train.dim" => t.dim = parse(key, value)?,
            "train.rounds" => t.rounds = parse(key, value)?,
            "train.clients_per_round" => t.clients_per_round = parse(key, value)?,
            "train.local_epochs" => t.local_epochs = parse(key, value)?,
            "train.learning_rate" => t.learning_rate = parse(key, value)?,
            "train.server_learning_rate" => t.server_learning_rate = parse(key, value)?,
            "train.server_epochs" => t.server_epochs = parse(key, value)?,
            "train.bpr_batch_size" => t.bpr_batch_size = parse(key, value)?,
            "train.cl_batch_size" => t.cl_batch_size = parse(key, value)?,
            "train.client_layers" => t.client_layers = parse(key, value)?,
            "train.server_layers" => t.server_layers = parse(key, value)?,
            "train.snapshot_capacity" => t.snapshot_capacity = parse(key, value)?,
            "train.local_data" => {
                t.local_data = match value {
                    "remaining_only" => LocalDataMode::RemainingOnly,
                    "all_train" => LocalDataMode::AllTrain,
                    _ => return Err(Error::Config(format!("{key}: expected remaining_only or all_train"))),
                }
            }
            "train.server_mode" => {
                t.server_mode = match value {
                    "refine" => ServerMode::Refine,
                    "fedavg_client" => ServerMode::FedAvgClient,
                    _ => return Err(Error::Config(format!("{key}: expected refine or fedavg_client"))),
                }
            }
            "train.server_bpr" => t.server_bpr = parse_bool(key, value)?,
            "train.eval_interval" => t.eval_interval = parse(key, value)?,
            "loss.tau" => t.loss.tau = parse(key, value)?,
            "loss.lambda_reg" => t.loss.lambda_reg = parse(key, value)?,
            "loss.lambda_cl" => t.loss.lambda_cl = parse(key, value)?,
            "loss.negatives" => t.loss.negatives_per_positive = parse(key, value)?,
            "unlearn.rounds" => u.rounds = parse(key, value)?,
            "unlearn.clients_per_round" => u.clients_per_round = parse(key, value)?,
            "unlearn.learning_rate" => u.learning_rate = parse(key, value)?,
            "unlearn.tau" => u.tau = parse(key, value)?,
            "unlearn.snapshots_used" => u.snapshots_used = parse(key, value)?,
            "unlearn.batch_size" => u.batch_size = parse(key, value)?,
            "unlearn.epochs" => u.epochs = parse(key, value)?,
            "unlearn.forgotten_graph" => u.forgotten_graph = parse_bool(key, value)?,
            "unlearn.remaining_fl" => u.remaining_fl = parse_bool(key, value)?,
            "eval.k" => {
                t.eval_k = value
                    .split(',')
                    .map(|k| parse(key, k.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "eval.user_source" => {
                self.user_source = match value {
                    "local" => UserSource::Local,
                    "server" => UserSource::Server,
                    _ => return Err(Error::Config(format!("{key}: expected local or server"))),
                }
            }
            "storage.retention" => self.retention = parse(key, value)?,
            "storage.num_items" => self.storage_items = parse(key, value)?,
            "storage.num_users" => self.storage_users = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    fn value(&self, key: &str) -> String {
        let t = &self.train;
        let u = &self.unlearn;
        match key {
            "seed" => self.seed.to_string(),
            "data.source" => self.source.clone(),
            "data.delimiter" => self.delimiter.to_string(),
            "data.min_interactions" => self.min_interactions.to_string(),
            "split.train" => self.split.train.to_string(),
            "split.valid" => self.split.valid.to_string(),
            "split.test" => self.split.test.to_string(),
            "groups.full" => self.groups.full.to_string(),
            "groups.partial" => self.groups.partial.to_string(),
            "groups.none" => self.groups.none.to_string(),
            "share.partial_ratio" => self.partial_ratio.to_string(),
            "share.unshare_ratio" => self.unshare_ratio.to_string(),
            "train.dim" => t.dim.to_string(),
            "train.rounds" => t.rounds.to_string(),
            "train.clients_per_round" => t.clients_per_round.to_string(),
            "train.local_epochs" => t.local_epochs.to_string(),
            "train.learning_rate" => t.learning_rate.to_string(),
            "train.server_learning_rate" => t.server_learning_rate.to_string(),
            "train.server_epochs" => t.server_epochs.to_string(),
            "train.bpr_batch_size" => t.bpr_batch_size.to_string(),
            "train.cl_batch_size" => t.cl_batch_size.to_string(),
            "train.client_layers" => t.client_layers.to_string(),
            "train.server_layers" => t.server_layers.to_string(),
            "train.snapshot_capacity" => t.snapshot_capacity.to_string(),
            "train.local_data" => local_data_name(t.local_data).into(),
            "train.server_mode" => server_mode_name(t.server_mode).into(),
            "train.server_bpr" => t.server_bpr.to_string(),
            "train.eval_interval" => t.eval_interval.to_string(),
            "loss.tau" => t.loss.tau.to_string(),
            "loss.lambda_reg" => t.loss.lambda_reg.to_string(),
            "loss.lambda_cl" => t.loss.lambda_cl.to_string(),
            "loss.negatives" => t.loss.negatives_per_positive.to_string(),
            "unlearn.rounds" => u.rounds.to_string(),
            "unlearn.clients_per_round" => u.clients_per_round.to_string(),
            "unlearn.learning_rate" => u.learning_rate.to_string(),
            "unlearn.tau" => u.tau.to_string(),
            "unlearn.snapshots_used" => u.snapshots_used.to_string(),
            "unlearn.batch_size" => u.batch_size.to_string(),
            "unlearn.epochs" => u.epochs.to_string(),
            "unlearn.forgotten_graph" => u.forgotten_graph.to_string(),
            "unlearn.remaining_fl" => u.remaining_fl.to_string(),
            "eval.k" => t.eval_k.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            "eval.user_source" => match self.user_source {
                UserSource::Local => "local".into(),
                UserSource::Server => "server".into(),
            },
            "storage.retention" => self.retention.to_string(),
            "storage.num_items" => self.storage_items.to_string(),
            "storage.num_users" => self.storage_users.to_string(),
            "out" => self.out.display().to_string(),
            _ => unreachable!("key table and value() disagree on {key}"),
        }
    }

    /// Canonical text: every key, in a fixed order.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEYS {
            let _ = writeln!(out, "{key} = {}", self.value(key));
        }
        out
    }

    fn hash_sections(&self, upto: Section) -> String {
        let mut h = Sha256::new();
        for (key, section) in KEYS {
            if *section <= upto {
                h.update(format!("{key} = {}\n", self.value(key)).as_bytes());
            }
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Identifies the prepared data.
    pub fn data_hash(&self) -> String {
        self.hash_sections(Section::Data)
    }

    /// Identifies a trained (or retrained) model.
    pub fn train_hash(&self) -> String {
        self.hash_sections(Section::Train)
    }

    /// Identifies an unlearned model.
    pub fn unlearn_hash(&self) -> String {
        self.hash_sections(Section::Unlearn)
    }

    /// Everything except the output location.
    pub fn config_hash(&self) -> String {
        self.hash_sections(Section::Report)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.split.validate().map_err(cfg)?;
        self.groups.validate().map_err(cfg)?;
        for (name, r) in [
            ("share.partial_ratio", self.partial_ratio),
            ("share.unshare_ratio", self.unshare_ratio),
            ("storage.retention", self.retention),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} {r} outside [0, 1]")));
            }
        }
        if self.source.is_empty() {
            return Err(Error::Config("data.source is empty".into()));
        }
        self.train.validate().map_err(cfg)?;
        self.unlearn.validate().map_err(cfg)?;
        if self.unlearn.snapshots_used > self.train.snapshot_capacity {
            return Err(Error::Config(format!(
                "unlearn.snapshots_used {} exceeds train.snapshot_capacity {}",
                self.unlearn.snapshots_used, self.train.snapshot_capacity
            )));
        }
        Ok(())
    }

    /// Storage model inputs; clients per round is `⌈fraction · users⌉`.
    pub fn storage_params(&self, num_items: usize, num_users: usize) -> StorageParams {
        let snapshots = match self.unlearn.snapshots_used {
            0 => self.train.snapshot_capacity,
            m => m,
        };
        StorageParams {
            num_items,
            dim: self.train.dim,
            snapshots,
            rounds: self.train.rounds,
            retention: self.retention,
            clients_per_round: ceil_count(self.train.clients_per_round * num_users as f64).min(num_users),
        }
    }

    /// The interaction log named by `data.source`, after the activity filter.
    pub fn load_source(&self) -> Result<InteractionTable> {
        let table = match self.source.as_str() {
            "synthetic:planted" => PlantedClusters::small(self.seed).generate(),
            "synthetic:latent" => LatentPreferences::movielens_100k_shape(self.seed).generate(),
            s if s.starts_with("synthetic:") => {
                return Err(Error::Config(format!("unknown synthetic source {s:?}")));
            }
            path => load_interactions(Path::new(path), &self.delimiter)?,
        };
        if self.min_interactions > 0 {
            filter_min_interactions(&table, self.min_interactions)
        } else {
            Ok(table)
        }
    }

    /// Splits, sharing groups and unshare requests for the configured data.
    pub fn prepare(&self) -> Result<Prepared> {
        self.prepare_table(self.load_source()?)
    }

    pub fn prepare_table(&self, table: InteractionTable) -> Result<Prepared> {
        let splits = split_holdout(&table, self.split, self.seed)?;
        let partition = assign_sharing(&splits, self.groups, self.partial_ratio, self.seed)?;
        let partition = if self.unshare_ratio > 0.0 {
            issue_unshare_requests(&partition, self.unshare_ratio, self.seed)?
        } else {
            partition
        };
        let manifest = PreparedManifest {
            source: self.source.clone(),
            source_records: table.source_records(),
            min_interactions: self.min_interactions,
            users: table.num_users(),
            items: table.num_items(),
            interactions: table.num_pairs(),
            train: splits.train.num_pairs(),
            valid: splits.valid.num_pairs(),
            test: splits.test.num_pairs(),
            split_ratios: self.split,
            group_ratios: self.groups,
            partial_ratio: self.partial_ratio,
            unshare_ratio: self.unshare_ratio,
            groups: partition.group_counts(),
            shared_interactions: partition.shared_edges().len(),
            unshared_interactions: partition.unlearn_edges().len(),
            seed: self.seed,
            config_hash: self.data_hash(),
        };
        Ok(Prepared {
            splits,
            partition,
            manifest,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let c = RunConfig::default();
        let text = c.serialize();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        assert_eq!(text.lines().count(), KEYS.len());

        let mut d = c.clone();
        d.set("loss.tau", "0.05").unwrap();
        d.set("eval.k", "5, 10,20").unwrap();
        d.set("train.server_mode", "fedavg_client").unwrap();
        d.set("data.delimiter", "::").unwrap();
        d.set("seed", "42").unwrap();
        let back = RunConfig::parse(&d.serialize()).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.train.seed, 42);
        assert_eq!(back.unlearn.seed, 42);
    }

    #[test]
    fn unknown_and_repeated_keys_fail() {
        assert!(matches!(RunConfig::parse("train.rounds = 3\nlr = 0.1\n"), Err(Error::Config(m)) if m.contains("line 2")));
        assert!(RunConfig::parse("seed = 1\nseed = 2\n").is_err());
        assert!(RunConfig::parse("train.rounds 3\n").is_err());
        assert!(RunConfig::parse("train.rounds = 0\n").is_err());
        assert!(RunConfig::parse("groups.full = 0.5\n").is_err());
        let c = RunConfig::parse("# comment\n\n train.rounds = 3 \n").unwrap();
        assert_eq!(c.train.rounds, 3);
    }

    #[test]
    fn hashes_follow_sections() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.config_hash(), b.config_hash());
        b.unlearn.rounds += 1;
        assert_eq!(a.train_hash(), b.train_hash());
        assert_ne!(a.unlearn_hash(), b.unlearn_hash());
        b.train.rounds += 1;
        assert_eq!(a.data_hash(), b.data_hash());
        assert_ne!(a.train_hash(), b.train_hash());
        assert_eq!(a.config_hash().len(), 16);
    }

    #[test]
    fn storage_params_use_snapshot_count() {
        let mut c = RunConfig::default();
        c.unlearn.snapshots_used = 2;
        assert_eq!(c.storage_params(10, 5).snapshots, 2);
        c.unlearn.snapshots_used = 0;
        c.train.clients_per_round = 0.1;
        let p = c.storage_params(10, 943);
        assert_eq!(p.snapshots, c.train.snapshot_capacity);
        assert_eq!(p.clients_per_round, 95);
    }

    #[test]
    fn prepare_is_deterministic() {
        let c = RunConfig::default();
        let a = c.prepare().unwrap();
        let b = c.prepare().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.manifest.users, 200);
        assert_eq!(a.manifest.config_hash, c.data_hash());
        a.partition.validate(&a.splits.train).unwrap();
    }
}
