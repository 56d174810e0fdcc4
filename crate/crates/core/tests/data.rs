use std::fs;

use fedshare::config::RunConfig;
use fedshare::datasets::{
    assign_sharing, issue_unshare_requests, load_interactions, load_prepared, save_prepared, split_holdout, Delimiter,
    GroupRatios, InteractionTable, SplitRatios,
};
use fedshare::datasets::synthetic::PlantedClusters;
use proptest::prelude::*;

fn ml_style_log(users: usize, items: usize, sep: &str) -> String {
    let mut out = String::new();
    for u in 1..=users {
        for k in 0..(5 + u % 7) {
            let i = 1 + (u * 7 + k * 3) % items;
            out += &format!("{u}{sep}{i}{sep}{}{sep}{}\n", 1 + k % 5, 881250949 + k);
        }
    }
    out
}

#[test]
fn movielens_formats_load() {
    let dir = tempfile::tempdir().unwrap();
    let tab = dir.path().join("u.data");
    fs::write(&tab, ml_style_log(30, 40, "\t")).unwrap();
    let t = load_interactions(&tab, &Delimiter::Tab).unwrap();
    assert_eq!(t.num_users(), 30);

    let colons = dir.path().join("ratings.dat");
    fs::write(&colons, ml_style_log(30, 40, "::")).unwrap();
    let c = load_interactions(&colons, &"::".parse().unwrap()).unwrap();
    assert_eq!(c.num_pairs(), t.num_pairs());
    assert_eq!(c.source_records(), t.source_records());
}

#[test]
fn malformed_line_is_reported_with_its_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.data");
    fs::write(&path, "1\t2\t3\t4\n5\n").unwrap();
    let err = load_interactions(&path, &Delimiter::Tab).unwrap_err().to_string();
    assert!(err.contains("bad.data") && err.contains('2'), "{err}");
}

#[test]
fn prepare_from_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("u.data");
    fs::write(&log, ml_style_log(60, 50, "\t")).unwrap();
    let mut cfg = RunConfig::default();
    cfg.set_seed(2);
    cfg.source = log.display().to_string();
    let prepared = cfg.prepare().unwrap();
    prepared.partition.validate(&prepared.splits.train).unwrap();

    let out = dir.path().join("data");
    save_prepared(&out, &prepared).unwrap();
    let back = load_prepared(&out).unwrap();
    assert_eq!(back.partition, prepared.partition);
    assert_eq!(back.splits.train.user_items(), prepared.splits.train.user_items());
    assert_eq!(back.splits.test.user_items(), prepared.splits.test.user_items());
    assert_eq!(back.manifest.config_hash, cfg.data_hash());
}

fn fixture(seed: u64) -> InteractionTable {
    PlantedClusters::small(seed).generate()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn partition_invariants_hold(
        seed in 0u64..1000,
        full in 0.0f64..0.4,
        partial in 0.0f64..0.4,
        partial_ratio in 0.0f64..=1.0,
        unshare in 0.0f64..=1.0,
    ) {
        let table = fixture(seed % 5);
        let splits = split_holdout(&table, SplitRatios::EIGHT_ONE_ONE, seed).unwrap();
        let groups = GroupRatios { full, partial, none: 1.0 - full - partial };
        let p = assign_sharing(&splits, groups, partial_ratio, seed).unwrap();
        let p = issue_unshare_requests(&p, unshare, seed).unwrap();
        prop_assert!(p.validate(&splits.train).is_ok());
        let shared = p.shared_edges();
        let withdrawn = p.unlearn_edges();
        prop_assert!(withdrawn.is_subset(&shared));
        prop_assert_eq!(p.remaining_shared_edges().len() + withdrawn.len(), shared.len());
        // holdout and train never overlap
        for u in 0..splits.train.num_users() {
            for &i in splits.test.items_of(u) {
                prop_assert!(!splits.train.contains(u, i));
            }
        }
    }
}
