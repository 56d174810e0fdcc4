use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fedshare::config::RunConfig;
use fedshare::datasets::load_prepared;
use fedshare::fedlearn::{read_matrix, ServerState, SharedData};
use tempfile::TempDir;

fn fedshare(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedshare"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "failed: {}", stderr(&o));
    o
}

fn out_arg(dir: &TempDir) -> String {
    dir.path().join("run").display().to_string()
}

#[test]
fn missing_input_names_the_path() {
    let tmp = TempDir::new().unwrap();
    let conf = tmp.path().join("bad.conf");
    fs::write(&conf, "data.source = /no/such/dir/u.data\n").unwrap();
    let o = fedshare(&["--config", conf.to_str().unwrap(), "--out", &out_arg(&tmp), "prepare"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/no/such/dir/u.data"), "{}", stderr(&o));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let o = fedshare(&["--config", "/no/such.conf", "--out", &out_arg(&tmp), "prepare"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/no/such.conf"));
}

#[test]
fn unknown_key_exits_1() {
    let tmp = TempDir::new().unwrap();
    let conf = tmp.path().join("c.conf");
    fs::write(&conf, "train.dim = 8\ntrain.dimm = 8\n").unwrap();
    let o = fedshare(&["--config", conf.to_str().unwrap(), "--out", &out_arg(&tmp), "prepare"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn bad_flag_exits_1() {
    let o = fedshare(&["--frobnicate", "prepare"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn steps_out_of_order_exit_2() {
    let tmp = TempDir::new().unwrap();
    let out = out_arg(&tmp);
    let o = fedshare(&["--out", &out, "train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("prepare"));

    ok(fedshare(&["--out", &out, "prepare"]));
    let o = fedshare(&["--out", &out, "unlearn"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = fedshare(&["--out", &out, "eval", "--phase", "retrained"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unlearn_refuses_checkpoint_without_snapshots() {
    let tmp = TempDir::new().unwrap();
    let out = out_arg(&tmp);
    ok(fedshare(&["--out", &out, "--rounds", "1", "prepare"]));
    ok(fedshare(&["--out", &out, "--rounds", "1", "train"]));
    let manifest = Path::new(&out).join("learned/manifest.json");
    let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    m["snapshot_rounds"] = serde_json::json!([]);
    fs::write(&manifest, serde_json::to_string(&m).unwrap()).unwrap();
    let o = fedshare(&["--out", &out, "--rounds", "1", "unlearn"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("snapshot"));
}

#[test]
fn zero_learning_rate_keeps_initialization() {
    let tmp = TempDir::new().unwrap();
    let out = out_arg(&tmp);
    let flags = ["--out", out.as_str(), "--rounds", "1", "--lr", "0", "--seed", "7"];
    ok(fedshare(&[&flags[..], &["prepare"]].concat()));
    ok(fedshare(&[&flags[..], &["train"]].concat()));

    let mut cfg = RunConfig::default();
    cfg.set_seed(7);
    cfg.train.learning_rate = 0.0;
    cfg.train.server_learning_rate = 0.0;
    let data = load_prepared(&Path::new(&out).join("data")).unwrap();
    let n = data.splits.num_items();
    let init = ServerState::init(n, &SharedData::from_partition(&data.partition), &cfg.train).unwrap();
    let saved = read_matrix(&Path::new(&out).join("learned/item_table.f64"), n, cfg.train.dim).unwrap();
    let same = init
        .item_table
        .values()
        .as_slice()
        .iter()
        .zip(saved.as_slice())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    assert!(same, "item table moved with a zero learning rate");
}

#[test]
fn prepare_is_byte_identical_on_rerun() {
    let tmp = TempDir::new().unwrap();
    let out = out_arg(&tmp);
    ok(fedshare(&["--out", &out, "prepare"]));
    let snapshot = |dir: &Path| {
        let mut files: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .map(|p| (p.file_name().unwrap().to_owned(), fs::read(&p).unwrap()))
            .collect();
        files.sort();
        files
    };
    let data = Path::new(&out).join("data");
    let first = snapshot(&data);
    assert!(!first.is_empty());
    ok(fedshare(&["--out", &out, "prepare"]));
    assert_eq!(first, snapshot(&data));
}

#[test]
fn eval_refuses_mismatched_config() {
    let tmp = TempDir::new().unwrap();
    let out = out_arg(&tmp);
    ok(fedshare(&["--out", &out, "--rounds", "2", "prepare"]));
    ok(fedshare(&["--out", &out, "--rounds", "2", "train"]));
    let o = ok(fedshare(&["--out", &out, "--rounds", "2", "eval", "--csv"]));
    assert!(stdout(&o).contains("hr@10"));
    assert!(Path::new(&out).join("reports/eval_learned.csv").exists());
    let o = fedshare(&["--out", &out, "--rounds", "3", "eval"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("different configuration"));
}

#[test]
fn full_pipeline_runs() {
    let tmp = TempDir::new().unwrap();
    let out = out_arg(&tmp);
    let run = |cmd: &[&str]| ok(fedshare(&[&["--out", out.as_str(), "--rounds", "3"][..], cmd].concat()));
    run(&["prepare"]);
    run(&["train"]);
    let o = run(&["unlearn"]);
    assert!(stdout(&o).contains("unlearned"));
    run(&["retrain"]);
    for phase in ["learned", "unlearned", "retrained"] {
        run(&["eval", "--phase", phase]);
        assert!(Path::new(&out).join(format!("reports/eval_{phase}.json")).exists());
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(Path::new(&out).join("reports/unlearn.json")).unwrap()).unwrap();
    assert!(report["removed_interactions"].as_u64().unwrap() > 0);
}

#[test]
fn unlearn_accepts_request_file() {
    let tmp = TempDir::new().unwrap();
    let out = out_arg(&tmp);
    let run = |cmd: &[&str]| fedshare(&[&["--out", out.as_str(), "--rounds", "2"][..], cmd].concat());
    ok(run(&["prepare"]));
    ok(run(&["train"]));
    let prepared = Path::new(&out).join("data/unshare_requests.jsonl");
    let first = fs::read_to_string(&prepared).unwrap().lines().next().unwrap().to_string();
    let reqs = tmp.path().join("one.jsonl");
    fs::write(&reqs, format!("{first}\n")).unwrap();
    let o = ok(run(&["unlearn", "--requests", reqs.to_str().unwrap()]));
    assert!(stdout(&o).contains("unlearned"));
    ok(run(&["eval", "--phase", "unlearned"]));
}

#[test]
fn storage_report_for_ml100k_shape() {
    let tmp = TempDir::new().unwrap();
    let o = ok(fedshare(&["--out", &out_arg(&tmp), "report-storage", "--items", "1682", "--users", "943"]));
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("fedshare")).unwrap();
    assert!(line.contains("1291776"), "{text}");
}

#[test]
fn storage_report_needs_catalogue_size() {
    let tmp = TempDir::new().unwrap();
    let o = fedshare(&["--out", &out_arg(&tmp), "report-storage"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn concurrent_run_is_refused() {
    let tmp = TempDir::new().unwrap();
    let out = out_arg(&tmp);
    fs::create_dir_all(&out).unwrap();
    fs::write(Path::new(&out).join(".lock"), "").unwrap();
    let o = fedshare(&["--out", &out, "prepare"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("lock"));
}
