use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use fedshare::config::RunConfig;
use fedshare::datasets::{
    apply_unshare_requests, load_prepared, parse_unshare_requests, render_unshare_requests, requests_from_partition,
    save_prepared, InteractionTable, Prepared, SharingPartition,
};
use fedshare::eval::{
    evaluate, evaluate_federation, federation_users, forgetting_score, summarize, EvalData, ModelView, Phase,
};
use fedshare::fedlearn::{
    append_metrics, load_checkpoint, read_manifest, save_checkpoint, Federation, RoundMetrics, TrainConfig,
};
use fedshare::unlearn::{
    apply_unshare, build_forgotten_graph, forgotten_views, recent_snapshots, render_storage_table, retrain_oracle,
    run_unlearning, snapshot_views, storage_reports,
};
use fedshare::Error;
use log::info;

use crate::run_dir::RunDir;
use crate::{Cli, Command};

const LEARNED: &str = "learned";
const UNLEARNED: &str = "unlearned";
const RETRAINED: &str = "retrained";

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Config(_) => 1,
                Error::Prerequisite(_) => 2,
                _ => 3,
            };
        }
    }
    3
}

pub fn hint(e: &anyhow::Error) -> Option<&'static str> {
    e.chain().find_map(|c| match c.downcast_ref::<Error>() {
        Some(Error::Prerequisite(_)) => Some("the pipeline order is prepare, train, then unlearn or retrain, then eval"),
        Some(Error::Config(_)) => Some("check the config file and flags; unknown keys are rejected"),
        _ => None,
    })
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut c = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(format!("{}: {other}", path.display())),
        })?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        c.set_seed(seed);
    }
    if let Some(out) = &cli.out {
        c.out = out.clone();
    }
    if let Some(rounds) = cli.rounds {
        c.train.rounds = rounds;
    }
    if let Some(lr) = cli.lr {
        c.train.learning_rate = lr;
        c.train.server_learning_rate = lr;
    }
    if cli.no_cl {
        c.train.loss.lambda_cl = 0.0;
    }
    if cli.no_server_bpr {
        c.train.server_bpr = false;
    }
    if cli.no_forgotten_graph {
        c.unlearn.forgotten_graph = false;
    }
    if cli.no_remaining_fl {
        c.unlearn.remaining_fl = false;
    }
    c.validate()?;
    Ok(c)
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let config = effective_config(cli)?;
    let dir = RunDir::new(&config.out);
    let _lock = dir.lock()?;
    match &cli.command {
        Command::Prepare => prepare(&config, &dir),
        Command::Train => train(&config, &dir),
        Command::Unlearn { requests } => unlearn(&config, &dir, requests.as_deref()),
        Command::Retrain => retrain(&config, &dir),
        Command::Eval { phase, csv } => eval(&config, &dir, phase, *csv),
        Command::ReportStorage { items, users } => report_storage(&config, &dir, *items, *users),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn prepare(config: &RunConfig, dir: &RunDir) -> Result<()> {
    let prepared = config.prepare()?;
    save_prepared(&dir.data(), &prepared)?;
    let train = &prepared.splits.train;
    let requests = requests_from_partition(&prepared.partition, train.users(), train.items());
    write_text(&dir.data().join("unshare_requests.jsonl"), &render_unshare_requests(&requests)?)?;
    write_text(&dir.root().join("config.conf"), &config.serialize())?;
    let m = &prepared.manifest;
    println!(
        "prepared {} users, {} items, {} interactions (train {}, valid {}, test {})",
        m.users, m.items, m.interactions, m.train, m.valid, m.test
    );
    println!(
        "groups {:?}; {} shared interactions, {} to be unshared",
        m.groups, m.shared_interactions, m.unshared_interactions
    );
    println!("wrote {}", dir.data().display());
    Ok(())
}

fn load_data(config: &RunConfig, dir: &RunDir) -> Result<Prepared> {
    let path = dir.data();
    if !path.join("manifest.json").exists() {
        return Err(Error::Prerequisite(format!(
            "no prepared data in {}; run `fedshare prepare` first",
            path.display()
        ))
        .into());
    }
    let prepared = load_prepared(&path)?;
    if prepared.manifest.config_hash != config.data_hash() {
        return Err(Error::Config(format!(
            "prepared data in {} was made with a different data configuration (hash {} vs {})",
            path.display(),
            prepared.manifest.config_hash,
            config.data_hash()
        ))
        .into());
    }
    Ok(prepared)
}

fn learning_observer<'a>(
    config: &'a TrainConfig,
    valid: EvalData<'a>,
    log_path: &'a Path,
) -> impl FnMut(&Federation, &mut RoundMetrics) -> fedshare::Result<()> + 'a {
    move |fed, m| {
        let last = m.round == fed.server.round && m.round % config.rounds == 0;
        let due = config.eval_interval > 0 && m.round % config.eval_interval == 0;
        if due || last {
            m.eval = evaluate_federation(fed, &valid, &config.eval_k, fedshare::eval::UserSource::Local)?;
        }
        append_metrics(log_path, m)
    }
}

fn fresh_log(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    if path.exists() {
        fs::remove_file(path).with_context(|| format!("removing {}", path.display()))?;
    }
    Ok(())
}

fn train(config: &RunConfig, dir: &RunDir) -> Result<()> {
    let data = load_data(config, dir)?;
    let splits = &data.splits;
    let out = dir.checkpoint(LEARNED);
    let log_path = out.join("metrics.jsonl");
    fresh_log(&log_path)?;
    let valid = EvalData {
        holdout: &splits.valid,
        exclude: vec![&splits.train],
    };
    let mut fed = Federation::new(splits.num_items(), &splits.train, &data.partition, &config.train)?;
    fed.train(learning_observer(&config.train, valid, &log_path))?;
    save_checkpoint(&out, &fed, &config.train_hash(), LEARNED)?;
    if let Some(m) = fed.history.last() {
        println!("trained {} rounds; final validation {:?}", m.round, m.eval);
    }
    println!("wrote {}", out.display());
    Ok(())
}

/// Partition with unlearn sets from `requests`, or the prepared ones.
fn effective_partition(data: &Prepared, requests: Option<&Path>) -> Result<SharingPartition> {
    match requests {
        None => Ok(data.partition.clone()),
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let reqs = parse_unshare_requests(&text)?;
            let train = &data.splits.train;
            Ok(apply_unshare_requests(&data.partition, &reqs, train.users(), train.items())?)
        }
    }
}

fn require_checkpoint(dir: &RunDir, phase: &str, command: &str) -> Result<std::path::PathBuf> {
    let path = dir.checkpoint(phase);
    if !path.join("manifest.json").exists() {
        return Err(Error::Prerequisite(format!(
            "no {phase} checkpoint in {}; run `fedshare {command}` first",
            path.display()
        ))
        .into());
    }
    Ok(path)
}

fn check_hash(found: &str, expected: &str, what: &str) -> Result<()> {
    if found != expected {
        return Err(Error::Config(format!(
            "{what} was produced with a different configuration (hash {found}, current config {expected})"
        ))
        .into());
    }
    Ok(())
}

fn unlearn(config: &RunConfig, dir: &RunDir, requests: Option<&Path>) -> Result<()> {
    let data = load_data(config, dir)?;
    let learned = require_checkpoint(dir, LEARNED, "train")?;
    let manifest = read_manifest(&learned)?;
    check_hash(&manifest.config_hash, &config.train_hash(), "the learned checkpoint")?;
    if manifest.snapshot_rounds.is_empty() {
        return Err(Error::Prerequisite(format!(
            "the checkpoint in {} holds no snapshots; train with train.snapshot_capacity >= 1",
            learned.display()
        ))
        .into());
    }
    let partition = effective_partition(&data, requests)?;
    let splits = &data.splits;
    let mut fed = Federation::restore(load_checkpoint(&learned)?, &splits.train, &data.partition, &config.train)?;
    let before_users = federation_users(&fed, config.user_source)?;
    let before_items = fed.server.item_table.clone();

    let graph_f = build_forgotten_graph(&partition)?;
    let snaps = recent_snapshots(&fed.snapshots, config.unlearn.snapshots_used)?;
    let views = if config.unlearn.forgotten_graph {
        forgotten_views(&graph_f, &snaps, &config.train.server_spec())?
    } else {
        snapshot_views(&graph_f, &snaps)?
    };
    let removed = apply_unshare(&mut fed.server, &partition)?;
    info!("removed {removed} shared interactions from the server graph");
    let report = run_unlearning(&mut fed, &partition, &config.unlearn)?;
    let after_users = federation_users(&fed, config.user_source)?;
    let forgetting = forgetting_score(
        ModelView { users: &before_users, items: &before_items },
        ModelView { users: &after_users, items: &fed.server.item_table },
        &views,
        &partition,
    )?;

    let out = dir.checkpoint(UNLEARNED);
    save_checkpoint(&out, &fed, &config.unlearn_hash(), UNLEARNED)?;
    let train = &splits.train;
    let reqs = requests_from_partition(&partition, train.users(), train.items());
    write_text(&out.join("requests.jsonl"), &render_unshare_requests(&reqs)?)?;
    write_json(
        &dir.reports().join("unlearn.json"),
        &serde_json::json!({
            "removed_interactions": removed,
            "report": report,
            "forgetting": forgetting,
            "config_hash": config.unlearn_hash(),
        }),
    )?;
    println!(
        "unlearned {} items over {} rounds in {:.0} ms; mean cosine to forgotten views {:.4} -> {:.4}; mean rank of withdrawn items {:.1} -> {:.1}",
        report.forgotten_items,
        report.rounds.len(),
        report.wall_time_ms,
        forgetting.mean_cos_before,
        forgetting.mean_cos_after,
        forgetting.mean_rank_before,
        forgetting.mean_rank_after
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn retrain(config: &RunConfig, dir: &RunDir) -> Result<()> {
    let data = load_data(config, dir)?;
    let splits = &data.splits;
    let out = dir.checkpoint(RETRAINED);
    let log_path = out.join("metrics.jsonl");
    fresh_log(&log_path)?;
    let valid = EvalData {
        holdout: &splits.valid,
        exclude: vec![&splits.train],
    };
    let fed = retrain_oracle(
        splits.num_items(),
        &splits.train,
        &data.partition,
        &config.train,
        learning_observer(&config.train, valid, &log_path),
    )?;
    save_checkpoint(&out, &fed, &config.train_hash(), RETRAINED)?;
    println!("retrained {} rounds on the remaining data", fed.server.round);
    println!("wrote {}", out.display());
    Ok(())
}

fn eval(config: &RunConfig, dir: &RunDir, phase: &str, csv: bool) -> Result<()> {
    let (expected, phase_tag, command) = match phase {
        LEARNED => (config.train_hash(), Phase::Learning, "train"),
        UNLEARNED => (config.unlearn_hash(), Phase::Unlearning, "unlearn"),
        RETRAINED => (config.train_hash(), Phase::Retrain, "retrain"),
        other => {
            return Err(Error::Config(format!("unknown phase {other:?}; use learned, unlearned or retrained")).into())
        }
    };
    let data = load_data(config, dir)?;
    let path = require_checkpoint(dir, phase, command)?;
    let checkpoint = load_checkpoint(&path)?;
    check_hash(&checkpoint.manifest.config_hash, &expected, &format!("the {phase} checkpoint"))?;
    let splits = &data.splits;
    let (partition, train): (SharingPartition, InteractionTable) = match phase {
        LEARNED => (data.partition.clone(), splits.train.clone()),
        _ => {
            let requests = path.join("requests.jsonl");
            let p = effective_partition(&data, requests.exists().then_some(requests.as_path()))?;
            p.without_withdrawn(&splits.train)
        }
    };
    let fed = Federation::restore(checkpoint, &train, &partition, &config.train)?;
    let users = federation_users(&fed, config.user_source)?;
    let test = EvalData {
        holdout: &splits.test,
        exclude: vec![&splits.train, &splits.valid],
    };
    let per_user = evaluate(&users, &fed.server.item_table, &test, &config.train.eval_k)?;
    let report = summarize(per_user, &config.train.eval_k, phase_tag, config.seed, &expected)?;
    let reports = dir.reports();
    write_json(&reports.join(format!("eval_{phase}.json")), &report)?;
    if csv {
        write_text(&reports.join(format!("eval_{phase}.csv")), &report.to_csv())?;
    }
    print!("{}", report.render_table());
    Ok(())
}

fn report_storage(config: &RunConfig, dir: &RunDir, items: Option<usize>, users: Option<usize>) -> Result<()> {
    let manifest = || -> Option<fedshare::datasets::PreparedManifest> {
        let text = fs::read_to_string(dir.data().join("manifest.json")).ok()?;
        serde_json::from_str(&text).ok()
    };
    let pick = |flag: Option<usize>, configured: usize, from_data: fn(&fedshare::datasets::PreparedManifest) -> usize| {
        flag.or((configured > 0).then_some(configured))
            .or_else(|| manifest().map(|m| from_data(&m)))
    };
    let num_items = pick(items, config.storage_items, |m| m.items).ok_or_else(|| {
        Error::Prerequisite("catalogue size unknown: pass --items, set storage.num_items, or run `fedshare prepare`".into())
    })?;
    let num_users = pick(users, config.storage_users, |m| m.users).ok_or_else(|| {
        Error::Prerequisite("user count unknown: pass --users, set storage.num_users or run `fedshare prepare`".into())
    })?;
    let reports = storage_reports(&config.storage_params(num_items, num_users))?;
    write_json(&dir.reports().join("storage.json"), &reports)?;
    print!("{}", render_storage_table(&reports));
    Ok(())
}
