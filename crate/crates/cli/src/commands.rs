//! The four subcommands.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use vfusion_core::evaluation::{evaluate, render_table, TableRow};
use vfusion_core::model::Model;
use vfusion_core::training::{
    aggregate, load_checkpoint, save_checkpoint, summarize_run, train, write_epochs_csv, ExperimentReport,
    RunSummary, TrainData,
};

use crate::cache;
use crate::config::ExperimentConfig;
use crate::CliError;

pub const RUN_FILE: &str = "run.json";
pub const EVAL_FILE: &str = "eval.json";
pub const REPORT_FILE: &str = "report.json";

/// Contents of `run.json`, written once a seed has finished.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub cache_hash: String,
    pub summary: RunSummary,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let bytes = serde_json::to_vec_pretty(value).map_err(vfusion_core::Error::from)?;
    std::fs::write(path, bytes).map_err(vfusion_core::Error::from)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let root = cache::cache_root(&cfg.out_dir);
    let (dir, manifest, created) = cache::prepare(&cfg.dataset, &root)?;
    println!("cache {} ({})", dir.display(), if created { "created" } else { "up to date" });
    for (part, n) in &manifest.counts {
        println!("  {part}: {n} windows");
    }
    Ok(())
}

fn seeds(cfg: &ExperimentConfig, seed: Option<u64>) -> Vec<u64> {
    seed.map_or_else(|| cfg.train.seeds.clone(), |s| vec![s])
}

/// Aggregate of every finished seed, rewritten after each run.
fn write_experiment_report(exp_dir: &Path) -> Result<ExperimentReport, CliError> {
    let records = finished_runs(exp_dir)?;
    let report = aggregate(&records.iter().map(|(_, r)| r.summary.clone()).collect::<Vec<_>>());
    write_json(&exp_dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

fn finished_runs(exp_dir: &Path) -> Result<Vec<(PathBuf, RunRecord)>, CliError> {
    let mut out = Vec::new();
    let Ok(entries) = std::fs::read_dir(exp_dir) else { return Ok(out) };
    let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.join(RUN_FILE).is_file()).collect();
    dirs.sort();
    for d in dirs {
        let record: RunRecord = read_json(&d.join(RUN_FILE))?;
        out.push((d, record));
    }
    Ok(out)
}

pub fn train_runs(cfg: &ExperimentConfig, config_text: &str, seed: Option<u64>) -> Result<(), CliError> {
    let graph = cfg.graph()?;
    let mut settings = cfg.settings();
    settings.train.seeds = seeds(cfg, seed);
    let data = cache::load(&cfg.dataset, &cache::cache_root(&cfg.out_dir))?;
    let exp_dir = cfg.experiment_dir();
    for &seed in &settings.train.seeds {
        let run_dir = exp_dir.join(seed.to_string());
        if run_dir.join(RUN_FILE).is_file() {
            let record: RunRecord = read_json(&run_dir.join(RUN_FILE))?;
            if record.cache_hash != data.hash {
                warn!(seed, "finished run was trained on different data; delete {} to retrain", run_dir.display());
            }
            println!("seed {seed}: already finished, skipped");
            continue;
        }
        std::fs::create_dir_all(&run_dir).map_err(vfusion_core::Error::from)?;
        std::fs::write(run_dir.join("config.toml"), config_text).map_err(vfusion_core::Error::from)?;
        write_json(&run_dir.join("graph.json"), &graph)?;

        let model = Model::build(&graph, &cfg.extractor, seed)?;
        let inputs = TrainData { labeled: &data.train, unlabeled: data.unlabeled.as_ref(), valid: &data.valid };
        info!(seed, dir = %run_dir.display(), "training");
        let run = train(model, inputs, &settings, seed)?;
        save_checkpoint(&run.model, &run_dir.join("checkpoint.json"))?;
        write_epochs_csv(&run.epochs, &run_dir.join("epochs.csv"))?;
        let summary = summarize_run(&run, &data.test, settings.train.eval_batch_size)?;
        let line: Vec<String> = summary.test.iter().map(|m| format!("{} f1 {:.4} acc {:.4}", m.node, m.f1, m.accuracy)).collect();
        println!("seed {seed}: best epoch {} of {}, {}", summary.best_epoch, summary.epochs_run, line.join(", "));
        write_json(&run_dir.join(RUN_FILE), &RunRecord { cache_hash: data.hash.clone(), summary })?;
    }
    let report = write_experiment_report(&exp_dir)?;
    print!("{}", table(&cfg.name, &report));
    Ok(())
}

fn table(name: &str, report: &ExperimentReport) -> String {
    render_table(&columns(), &rows(name, Some(report)))
}

fn columns() -> Vec<String> {
    vec!["f1".into(), "accuracy".into()]
}

fn rows(name: &str, report: Option<&ExperimentReport>) -> Vec<TableRow> {
    match report {
        Some(r) if !r.nodes.is_empty() => r
            .nodes
            .iter()
            .map(|(node, agg)| TableRow {
                dataset: name.to_string(),
                modality: node.clone(),
                cells: [("f1".to_string(), Some(agg.f1)), ("accuracy".to_string(), Some(agg.accuracy))].into(),
            })
            .collect(),
        _ => vec![TableRow {
            dataset: name.to_string(),
            modality: "-".into(),
            cells: [("f1".to_string(), None), ("accuracy".to_string(), None)].into(),
        }],
    }
}

pub fn eval(cfg: &ExperimentConfig, seed: Option<u64>, nodes: &[String]) -> Result<(), CliError> {
    let exp_dir = cfg.experiment_dir();
    let wanted: BTreeSet<u64> = seeds(cfg, seed).into_iter().collect();
    let runs: Vec<(u64, PathBuf)> = wanted
        .iter()
        .map(|s| (*s, exp_dir.join(s.to_string())))
        .filter(|(_, d)| d.join("checkpoint.json").is_file())
        .collect();
    if runs.is_empty() {
        return Err(CliError::Data(format!("no trained runs for seeds {wanted:?} under {}", exp_dir.display())));
    }
    let data = cache::load(&cfg.dataset, &cache::cache_root(&cfg.out_dir))?;
    let mut summaries = Vec::new();
    for (seed, dir) in runs {
        let model = load_checkpoint(&dir.join("checkpoint.json"))?;
        let graph = model.graph();
        let nodes: Vec<String> = if nodes.is_empty() { graph.inference_nodes().to_vec() } else { nodes.to_vec() };
        if let Some(bad) = nodes.iter().find(|n| !graph.classification.contains(n)) {
            return Err(CliError::Usage(format!(
                "`{bad}` is not a classified node of this run; valid nodes: {}",
                graph.classification.join(", ")
            )));
        }
        let metrics = evaluate(&model, &data.test, &nodes, cfg.train.eval_batch_size)?;
        write_json(&dir.join(EVAL_FILE), &metrics)?;
        let record: Option<RunRecord> = read_json(&dir.join(RUN_FILE)).ok();
        summaries.push(RunSummary {
            seed,
            best_epoch: record.as_ref().map_or(0, |r| r.summary.best_epoch),
            best_valid: record.as_ref().map_or(f64::NAN, |r| r.summary.best_valid),
            epochs_run: record.as_ref().map_or(0, |r| r.summary.epochs_run),
            test: metrics,
        });
    }
    let report = aggregate(&summaries);
    write_json(&exp_dir.join(EVAL_FILE), &report)?;
    let text = table(&cfg.name, &report);
    std::fs::write(exp_dir.join("eval.txt"), &text).map_err(vfusion_core::Error::from)?;
    print!("{text}");
    Ok(())
}

/// Metrics of one experiment directory: the last `eval` if present, else
/// the training report.
fn experiment_metrics(dir: &Path) -> Option<ExperimentReport> {
    [EVAL_FILE, REPORT_FILE].iter().find_map(|f| {
        let path = dir.join(f);
        if !path.is_file() {
            return None;
        }
        match read_json::<ExperimentReport>(&path) {
            Ok(r) => Some(r),
            Err(e) => {
                warn!("{e}");
                None
            }
        }
    })
}

pub fn report(dirs: &[PathBuf], out: Option<&Path>) -> Result<(), CliError> {
    let mut all_rows = Vec::new();
    for dir in dirs {
        let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        let metrics = experiment_metrics(dir);
        if metrics.is_none() {
            eprintln!("warning: no metrics file in {}; row marked absent", dir.display());
        }
        all_rows.extend(rows(&name, metrics.as_ref()));
    }
    let mut text = render_table(&columns(), &all_rows);
    if let Some(path) = out {
        std::fs::write(path, &text).map_err(vfusion_core::Error::from)?;
        let _ = writeln!(text, "written to {}", path.display());
    }
    print!("{text}");
    Ok(())
}
