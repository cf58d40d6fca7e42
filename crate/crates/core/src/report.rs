//! Run directories, per-round CSV, manifests and multi-seed summaries.
//!
//! A run directory holds
//!
//! * `manifest.json`: resolved config, seed, versions, dataset hashes and
//!   start/end timestamps. `finished` stays `null` until the run completes,
//!   so an interrupted run is recognisable.
//! * `rounds.csv`: one row per round and client with the columns
//!   `round,client_id,loss,selected,weight,test_dice`. Absent values are
//!   empty fields.
//! * `f1.fmpv`, `f2.fmpv`: final checkpoints, plus
//!   `checkpoints/round-NNNN-f{1,2}.fmpv` when periodic checkpoints are on.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::write_checkpoint;
use crate::orchestrator::{
    generate_datasets, run_experiment_with, ExperimentConfig, ExperimentOutcome, Globals, RoundReport, RunOptions,
};
use crate::stats::quantile;
use crate::model::CHECKPOINT_VERSION;
use crate::synth::{encode_dataset, DATASET_VERSION};

pub const CSV_HEADER: &str = "round,client_id,loss,selected,weight,test_dice";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ROUNDS_FILE: &str = "rounds.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetProvenance {
    pub client_id: u32,
    pub level: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub label: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub versions: BTreeMap<String, String>,
    pub datasets: Vec<DatasetProvenance>,
    pub augmentation: String,
    pub started: String,
    pub finished: Option<String>,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Formats one report as CSV rows (no header).
pub fn csv_rows(report: &RoundReport) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    report
        .clients
        .iter()
        .map(|c| {
            format!(
                "{},{},{},{},{},{}\n",
                report.round,
                c.client_id,
                opt(c.loss),
                c.selected,
                opt(c.weight),
                c.test_dice
            )
        })
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Runs `config` and records everything under `dir`.
pub fn execute_run(config: &ExperimentConfig, dir: &Path, workers: usize) -> Result<ExperimentOutcome> {
    config.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let datasets = generate_datasets(config)?
        .iter()
        .map(|ds| DatasetProvenance {
            client_id: ds.client_id,
            level: ds.level.tag().to_string(),
            sha256: hex::encode(Sha256::digest(encode_dataset(ds))),
        })
        .collect();
    let versions = BTreeMap::from([
        ("fedmix".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("checkpoint_format".to_string(), CHECKPOINT_VERSION.to_string()),
        ("dataset_format".to_string(), DATASET_VERSION.to_string()),
    ]);
    let mut manifest = RunManifest {
        label: config.label.clone(),
        seed: config.seed,
        config: config.resolved(),
        versions,
        datasets,
        augmentation: "none".into(),
        started: now(),
        finished: None,
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    write_json(&manifest_path, &manifest)?;

    let csv_path = dir.join(ROUNDS_FILE);
    let mut csv = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    writeln!(csv, "{CSV_HEADER}").map_err(|e| Error::io(&csv_path, e))?;
    drop(csv);

    let ckpt_dir = dir.join("checkpoints");
    let every = config.checkpoint_every;
    let mut on_round = |report: &RoundReport, globals: &Globals| -> Result<()> {
        let mut f = OpenOptions::new()
            .append(true)
            .open(&csv_path)
            .map_err(|e| Error::io(&csv_path, e))?;
        f.write_all(csv_rows(report).as_bytes())
            .map_err(|e| Error::io(&csv_path, e))?;
        if every > 0 && report.round % every == 0 {
            fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
            write_checkpoint(&ckpt_dir.join(format!("round-{:04}-f1.fmpv", report.round)), &globals.f1)?;
            write_checkpoint(&ckpt_dir.join(format!("round-{:04}-f2.fmpv", report.round)), &globals.f2)?;
        }
        Ok(())
    };
    let outcome = run_experiment_with(
        config,
        RunOptions {
            workers,
            on_round: Some(&mut on_round),
        },
    )?;
    write_checkpoint(&dir.join("f1.fmpv"), &outcome.globals.f1)?;
    write_checkpoint(&dir.join("f2.fmpv"), &outcome.globals.f2)?;

    manifest.finished = Some(now());
    write_json(&manifest_path, &manifest)?;
    Ok(outcome)
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CsvRow {
    pub round: usize,
    pub client_id: u32,
    pub loss: Option<f64>,
    pub selected: usize,
    pub weight: Option<f64>,
    pub test_dice: f64,
}

pub fn read_rounds(path: &Path) -> Result<Vec<CsvRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::Decode(format!("{}: {e}", path.display()))))
        .collect()
}

/// Final-round test Dice per client plus the client average, keyed
/// `client<i>` and `mean`.
pub fn final_scores(rows: &[CsvRow]) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    let Some(last) = rows.iter().map(|r| r.round).max() else {
        return out;
    };
    let finals: Vec<&CsvRow> = rows.iter().filter(|r| r.round == last).collect();
    for r in &finals {
        out.insert(format!("client{}", r.client_id), r.test_dice);
    }
    let mean = finals.iter().map(|r| r.test_dice).sum::<f64>() / finals.len() as f64;
    out.insert("mean".into(), mean);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub label: String,
    pub cell: String,
    pub n: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
}

/// Every directory under `root` (inclusive) holding a finished run.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join(MANIFEST_FILE).is_file() && dir.join(ROUNDS_FILE).is_file() {
            found.push(dir.clone());
        }
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_dir() {
                stack.push(entry.path());
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Median and IQR over runs of each (label, cell). Unfinished runs are
/// skipped with a warning.
pub fn summarize(root: &Path) -> Result<Vec<SummaryRow>> {
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for dir in find_runs(root)? {
        let manifest = read_manifest(&dir)?;
        if manifest.finished.is_none() {
            log::warn!("skipping unfinished run {}", dir.display());
            continue;
        }
        for (cell, v) in final_scores(&read_rounds(&dir.join(ROUNDS_FILE))?) {
            groups.entry((manifest.label.clone(), cell)).or_default().push(v);
        }
    }
    Ok(groups
        .into_iter()
        .map(|((label, cell), values)| {
            let q1 = quantile(&values, 0.25).unwrap_or(f64::NAN);
            let q3 = quantile(&values, 0.75).unwrap_or(f64::NAN);
            SummaryRow {
                label,
                cell,
                n: values.len(),
                median: quantile(&values, 0.5).unwrap_or(f64::NAN),
                q1,
                q3,
                iqr: q3 - q1,
            }
        })
        .collect())
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut out = format!("{:<24} {:<10} {:>3} {:>9} {:>9}\n", "label", "cell", "n", "median", "iqr");
    for r in rows {
        out.push_str(&format!(
            "{:<24} {:<10} {:>3} {:>9.4} {:>9.4}\n",
            r.label, r.cell, r.n, r.median, r.iqr
        ));
    }
    out
}
