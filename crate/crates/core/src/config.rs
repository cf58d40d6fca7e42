//! Experiment configuration files.
//!
//! TOML with top-level run settings, an optional `[model]` table and one
//! `[[client]]` table per client:
//!
//! ```toml
//! seed = 7
//! rounds = 50
//! aggregation = "adaptive"   # or "fedavg"
//!
//! [model]
//! height = 32
//! width = 32
//!
//! [[client]]
//! level = "U"                # L, B, I or U
//! samples = 100
//! intensity_offset = 0.1
//! ```
//!
//! Omitted keys take their defaults; unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::aggregation::Aggregation;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::orchestrator::{ClientConfig, ExperimentConfig, Regime};

const TOP_KEYS: &[&str] = &[
    "label",
    "seed",
    "rounds",
    "epsilon",
    "lambda",
    "beta",
    "aggregation",
    "regime",
    "selection",
    "local_steps",
    "batch_size",
    "learning_rate",
    "checkpoint_every",
    "model",
    "client",
];
const MODEL_KEYS: &[&str] = &["height", "width", "conv1_width", "conv2_width", "kernel"];
const CLIENT_KEYS: &[&str] = &[
    "level",
    "samples",
    "intensity_offset",
    "contrast",
    "noise",
    "noise_max",
    "texture",
    "radius_min",
    "radius_max",
    "healthy_fraction",
];

#[derive(Debug, Deserialize)]
struct RawModel {
    height: Option<usize>,
    width: Option<usize>,
    conv1_width: Option<usize>,
    conv2_width: Option<usize>,
    kernel: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct RawConfig {
    label: Option<String>,
    seed: Option<u64>,
    rounds: Option<usize>,
    epsilon: Option<f64>,
    lambda: Option<f64>,
    beta: Option<f64>,
    aggregation: Option<Aggregation>,
    regime: Option<Regime>,
    selection: Option<bool>,
    local_steps: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    checkpoint_every: Option<usize>,
    model: Option<RawModel>,
    #[serde(default)]
    client: Vec<ClientConfig>,
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    check_keys(text, &table)?;
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;

    let d = ExperimentConfig::default();
    let m = raw.model.unwrap_or(RawModel {
        height: None,
        width: None,
        conv1_width: None,
        conv2_width: None,
        kernel: None,
    });
    let config = ExperimentConfig {
        label: raw.label.unwrap_or(d.label),
        seed: raw.seed.unwrap_or(d.seed),
        rounds: raw.rounds.unwrap_or(d.rounds),
        epsilon: raw.epsilon.unwrap_or(d.epsilon),
        lambda: raw.lambda.unwrap_or(d.lambda),
        beta: raw.beta.unwrap_or(d.beta),
        aggregation: raw.aggregation.unwrap_or(d.aggregation),
        regime: raw.regime.unwrap_or(d.regime),
        selection: raw.selection.unwrap_or(d.selection),
        local_steps: raw.local_steps.or(d.local_steps),
        batch_size: raw.batch_size.unwrap_or(d.batch_size),
        learning_rate: raw.learning_rate.unwrap_or(d.learning_rate),
        checkpoint_every: raw.checkpoint_every.unwrap_or(d.checkpoint_every),
        model: ModelSpec {
            height: m.height.unwrap_or(d.model.height),
            width: m.width.unwrap_or(d.model.width),
            conv1_width: m.conv1_width.unwrap_or(d.model.conv1_width),
            conv2_width: m.conv2_width.unwrap_or(d.model.conv2_width),
            kernel: m.kernel.unwrap_or(d.model.kernel),
        },
        clients: raw.client,
    };
    config.validate()?;
    Ok(config)
}

/// Serializes a config back to the file format (with every default written out).
pub fn to_toml(config: &ExperimentConfig) -> String {
    toml::to_string_pretty(config).expect("config serializes")
}

fn check_keys(text: &str, table: &toml::Table) -> Result<()> {
    check_table(text, table, TOP_KEYS, "")?;
    if let Some(model) = table.get("model") {
        let t = model
            .as_table()
            .ok_or_else(|| Error::Config("`model` must be a table".into()))?;
        check_table(text, t, MODEL_KEYS, "model.")?;
    }
    if let Some(clients) = table.get("client") {
        let arr = clients
            .as_array()
            .ok_or_else(|| Error::Config("`client` must be an array of tables ([[client]])".into()))?;
        for (i, c) in arr.iter().enumerate() {
            let t = c
                .as_table()
                .ok_or_else(|| Error::Config(format!("client[{i}] must be a table")))?;
            check_table(text, t, CLIENT_KEYS, &format!("client[{i}]."))?;
        }
    }
    Ok(())
}

fn check_table(text: &str, table: &toml::Table, known: &[&str], prefix: &str) -> Result<()> {
    for key in table.keys() {
        if known.contains(&key.as_str()) {
            continue;
        }
        let mut msg = format!("unknown key `{prefix}{key}`");
        if let Some(line) = line_of_key(text, key) {
            msg = format!("line {line}: {msg}");
        }
        if let Some(s) = suggest(key, known) {
            msg.push_str(&format!(" (did you mean `{s}`?)"));
        }
        return Err(Error::Config(msg));
    }
    Ok(())
}

fn line_of_key(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let l = l.trim_start();
        l.strip_prefix(key)
            .is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

fn suggest<'a>(key: &str, known: &[&'a str]) -> Option<&'a str> {
    known
        .iter()
        .map(|k| (strsim::levenshtein(key, k), *k))
        .filter(|(d, _)| *d <= 2)
        .min()
        .map(|(_, k)| k)
}
