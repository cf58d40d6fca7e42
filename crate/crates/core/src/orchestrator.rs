//! Synchronous round loop, baseline regimes and evaluation.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{adaptive_weights, apply_update, fedavg_weights, Aggregation};
use crate::client::{consistency, ClientState, LocalConfig, LocalUpdate, DEFAULT_BATCH_SIZE};
use crate::error::{Error, Result};
use crate::grid::dice_coefficient;
use crate::model::{forward, init_params, AdamState, ModelSpec, ParamVector};
use crate::seed::{derive_seed, STREAM_DATA, STREAM_MODEL_F1, STREAM_MODEL_F2, STREAM_SHUFFLE};
use crate::synth::{generate_client, ClientDataset, DataSpec, Sample, ShiftSpec, SupervisionLevel};

pub const DEFAULT_ROUNDS: usize = 50;
pub const DEFAULT_EPSILON: f64 = 0.9;
pub const DEFAULT_LAMBDA: f64 = 10.0;
pub const DEFAULT_BETA: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// Dual-model mixed-supervision federated training.
    #[serde(rename = "fedmix")]
    FedMix,
    /// Each pixel-labeled client trains alone; the others are evaluated with
    /// the largest labeled client's model.
    #[serde(rename = "local")]
    LocalLearning,
    /// Every client is treated as pixel-labeled.
    #[serde(rename = "fully-supervised")]
    FullySupervisedFed,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedmix" => Ok(Regime::FedMix),
            "local" => Ok(Regime::LocalLearning),
            "fully-supervised" => Ok(Regime::FullySupervisedFed),
            other => Err(Error::Config(format!(
                "regime must be one of fedmix, local, fully-supervised; got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub level: SupervisionLevel,
    pub samples: usize,
    #[serde(flatten)]
    pub shift: ShiftSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Free-form tag carried into reports; groups runs in summaries.
    pub label: String,
    pub seed: u64,
    pub rounds: usize,
    pub epsilon: f64,
    pub lambda: f64,
    pub beta: f64,
    pub aggregation: Aggregation,
    pub regime: Regime,
    pub selection: bool,
    /// Optimizer steps per round; `None` is one epoch over selected samples.
    pub local_steps: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Write intermediate checkpoints every this many rounds (0: final only).
    pub checkpoint_every: usize,
    pub model: ModelSpec,
    #[serde(rename = "client")]
    pub clients: Vec<ClientConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            label: "run".into(),
            seed: 0,
            rounds: DEFAULT_ROUNDS,
            epsilon: DEFAULT_EPSILON,
            lambda: DEFAULT_LAMBDA,
            beta: DEFAULT_BETA,
            aggregation: Aggregation::Adaptive,
            regime: Regime::FedMix,
            selection: true,
            local_steps: None,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: AdamState::DEFAULT_LEARNING_RATE,
            checkpoint_every: 0,
            model: ModelSpec::default(),
            clients: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, why: String| Err(Error::Config(format!("`{key}`: {why}")));
        if self.rounds < 1 {
            return fail("rounds", "must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return fail("epsilon", format!("must lie in [0, 1], got {}", self.epsilon));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda", format!("must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return fail("beta", format!("must be finite and > 0, got {}", self.beta));
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be at least 1".into());
        }
        if self.local_steps == Some(0) {
            return fail("local_steps", "must be at least 1 when set".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate", format!("must be > 0, got {}", self.learning_rate));
        }
        self.model.validate()?;
        if self.clients.is_empty() {
            return fail("client", "at least one client is required".into());
        }
        for (i, c) in self.clients.iter().enumerate() {
            if c.samples < crate::synth::MIN_SAMPLES {
                return fail(
                    &format!("client[{i}].samples"),
                    format!("need at least {}, got {}", crate::synth::MIN_SAMPLES, c.samples),
                );
            }
            c.shift
                .validate()
                .map_err(|e| Error::Config(format!("client[{i}]: {e}")))?;
        }
        if self.regime == Regime::LocalLearning
            && !self.clients.iter().any(|c| c.level == SupervisionLevel::PixelLevel)
        {
            return fail("regime", "local learning needs at least one pixel-labeled client".into());
        }
        Ok(())
    }

    pub fn local_config(&self) -> LocalConfig {
        LocalConfig {
            epsilon: self.epsilon,
            selection: self.selection,
            steps: self.local_steps,
            batch_size: self.batch_size,
        }
    }

    /// Copy with per-level defaults filled in, for manifests.
    pub fn resolved(&self) -> ExperimentConfig {
        let mut out = self.clone();
        for c in &mut out.clients {
            c.shift.healthy_fraction = Some(c.shift.resolved_healthy_fraction(c.level));
        }
        out
    }

    pub fn data_spec(&self, client: usize) -> DataSpec {
        DataSpec {
            height: self.model.height,
            width: self.model.width,
            shift: self.clients[client].shift.clone(),
        }
    }

    pub fn level_tags(&self) -> String {
        self.clients
            .iter()
            .map(|c| c.level.tag().to_string())
            .collect::<Vec<_>>()
            .join("-")
    }
}

/// Generates every client's dataset as configured (before any regime-specific
/// relabeling).
pub fn generate_datasets(config: &ExperimentConfig) -> Result<Vec<ClientDataset>> {
    config
        .clients
        .iter()
        .enumerate()
        .map(|(i, c)| {
            generate_client(
                i as u32,
                &config.data_spec(i),
                c.level,
                c.samples,
                derive_seed(config.seed, &[STREAM_DATA, i as u64]),
            )
        })
        .collect()
}

/// Initial global parameters of the two models.
pub fn initial_globals(config: &ExperimentConfig) -> Globals {
    Globals {
        f1: init_params(&config.model, derive_seed(config.seed, &[STREAM_MODEL_F1])),
        f2: init_params(&config.model, derive_seed(config.seed, &[STREAM_MODEL_F2])),
    }
}

/// Client states for a run; applies the regime's relabeling.
pub fn build_clients(config: &ExperimentConfig, datasets: Vec<ClientDataset>) -> Result<Vec<ClientState>> {
    let globals = initial_globals(config);
    datasets
        .into_iter()
        .enumerate()
        .map(|(i, ds)| {
            let ds = match config.regime {
                Regime::FullySupervisedFed => ds.with_level(SupervisionLevel::PixelLevel)?,
                _ => ds,
            };
            ClientState::new(
                ds,
                config.model,
                globals.f1.clone(),
                globals.f2.clone(),
                config.learning_rate,
                derive_seed(config.seed, &[STREAM_SHUFFLE, i as u64]),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Globals {
    pub f1: ParamVector,
    pub f2: ParamVector,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientRoundStats {
    pub client_id: u32,
    pub level: SupervisionLevel,
    pub loss: Option<f64>,
    pub selected: usize,
    /// Aggregation weight; `None` outside federated regimes.
    pub weight: Option<f64>,
    pub test_dice: f64,
    /// Counts of training-sample consistency in ten equal bins over [0, 1].
    pub consistency_histogram: [usize; 10],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    /// 1-based round index.
    pub round: usize,
    pub clients: Vec<ClientRoundStats>,
    #[serde(skip)]
    pub wall_clock: Duration,
}

impl RoundReport {
    pub fn mean_test_dice(&self) -> f64 {
        self.clients.iter().map(|c| c.test_dice).sum::<f64>() / self.clients.len() as f64
    }
}

fn histogram(values: &[f64]) -> [usize; 10] {
    let mut h = [0; 10];
    for &v in values {
        h[((v * 10.0) as usize).min(9)] += 1;
    }
    h
}

/// Mean Dice of hardened F1 predictions against truth over the test split.
pub fn evaluate(spec: &ModelSpec, params_f1: &ParamVector, dataset: &ClientDataset) -> Result<f64> {
    evaluate_samples(spec, params_f1, dataset.test())
}

pub fn evaluate_samples(spec: &ModelSpec, params_f1: &ParamVector, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty test split".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let pred = forward(spec, params_f1, s.image())?.harden();
        total += dice_coefficient(&pred, s.truth_mask())?;
    }
    Ok(total / samples.len() as f64)
}

/// Per-sample `(consistency between F1 and F2, Dice of F1 against truth)`.
pub fn consistency_vs_accuracy(
    spec: &ModelSpec,
    globals: &Globals,
    samples: &[Sample],
) -> Result<Vec<(f64, f64)>> {
    samples
        .iter()
        .map(|s| {
            let y1 = forward(spec, &globals.f1, s.image())?;
            let y2 = forward(spec, &globals.f2, s.image())?;
            Ok((consistency(&y1, &y2)?, dice_coefficient(&y1.harden(), s.truth_mask())?))
        })
        .collect()
}

/// Runs `f` over items either sequentially or on a private pool; results come
/// back in input order either way.
fn fan_out<T: Send, R: Send>(
    workers: usize,
    items: &mut [T],
    f: impl Fn(usize, &mut T) -> R + Sync + Send,
) -> Vec<R> {
    if workers <= 1 {
        return items.iter_mut().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool");
    pool.install(|| items.par_iter_mut().enumerate().map(|(i, t)| f(i, t)).collect())
}

/// One synchronous round: every client downloads the globals and trains, then
/// the server weights and applies both models' deltas. Evaluation uses the new
/// global F1.
pub fn run_round(
    clients: &mut [ClientState],
    globals: &Globals,
    config: &ExperimentConfig,
    round: usize,
    workers: usize,
) -> Result<(Globals, RoundReport)> {
    let started = Instant::now();
    let local = config.local_config();
    let updates: Vec<LocalUpdate> = fan_out(workers, clients, |_, c| {
        c.local_update(&globals.f1, &globals.f2, &local, round as u64)
    })
    .into_iter()
    .enumerate()
    .map(|(i, r)| r.map_err(|e| Error::Validation(format!("round {round}, client {i}: {e}"))))
    .collect::<Result<_>>()?;

    let counts: Vec<usize> = clients.iter().map(|c| c.dataset().train().len()).collect();
    let losses: Vec<Option<f64>> = updates.iter().map(|u| u.loss).collect();
    let weights = match config.aggregation {
        Aggregation::FedAvg => fedavg_weights(&counts)?,
        Aggregation::Adaptive => adaptive_weights(&counts, &losses, config.beta, config.lambda)?,
    };
    let d1: Vec<ParamVector> = updates.iter().map(|u| u.delta_f1.clone()).collect();
    let d2: Vec<ParamVector> = updates.iter().map(|u| u.delta_f2.clone()).collect();
    let next = Globals {
        f1: apply_update(&globals.f1, &d1, &weights)?,
        f2: apply_update(&globals.f2, &d2, &weights)?,
    };

    let dice = fan_out(workers, clients, |_, c| evaluate(c.spec(), &next.f1, c.dataset()))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let stats = clients
        .iter()
        .zip(&updates)
        .zip(weights.iter().zip(dice))
        .map(|((c, u), (&w, d))| ClientRoundStats {
            client_id: c.dataset().client_id,
            level: c.level(),
            loss: u.loss,
            selected: u.selected,
            weight: Some(w),
            test_dice: d,
            consistency_histogram: histogram(&u.consistency),
        })
        .collect();
    Ok((
        next,
        RoundReport {
            round,
            clients: stats,
            wall_clock: started.elapsed(),
        },
    ))
}

/// Everything a finished run produces besides its streamed reports.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub reports: Vec<RoundReport>,
    /// Final federated models, or the reference labeled client's models under
    /// local learning.
    pub globals: Globals,
    pub clients: Vec<ClientState>,
}

impl ExperimentOutcome {
    pub fn final_mean_dice(&self) -> f64 {
        self.reports.last().map_or(0.0, RoundReport::mean_test_dice)
    }
}

pub type RoundCallback<'a> = dyn FnMut(&RoundReport, &Globals) -> Result<()> + 'a;

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Parallel client workers; 0 or 1 runs clients sequentially.
    pub workers: usize,
    /// Called after every round, in order.
    pub on_round: Option<&'a mut RoundCallback<'a>>,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_experiment_with(config, RunOptions::default())
}

pub fn run_experiment_with(config: &ExperimentConfig, mut opts: RunOptions<'_>) -> Result<ExperimentOutcome> {
    config.validate()?;
    let datasets = generate_datasets(config)?;
    let mut clients = build_clients(config, datasets)?;
    let mut reports = Vec::with_capacity(config.rounds);
    let globals = match config.regime {
        Regime::FedMix | Regime::FullySupervisedFed => {
            let mut globals = initial_globals(config);
            for round in 1..=config.rounds {
                let (next, report) = run_round(&mut clients, &globals, config, round, opts.workers)?;
                globals = next;
                if let Some(cb) = opts.on_round.as_mut() {
                    cb(&report, &globals)?;
                }
                reports.push(report);
            }
            globals
        }
        Regime::LocalLearning => {
            let reference = reference_client(&clients);
            for round in 1..=config.rounds {
                let report = local_learning_round(&mut clients, config, round, reference, opts.workers)?;
                let globals = Globals {
                    f1: clients[reference].params_f1.clone(),
                    f2: clients[reference].params_f2.clone(),
                };
                if let Some(cb) = opts.on_round.as_mut() {
                    cb(&report, &globals)?;
                }
                reports.push(report);
            }
            Globals {
                f1: clients[reference].params_f1.clone(),
                f2: clients[reference].params_f2.clone(),
            }
        }
    };
    Ok(ExperimentOutcome {
        reports,
        globals,
        clients,
    })
}

/// Pixel-labeled client with the most training samples (lowest index on ties).
fn reference_client(clients: &[ClientState]) -> usize {
    let mut best: Option<usize> = None;
    for (i, c) in clients.iter().enumerate() {
        if c.level() != SupervisionLevel::PixelLevel {
            continue;
        }
        let better = best.is_none_or(|b| c.dataset().train().len() > clients[b].dataset().train().len());
        if better {
            best = Some(i);
        }
    }
    best.expect("validated: at least one pixel-labeled client")
}

fn local_learning_round(
    clients: &mut [ClientState],
    config: &ExperimentConfig,
    round: usize,
    reference: usize,
    workers: usize,
) -> Result<RoundReport> {
    let started = Instant::now();
    let local = config.local_config();
    let losses: Vec<Option<f64>> = fan_out(workers, clients, |_, c| {
        if c.level() == SupervisionLevel::PixelLevel {
            c.supervised_update(&local, round as u64).map(Some)
        } else {
            Ok(None)
        }
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let reference_f1 = clients[reference].params_f1.clone();
    let dice = fan_out(workers, clients, |_, c| {
        let params = if c.level() == SupervisionLevel::PixelLevel {
            &c.params_f1
        } else {
            &reference_f1
        };
        evaluate(c.spec(), params, c.dataset())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let stats = clients
        .iter()
        .zip(losses)
        .zip(dice)
        .map(|((c, loss), d)| ClientRoundStats {
            client_id: c.dataset().client_id,
            level: c.level(),
            loss,
            selected: if loss.is_some() { c.dataset().train().len() } else { 0 },
            weight: None,
            test_dice: d,
            consistency_histogram: [0; 10],
        })
        .collect();
    Ok(RoundReport {
        round,
        clients: stats,
        wall_clock: started.elapsed(),
    })
}
