//! One client's work per round: dual-model pseudo labels, supervision-aware
//! refinement, consistency-gated sample selection and the cross-supervised
//! local update.
//!
//! Training code only sees samples through [`TrainingView`], which has no
//! access to ground-truth masks.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{dice_coefficient, ensure_same_shape, soft_dice_loss_and_gradient, Grid2D};
use crate::model::{backward_cached, forward, forward_cached, AdamState, ModelSpec, ParamVector};
use crate::seed::derive_seed;
use crate::synth::{ClientDataset, RawLabel, Supervision, SupervisionLevel, TrainingView};

pub const DEFAULT_BATCH_SIZE: usize = 16;

/// Knobs for one local update.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalConfig {
    /// Consistency threshold for sample selection.
    pub epsilon: f64,
    /// When false every training sample is used regardless of consistency.
    pub selection: bool,
    /// Optimizer steps per round; `None` means one pass over the selected
    /// samples.
    pub steps: Option<usize>,
    pub batch_size: usize,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.9,
            selection: true,
            steps: None,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }
}

/// What a client sends back to the server after a round.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub delta_f1: ParamVector,
    pub delta_f2: ParamVector,
    /// Mean cross-supervised loss over the final pass; `None` when no sample
    /// was selected.
    pub loss: Option<f64>,
    pub selected: usize,
    /// Per-training-sample consistency between the downloaded models. Empty
    /// for pixel-labeled clients, whose selection is unconditional.
    pub consistency: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    dataset: ClientDataset,
    spec: ModelSpec,
    pub params_f1: ParamVector,
    pub params_f2: ParamVector,
    pub adam_f1: AdamState,
    pub adam_f2: AdamState,
    last_selection: Vec<bool>,
    last_loss: Option<f64>,
    shuffle_seed: u64,
}

impl ClientState {
    pub fn new(
        dataset: ClientDataset,
        spec: ModelSpec,
        params_f1: ParamVector,
        params_f2: ParamVector,
        learning_rate: f64,
        shuffle_seed: u64,
    ) -> Result<Self> {
        if params_f1.len() != spec.param_count() || params_f2.len() != spec.param_count() {
            return Err(Error::dim("client parameters do not match the model spec"));
        }
        if (dataset.spec.height, dataset.spec.width) != (spec.height, spec.width) {
            return Err(Error::dim(format!(
                "client {} images are {}x{} but the model expects {}x{}",
                dataset.client_id, dataset.spec.height, dataset.spec.width, spec.height, spec.width
            )));
        }
        let n = spec.param_count();
        let train_len = dataset.train().len();
        Ok(Self {
            dataset,
            spec,
            params_f1,
            params_f2,
            adam_f1: AdamState::new(n, learning_rate),
            adam_f2: AdamState::new(n, learning_rate),
            last_selection: vec![false; train_len],
            last_loss: None,
            shuffle_seed,
        })
    }

    pub fn dataset(&self) -> &ClientDataset {
        &self.dataset
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn level(&self) -> SupervisionLevel {
        self.dataset.level
    }

    pub fn last_selection(&self) -> &[bool] {
        &self.last_selection
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.last_loss
    }

    pub fn shuffle_seed(&self) -> u64 {
        self.shuffle_seed
    }

    /// `(F1(x), F2(x))` under the client's current parameters.
    pub fn generate_pseudo_labels(&self, sample: TrainingView<'_>) -> Result<(Grid2D, Grid2D)> {
        generate_pseudo_labels(&self.spec, &self.params_f1, &self.params_f2, sample.image)
    }

    /// Consistency gate over the training split with the current parameters.
    pub fn select_samples(&self, epsilon: f64) -> Result<Vec<bool>> {
        Ok(self.consistencies()?.map_or_else(
            || vec![true; self.dataset.train().len()],
            |c| c.iter().map(|&v| v >= epsilon).collect(),
        ))
    }

    /// Per-sample consistency, or `None` for pixel-labeled clients.
    fn consistencies(&self) -> Result<Option<Vec<f64>>> {
        if self.level() == SupervisionLevel::PixelLevel {
            return Ok(None);
        }
        self.dataset
            .training_views()
            .map(|s| {
                let (y1, y2) = self.generate_pseudo_labels(s)?;
                consistency(&y1, &y2)
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Downloads the global models, selects samples, and trains both models on
    /// each other's refined pseudo labels.
    pub fn local_update(
        &mut self,
        global_f1: &ParamVector,
        global_f2: &ParamVector,
        cfg: &LocalConfig,
        round: u64,
    ) -> Result<LocalUpdate> {
        if cfg.steps == Some(0) {
            return Err(Error::Usage("local update needs at least one step".into()));
        }
        if cfg.batch_size == 0 {
            return Err(Error::Usage("batch size must be positive".into()));
        }
        self.params_f1 = global_f1.clone();
        self.params_f2 = global_f2.clone();

        let consistency = self.consistencies()?;
        let selection: Vec<bool> = match (&consistency, cfg.selection) {
            (Some(c), true) => c.iter().map(|&v| v >= cfg.epsilon).collect(),
            _ => vec![true; self.dataset.train().len()],
        };

        // Targets are fixed for the round from the downloaded models: F1 learns
        // from refined F2 labels and vice versa.
        let mut items = Vec::new();
        for (view, &keep) in self.dataset.training_views().zip(&selection) {
            if !keep {
                continue;
            }
            let (t1, t2) = match view.supervision.raw() {
                RawLabel::Pixel(mask) => (mask.clone(), mask.clone()),
                _ => {
                    let (y1, y2) = self.generate_pseudo_labels(view)?;
                    let (r1, r2) = refine(&y1, &y2, view.supervision)?;
                    (r2, r1)
                }
            };
            items.push(CrossItem {
                image: view.image,
                target_f1: t1,
                target_f2: t2,
            });
        }
        let selected = items.len();
        self.last_selection = selection;

        if selected == 0 {
            self.last_loss = None;
            return Ok(LocalUpdate {
                delta_f1: ParamVector::zeros(global_f1.len()),
                delta_f2: ParamVector::zeros(global_f2.len()),
                loss: None,
                selected: 0,
                consistency: consistency.unwrap_or_default(),
            });
        }

        let seed = derive_seed(self.shuffle_seed, &[round]);
        let schedule = batch_schedule(selected, cfg.batch_size, cfg.steps, seed);
        let final_pass = selected.div_ceil(cfg.batch_size).min(schedule.len());
        let mut tail_losses = Vec::new();
        for (step, batch) in schedule.iter().enumerate() {
            let mut g1 = ParamVector::zeros(self.params_f1.len());
            let mut g2 = ParamVector::zeros(self.params_f2.len());
            let mut batch_losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let item = &items[i];
                let l1 = accumulate_gradient(&self.spec, &self.params_f1, item.image, &item.target_f1, &mut g1)?;
                let l2 = accumulate_gradient(&self.spec, &self.params_f2, item.image, &item.target_f2, &mut g2)?;
                batch_losses.push(l1 + l2);
            }
            let inv = 1.0 / batch.len() as f64;
            g1.scale(inv);
            g2.scale(inv);
            self.adam_f1.step(&mut self.params_f1, &g1)?;
            self.adam_f2.step(&mut self.params_f2, &g2)?;
            if step >= schedule.len() - final_pass {
                tail_losses.extend(batch_losses);
            }
        }
        let loss = tail_losses.iter().sum::<f64>() / tail_losses.len() as f64;
        self.last_loss = Some(loss);

        Ok(LocalUpdate {
            delta_f1: self.params_f1.sub(global_f1)?,
            delta_f2: self.params_f2.sub(global_f2)?,
            loss: Some(loss),
            selected,
            consistency: consistency.unwrap_or_default(),
        })
    }

    /// Plain supervised training of F1 on the client's pixel labels, used by
    /// the local-learning baseline. Returns the mean Dice loss over the final
    /// pass.
    pub fn supervised_update(&mut self, cfg: &LocalConfig, round: u64) -> Result<f64> {
        let targets: Vec<(&Grid2D, &Grid2D)> = self
            .dataset
            .training_views()
            .map(|v| match v.supervision.raw() {
                RawLabel::Pixel(mask) => Ok((v.image, mask)),
                _ => Err(Error::Usage(format!(
                    "client {} has no pixel labels for supervised training",
                    self.dataset.client_id
                ))),
            })
            .collect::<Result<_>>()?;
        if targets.is_empty() {
            return Err(Error::Usage("no training samples".into()));
        }
        let seed = derive_seed(self.shuffle_seed, &[round]);
        let schedule = batch_schedule(targets.len(), cfg.batch_size, cfg.steps, seed);
        let final_pass = targets.len().div_ceil(cfg.batch_size).min(schedule.len());
        let mut tail = Vec::new();
        for (step, batch) in schedule.iter().enumerate() {
            let mut g = ParamVector::zeros(self.params_f1.len());
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let (x, t) = targets[i];
                losses.push(accumulate_gradient(&self.spec, &self.params_f1, x, t, &mut g)?);
            }
            g.scale(1.0 / batch.len() as f64);
            self.adam_f1.step(&mut self.params_f1, &g)?;
            if step >= schedule.len() - final_pass {
                tail.extend(losses);
            }
        }
        let loss = tail.iter().sum::<f64>() / tail.len() as f64;
        self.last_loss = Some(loss);
        Ok(loss)
    }
}

struct CrossItem<'a> {
    image: &'a Grid2D,
    target_f1: Grid2D,
    target_f2: Grid2D,
}

/// Adds the Dice-loss gradient for one sample into `grad`; returns the loss.
fn accumulate_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    image: &Grid2D,
    target: &Grid2D,
    grad: &mut ParamVector,
) -> Result<f64> {
    let acts = forward_cached(spec, params, image)?;
    let (loss, upstream) = soft_dice_loss_and_gradient(acts.output(), target)?;
    let g = backward_cached(spec, params, image, &acts, &upstream)?;
    grad.add_scaled(&g, 1.0)?;
    Ok(loss)
}

/// Mini-batches of indices into `0..n`: `steps` batches (default: one epoch),
/// reshuffled at the start of every epoch.
pub fn batch_schedule(n: usize, batch_size: usize, steps: Option<usize>, seed: u64) -> Vec<Vec<usize>> {
    if n == 0 || batch_size == 0 {
        return Vec::new();
    }
    let per_epoch = n.div_ceil(batch_size);
    let steps = steps.unwrap_or(per_epoch);
    let mut out = Vec::with_capacity(steps);
    let mut epoch = 0u64;
    while out.len() < steps {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch])));
        for chunk in order.chunks(batch_size) {
            if out.len() == steps {
                break;
            }
            out.push(chunk.to_vec());
        }
        epoch += 1;
    }
    out
}

pub fn generate_pseudo_labels(
    spec: &ModelSpec,
    params_f1: &ParamVector,
    params_f2: &ParamVector,
    image: &Grid2D,
) -> Result<(Grid2D, Grid2D)> {
    Ok((forward(spec, params_f1, image)?, forward(spec, params_f2, image)?))
}

/// Dice between the hardened predictions of the two models.
pub fn consistency(y1: &Grid2D, y2: &Grid2D) -> Result<f64> {
    dice_coefficient(&y1.harden(), &y2.harden())
}

/// Supervision-specific correction of the two pseudo labels.
///
/// | label            | refined target                 |
/// |------------------|--------------------------------|
/// | pixel mask       | the mask, for both models      |
/// | bounding box     | `harden(y) * box`              |
/// | image, positive  | `harden(y)`                    |
/// | image, negative  | all background                 |
/// | none             | `harden(y)`                    |
pub fn refine(y1: &Grid2D, y2: &Grid2D, supervision: &Supervision) -> Result<(Grid2D, Grid2D)> {
    ensure_same_shape(y1, y2)?;
    if y1.shape() != supervision.shape() {
        return Err(Error::dim(format!(
            "pseudo labels are {:?} but the label is {:?}",
            y1.shape(),
            supervision.shape()
        )));
    }
    Ok(match supervision.raw() {
        RawLabel::Pixel(mask) => (mask.clone(), mask.clone()),
        RawLabel::Box(_) => {
            let region = supervision
                .canonical()
                .and_then(|c| c.mask())
                .expect("box labels always carry a canonical grid");
            (y1.harden().hadamard(region)?, y2.harden().hadamard(region)?)
        }
        RawLabel::ImageClass { positive: false } => {
            let (h, w) = y1.shape();
            (Grid2D::zeros(h, w), Grid2D::zeros(h, w))
        }
        RawLabel::ImageClass { positive: true } | RawLabel::Absent => (y1.harden(), y2.harden()),
    })
}

/// Cross pseudo supervision objective for one sample: `dice_loss(y1, refined2) + dice_loss(y2, refined1)`.
pub fn cross_pseudo_loss(y1: &Grid2D, y2: &Grid2D, supervision: &Supervision) -> Result<f64> {
    let (r1, r2) = refine(y1, y2, supervision)?;
    Ok(crate::grid::soft_dice_loss(y1, &r2)? + crate::grid::soft_dice_loss(y2, &r1)?)
}
