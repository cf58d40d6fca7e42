//! Synthetic lesion-segmentation clients with controllable distribution shift.
//!
//! Each image holds zero or one elliptical bright lesion on a textured, noisy
//! background. Clients differ by intensity offset, contrast, noise level and
//! lesion size, which stands in for inter-site variation. Flip/crop
//! augmentation is not applied.

mod io;
mod supervision;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid2D;

pub use io::{decode_dataset, encode_dataset, read_dataset, sidecar_json, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use supervision::{
    canonicalize, degrade_supervision, BoundingBox, CanonicalLabel, RawLabel, Supervision, SupervisionLevel,
};

/// Per-client appearance parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftSpec {
    /// Added to every pixel before noise.
    pub intensity_offset: f64,
    /// Lesion brightness above the background.
    pub contrast: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// When set, each image draws its own noise level uniformly from
    /// `[noise, noise_max]`.
    pub noise_max: Option<f64>,
    /// Amplitude of the sinusoidal background texture.
    pub texture: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Share of lesion-free images. `None` resolves per level: 0.15 for
    /// image-level clients, 0 otherwise.
    pub healthy_fraction: Option<f64>,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            intensity_offset: 0.0,
            contrast: 0.4,
            noise: 0.05,
            noise_max: None,
            texture: 0.05,
            radius_min: 3.0,
            radius_max: 7.0,
            healthy_fraction: None,
        }
    }
}

pub const DEFAULT_IMAGE_LEVEL_HEALTHY_FRACTION: f64 = 0.15;
const BACKGROUND_BASE: f64 = 0.25;

impl ShiftSpec {
    pub fn resolved_healthy_fraction(&self, level: SupervisionLevel) -> f64 {
        self.healthy_fraction.unwrap_or(match level {
            SupervisionLevel::ImageLevel => DEFAULT_IMAGE_LEVEL_HEALTHY_FRACTION,
            _ => 0.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, why: &str| Err(Error::Config(format!("shift.{k}: {why}")));
        if !self.noise.is_finite() || self.noise < 0.0 {
            return bad("noise", "must be finite and >= 0");
        }
        if let Some(m) = self.noise_max {
            if !(m.is_finite() && m >= self.noise) {
                return bad("noise_max", "must be finite and >= noise");
            }
        }
        if !self.texture.is_finite() || self.texture < 0.0 {
            return bad("texture", "must be finite and >= 0");
        }
        if !self.intensity_offset.is_finite() || !self.contrast.is_finite() {
            return bad("intensity_offset", "offset and contrast must be finite");
        }
        if !(self.radius_min >= 1.0 && self.radius_max >= self.radius_min) {
            return bad("radius_min", "need 1 <= radius_min <= radius_max");
        }
        if let Some(f) = self.healthy_fraction {
            if !(0.0..=1.0).contains(&f) {
                return bad("healthy_fraction", "must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

/// Image size plus appearance: everything needed to draw a client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub height: usize,
    pub width: usize,
    pub shift: ShiftSpec,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            shift: ShiftSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    id: u64,
    image: Grid2D,
    truth_mask: Grid2D,
    supervision: Supervision,
}

/// The part of a [`Sample`] that training code may see: no ground truth.
#[derive(Debug, Clone, Copy)]
pub struct TrainingView<'a> {
    pub id: u64,
    pub image: &'a Grid2D,
    pub supervision: &'a Supervision,
}

impl Sample {
    pub fn new(id: u64, image: Grid2D, truth_mask: Grid2D, supervision: Supervision) -> Result<Self> {
        if image.shape() != truth_mask.shape() || image.shape() != supervision.shape() {
            return Err(Error::dim("sample image, mask and label shapes differ"));
        }
        if !truth_mask.is_binary() {
            return Err(Error::Validation("truth mask must be binary".into()));
        }
        Ok(Self {
            id,
            image,
            truth_mask,
            supervision,
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn image(&self) -> &Grid2D {
        &self.image
    }

    pub fn supervision(&self) -> &Supervision {
        &self.supervision
    }

    /// Ground truth, for evaluation only.
    pub fn truth_mask(&self) -> &Grid2D {
        &self.truth_mask
    }

    pub fn training(&self) -> TrainingView<'_> {
        TrainingView {
            id: self.id,
            image: &self.image,
            supervision: &self.supervision,
        }
    }

    fn relabel(&self, level: SupervisionLevel) -> Result<Sample> {
        Ok(Sample {
            supervision: degrade_supervision(&self.truth_mask, level)?,
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: u32,
    pub level: SupervisionLevel,
    pub spec: DataSpec,
    train: Vec<Sample>,
    test: Vec<Sample>,
}

impl ClientDataset {
    pub fn new(
        client_id: u32,
        level: SupervisionLevel,
        spec: DataSpec,
        train: Vec<Sample>,
        test: Vec<Sample>,
    ) -> Result<Self> {
        if let Some(s) = train.iter().chain(&test).find(|s| s.supervision.level() != level) {
            return Err(Error::Validation(format!(
                "sample {} is labeled {} but the client holds {}",
                s.id,
                s.supervision.level(),
                level
            )));
        }
        Ok(Self {
            client_id,
            level,
            spec,
            train,
            test,
        })
    }

    pub fn train(&self) -> &[Sample] {
        &self.train
    }

    pub fn test(&self) -> &[Sample] {
        &self.test
    }

    pub fn training_views(&self) -> impl Iterator<Item = TrainingView<'_>> {
        self.train.iter().map(Sample::training)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same images and masks, labels re-derived at another level.
    pub fn with_level(&self, level: SupervisionLevel) -> Result<ClientDataset> {
        Ok(ClientDataset {
            client_id: self.client_id,
            level,
            spec: self.spec.clone(),
            train: self.train.iter().map(|s| s.relabel(level)).collect::<Result<_>>()?,
            test: self.test.iter().map(|s| s.relabel(level)).collect::<Result<_>>()?,
        })
    }
}

pub const MIN_SAMPLES: usize = 5;

/// Number of training samples in an 80/20 split of `n`.
pub fn train_split_len(n: usize) -> usize {
    n * 4 / 5
}

/// Draws `n` samples and splits them 80/20 into train and test by shuffled id.
pub fn generate_client(
    client_id: u32,
    spec: &DataSpec,
    level: SupervisionLevel,
    n: usize,
    seed: u64,
) -> Result<ClientDataset> {
    if n < MIN_SAMPLES {
        return Err(Error::Config(format!(
            "client {client_id}: need at least {MIN_SAMPLES} samples, got {n}"
        )));
    }
    if spec.height < 4 || spec.width < 4 {
        return Err(Error::Config("images must be at least 4x4".into()));
    }
    spec.shift.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let healthy = spec.shift.resolved_healthy_fraction(level);

    let mut samples = Vec::with_capacity(n);
    for idx in 0..n {
        let id = ((client_id as u64) << 32) | idx as u64;
        let has_lesion = rng.random::<f64>() >= healthy;
        let (image, truth) = draw_image(spec, has_lesion, &mut rng);
        let supervision = degrade_supervision(&truth, level)?;
        samples.push(Sample::new(id, image, truth, supervision)?);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = train_split_len(n);
    let mut train_idx = order[..n_train].to_vec();
    let mut test_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    ClientDataset::new(client_id, level, spec.clone(), pick(&train_idx), pick(&test_idx))
}

fn draw_image(spec: &DataSpec, has_lesion: bool, rng: &mut ChaCha8Rng) -> (Grid2D, Grid2D) {
    let (h, w) = (spec.height, spec.width);
    let s = &spec.shift;
    let truth = if has_lesion {
        draw_ellipse(h, w, s.radius_min, s.radius_max, rng)
    } else {
        Grid2D::zeros(h, w)
    };

    let freq_r = rng.random_range(0.2..0.6);
    let freq_c = rng.random_range(0.2..0.6);
    let phase_r = rng.random_range(0.0..std::f64::consts::TAU);
    let phase_c = rng.random_range(0.0..std::f64::consts::TAU);
    let sigma = match s.noise_max {
        Some(max) if max > s.noise => rng.random_range(s.noise..=max),
        _ => s.noise,
    };
    let noise = Normal::new(0.0, sigma).expect("validated noise");
    let image = Grid2D::from_fn(h, w, |r, c| {
        let texture = s.texture * (freq_r * r as f64 + phase_r).sin() * (freq_c * c as f64 + phase_c).sin();
        let lesion = s.contrast * truth.get(r, c);
        let v = BACKGROUND_BASE + s.intensity_offset + texture + lesion + noise.sample(rng);
        v.clamp(0.0, 1.0)
    });
    (image, truth)
}

fn draw_ellipse(h: usize, w: usize, rmin: f64, rmax: f64, rng: &mut ChaCha8Rng) -> Grid2D {
    let ry = rng.random_range(rmin..=rmax);
    let rx = rng.random_range(rmin..=rmax);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let margin_r = (ry.min(h as f64 / 2.0 - 1.0)).max(0.0) as usize;
    let margin_c = (rx.min(w as f64 / 2.0 - 1.0)).max(0.0) as usize;
    // centre sits on a pixel, so the mask is never empty
    let cy = rng.random_range(margin_r..h - margin_r) as f64;
    let cx = rng.random_range(margin_c..w - margin_c) as f64;
    let (sin, cos) = angle.sin_cos();
    Grid2D::from_fn(h, w, |r, c| {
        let dy = r as f64 - cy;
        let dx = c as f64 - cx;
        let u = (dx * cos + dy * sin) / rx;
        let v = (-dx * sin + dy * cos) / ry;
        if u * u + v * v <= 1.0 {
            1.0
        } else {
            0.0
        }
    })
}
