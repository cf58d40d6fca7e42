//! Tiny dense-prediction network with hand-written backpropagation.
//!
//! Architecture: `conv kxk (1 -> c1) -> tanh -> conv kxk (c1 -> c2) -> tanh ->
//! conv 1x1 (c2 -> 1) -> sigmoid`, stride 1 with zero "same" padding, so the
//! output is a per-pixel foreground probability of the input's shape.
//!
//! Parameters live in one flat [`ParamVector`] with the layout
//!
//! ```text
//! conv1.weight [c1][k][k]     conv1.bias [c1]
//! conv2.weight [c2][c1][k][k] conv2.bias [c2]
//! proj.weight  [c2]           proj.bias  [1]
//! ```

mod adam;
mod checkpoint;
mod conv;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid2D;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, decode_params, encode_params, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]

pub struct ModelSpec {
    pub height: usize,
    pub width: usize,
    pub conv1_width: usize,
    pub conv2_width: usize,
    pub kernel: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            conv1_width: 8,
            conv2_width: 8,
            kernel: 3,
        }
    }
}

impl ModelSpec {
    pub fn with_size(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("model input size must be positive".into()));
        }
        if self.conv1_width == 0 || self.conv2_width == 0 {
            return Err(Error::Config("model channel widths must be positive".into()));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size must be odd for same padding, got {}",
                self.kernel
            )));
        }
        Ok(())
    }

    /// `c1 k^2 + c1 + c2 c1 k^2 + c2 + c2 + 1`.
    pub fn param_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        let (c1, c2) = (self.conv1_width, self.conv2_width);
        c1 * k2 + c1 + c2 * c1 * k2 + c2 + c2 + 1
    }

    fn layout(&self) -> Layout {
        let k2 = self.kernel * self.kernel;
        let (c1, c2) = (self.conv1_width, self.conv2_width);
        let w1 = 0;
        let b1 = w1 + c1 * k2;
        let w2 = b1 + c1;
        let b2 = w2 + c2 * c1 * k2;
        let w3 = b2 + c2;
        let b3 = w3 + c2;
        Layout {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            end: b3 + 1,
        }
    }

    fn check_image(&self, image: &Grid2D) -> Result<()> {
        if image.shape() != (self.height, self.width) {
            return Err(Error::dim(format!(
                "model expects {}x{} input, got {:?}",
                self.height,
                self.width,
                image.shape()
            )));
        }
        Ok(())
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::dim(format!(
                "model needs {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    end: usize,
}

/// Flat parameter (or gradient, or delta) vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        check_len(self, other)?;
        Ok(ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParamVector, scale: f64) -> Result<()> {
        check_len(self, other)?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.0 {
            *v *= factor;
        }
    }
}

pub(crate) fn check_len(a: &ParamVector, b: &ParamVector) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim(format!(
            "parameter vectors differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Uniform `[-r, r]` init with `r = 1/sqrt(fan_in)` per layer, biases included.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = spec.layout();
    let k2 = (spec.kernel * spec.kernel) as f64;
    let mut values = vec![0.0; l.end];
    let ranges = [
        (l.w1, l.w2, 1.0 / k2.sqrt()),
        (l.w2, l.w3, 1.0 / (spec.conv1_width as f64 * k2).sqrt()),
        (l.w3, l.end, 1.0 / (spec.conv2_width as f64).sqrt()),
    ];
    for (start, end, r) in ranges {
        for v in &mut values[start..end] {
            *v = rng.random_range(-r..=r);
        }
    }
    ParamVector(values)
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    hidden1: Vec<f64>,
    hidden2: Vec<f64>,
    output: Grid2D,
}

impl Activations {
    pub fn output(&self) -> &Grid2D {
        &self.output
    }
}

/// Per-pixel foreground probabilities for `image`.
pub fn forward(spec: &ModelSpec, params: &ParamVector, image: &Grid2D) -> Result<Grid2D> {
    Ok(forward_cached(spec, params, image)?.output)
}

pub fn forward_cached(spec: &ModelSpec, params: &ParamVector, image: &Grid2D) -> Result<Activations> {
    spec.check_image(image)?;
    spec.check_params(params)?;
    let p = params.as_slice();
    let l = spec.layout();
    let (h, w, k) = (spec.height, spec.width, spec.kernel);
    let (c1, c2) = (spec.conv1_width, spec.conv2_width);
    let plane = h * w;

    let mut hidden1 = conv::conv_same(image.values(), 1, &p[l.w1..l.b1], &p[l.b1..l.w2], c1, h, w, k);
    hidden1.iter_mut().for_each(|v| *v = v.tanh());

    let mut hidden2 = conv::conv_same(&hidden1, c1, &p[l.w2..l.b2], &p[l.b2..l.w3], c2, h, w, k);
    hidden2.iter_mut().for_each(|v| *v = v.tanh());

    let mut logits = vec![p[l.b3]; plane];
    for (c, &wc) in p[l.w3..l.b3].iter().enumerate() {
        let chan = &hidden2[c * plane..(c + 1) * plane];
        for (z, &a) in logits.iter_mut().zip(chan) {
            *z += wc * a;
        }
    }
    let output = Grid2D::new(h, w, logits.into_iter().map(sigmoid).collect())?;
    Ok(Activations {
        hidden1,
        hidden2,
        output,
    })
}

/// Gradient of a loss with respect to all parameters, given the loss gradient
/// at the model output.
pub fn backward(
    spec: &ModelSpec,
    params: &ParamVector,
    image: &Grid2D,
    loss_grad_at_output: &Grid2D,
) -> Result<ParamVector> {
    let acts = forward_cached(spec, params, image)?;
    backward_cached(spec, params, image, &acts, loss_grad_at_output)
}

pub fn backward_cached(
    spec: &ModelSpec,
    params: &ParamVector,
    image: &Grid2D,
    acts: &Activations,
    loss_grad_at_output: &Grid2D,
) -> Result<ParamVector> {
    spec.check_image(image)?;
    spec.check_params(params)?;
    spec.check_image(loss_grad_at_output)?;
    let p = params.as_slice();
    let l = spec.layout();
    let (h, w, k) = (spec.height, spec.width, spec.kernel);
    let (c1, c2) = (spec.conv1_width, spec.conv2_width);
    let plane = h * w;
    let mut grad = vec![0.0; l.end];

    // sigmoid
    let dz3: Vec<f64> = acts
        .output
        .values()
        .iter()
        .zip(loss_grad_at_output.values())
        .map(|(&y, &g)| g * y * (1.0 - y))
        .collect();
    grad[l.b3] = dz3.iter().sum();

    // 1x1 projection and tanh of layer 2
    let mut dz2 = vec![0.0; c2 * plane];
    for c in 0..c2 {
        let chan = &acts.hidden2[c * plane..(c + 1) * plane];
        let wc = p[l.w3 + c];
        let mut gw = 0.0;
        for ((d, &a), &g) in dz2[c * plane..(c + 1) * plane].iter_mut().zip(chan).zip(&dz3) {
            gw += g * a;
            *d = wc * g * (1.0 - a * a);
        }
        grad[l.w3 + c] = gw;
    }

    let (head, tail) = grad.split_at_mut(l.w2);
    let (g_w2, g_b2) = tail[..l.w3 - l.w2].split_at_mut(l.b2 - l.w2);
    conv::conv_weight_grad(&acts.hidden1, c1, &dz2, c2, h, w, k, g_w2, g_b2);

    let mut dz1 = conv::conv_input_grad(&p[l.w2..l.b2], &dz2, c1, c2, h, w, k);
    for (d, &a) in dz1.iter_mut().zip(&acts.hidden1) {
        *d *= 1.0 - a * a;
    }
    let (g_w1, g_b1) = head.split_at_mut(l.b1);
    conv::conv_weight_grad(image.values(), 1, &dz1, c1, h, w, k, g_w1, g_b1);

    Ok(ParamVector(grad))
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
