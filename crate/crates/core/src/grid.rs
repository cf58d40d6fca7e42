//! Dense 2-D scalar grids and the Dice overlap metric.
//!
//! A [`Grid2D`] carries images, probability maps and binary masks alike. Only
//! the foreground channel is stored; background is its complement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothing constant added to both numerator and denominator of every Dice
/// computation. Keeps empty masks well defined (two empty masks score 1.0).
pub const DICE_SMOOTHING: f64 = 1e-6;

/// Row-major `height x width` grid of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Grid2D {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim(format!("grid must be non-empty, got {height}x{width}")));
        }
        if values.len() != height * width {
            return Err(Error::dim(format!(
                "{height}x{width} grid needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "grid must be non-empty");
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0, "grid must be non-empty");
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.width + col] = value;
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn is_probability(&self) -> bool {
        self.values.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Binary mask of `value >= threshold`.
    pub fn threshold(&self, threshold: f64) -> Grid2D {
        self.map(|v| if v >= threshold { 1.0 } else { 0.0 })
    }

    /// Threshold at 0.5, the convention used for pseudo labels and evaluation.
    pub fn harden(&self) -> Grid2D {
        self.threshold(0.5)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid2D {
        Grid2D {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Grid2D) -> Result<Grid2D> {
        ensure_same_shape(self, other)?;
        Ok(Grid2D {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a * b)
                .collect(),
        })
    }

    pub fn count_foreground(&self) -> usize {
        self.values.iter().filter(|&&v| v >= 0.5).count()
    }
}

pub(crate) fn ensure_same_shape(a: &Grid2D, b: &Grid2D) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "grid shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Smoothed Dice coefficient `(2 sum(a*b) + s) / (sum(a) + sum(b) + s)`.
pub fn dice_coefficient(a: &Grid2D, b: &Grid2D) -> Result<f64> {
    ensure_same_shape(a, b)?;
    let (inter, total) = overlap_sums(a.values(), b.values());
    Ok((2.0 * inter + DICE_SMOOTHING) / (total + DICE_SMOOTHING))
}

/// `1 - dice_coefficient(pred, target)`.
pub fn soft_dice_loss(pred: &Grid2D, target: &Grid2D) -> Result<f64> {
    Ok(1.0 - dice_coefficient(pred, target)?)
}

/// Gradient of [`soft_dice_loss`] with respect to `pred`; `target` is held
/// constant.
pub fn soft_dice_loss_gradient(pred: &Grid2D, target: &Grid2D) -> Result<Grid2D> {
    soft_dice_loss_and_gradient(pred, target).map(|(_, grad)| grad)
}

/// Loss value and gradient in one pass.
pub fn soft_dice_loss_and_gradient(pred: &Grid2D, target: &Grid2D) -> Result<(f64, Grid2D)> {
    ensure_same_shape(pred, target)?;
    let (inter, total) = overlap_sums(pred.values(), target.values());
    let numer = 2.0 * inter + DICE_SMOOTHING;
    let denom = total + DICE_SMOOTHING;
    let denom_sq = denom * denom;
    // d(numer/denom)/dp_j = (2 t_j denom - numer) / denom^2, negated for the loss.
    let values = target
        .values()
        .iter()
        .map(|&t| (numer - 2.0 * t * denom) / denom_sq)
        .collect();
    let grad = Grid2D {
        height: pred.height,
        width: pred.width,
        values,
    };
    Ok((1.0 - numer / denom, grad))
}

fn overlap_sums(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut total = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        inter += x * y;
        total += x + y;
    }
    (inter, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(h: usize, w: usize, fg: &[(usize, usize)]) -> Grid2D {
        let mut g = Grid2D::zeros(h, w);
        for &(r, c) in fg {
            g.set(r, c, 1.0);
        }
        g
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(matches!(Grid2D::new(2, 3, vec![0.0; 5]), Err(Error::Dimension(_))));
        assert!(Grid2D::new(2, 3, vec![0.0; 6]).is_ok());
    }

    #[test]
    fn dice_identity() {
        let a = mask(4, 4, &[(0, 0), (1, 2), (3, 3)]);
        assert!((dice_coefficient(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dice_disjoint() {
        let a = mask(4, 4, &[(0, 0), (0, 1)]);
        let b = mask(4, 4, &[(3, 3), (2, 3)]);
        assert!(dice_coefficient(&a, &b).unwrap() < 1e-6);
    }

    #[test]
    fn dice_half_overlap() {
        // a: top-left 2x2 block; b: shares the top row of it plus two cells right
        let a = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let b = mask(4, 4, &[(0, 0), (0, 1), (0, 2), (0, 3)]);
        let d = dice_coefficient(&a, &b).unwrap();
        assert!((d - 0.5).abs() < 1e-6, "{d}");
    }

    #[test]
    fn dice_empty_masks_score_one() {
        let z = Grid2D::zeros(3, 3);
        assert_eq!(dice_coefficient(&z, &z).unwrap(), 1.0);
    }

    #[test]
    fn dice_shape_mismatch() {
        let a = Grid2D::zeros(2, 2);
        let b = Grid2D::zeros(2, 3);
        assert!(matches!(dice_coefficient(&a, &b), Err(Error::Dimension(_))));
        assert!(soft_dice_loss(&a, &b).is_err());
        assert!(soft_dice_loss_gradient(&a, &b).is_err());
    }

    #[test]
    fn loss_examples() {
        let t = mask(3, 3, &[(1, 1), (2, 2)]);
        assert!(soft_dice_loss(&t, &t).unwrap().abs() < 1e-9);
        assert!((soft_dice_loss(&Grid2D::zeros(3, 3), &t).unwrap() - 1.0).abs() < 1e-6);

        let t = mask(2, 2, &[(0, 0), (1, 1)]);
        let p = Grid2D::filled(2, 2, 0.5);
        assert!((soft_dice_loss(&p, &t).unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn gradient_degenerate_is_finite() {
        let z = Grid2D::zeros(4, 4);
        let g = soft_dice_loss_gradient(&z, &z).unwrap();
        assert!(g.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gradient_at_perfect_prediction() {
        // At pred == target with n foreground pixels the analytic gradient is
        // -(2t - 1) / (2n + s): not zero, because the optimum sits on the
        // boundary of the [0,1] box.
        let t = mask(4, 4, &[(0, 0), (1, 1), (2, 2)]);
        let g = soft_dice_loss_gradient(&t, &t).unwrap();
        let expect = 1.0 / (6.0 + DICE_SMOOTHING);
        for (gv, tv) in g.values().iter().zip(t.values()) {
            let want = if *tv == 1.0 { -expect } else { expect };
            assert!((gv - want).abs() < 1e-12);
        }
    }

    fn finite_difference(pred: &Grid2D, target: &Grid2D, idx: usize, h: f64) -> f64 {
        let mut plus = pred.clone();
        plus.values_mut()[idx] += h;
        let mut minus = pred.clone();
        minus.values_mut()[idx] -= h;
        (soft_dice_loss(&plus, target).unwrap() - soft_dice_loss(&minus, target).unwrap()) / (2.0 * h)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        for _ in 0..4 {
            let pred = Grid2D::from_fn(8, 8, |_, _| rng.random::<f64>());
            let target = Grid2D::from_fn(8, 8, |_, _| rng.random::<f64>());
            let grad = soft_dice_loss_gradient(&pred, &target).unwrap();
            for idx in 0..64 {
                let fd = finite_difference(&pred, &target, idx, 1e-5);
                let an = grad.values()[idx];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-12);
                assert!(rel < 1e-4, "idx {idx}: analytic {an} fd {fd}");
                checked += 1;
            }
        }
        assert!(checked >= 100);
    }

    proptest! {
        #[test]
        fn dice_symmetric_and_bounded(
            a in proptest::collection::vec(0.0f64..=1.0, 25),
            b in proptest::collection::vec(0.0f64..=1.0, 25),
        ) {
            let a = Grid2D::new(5, 5, a).unwrap();
            let b = Grid2D::new(5, 5, b).unwrap();
            let ab = dice_coefficient(&a, &b).unwrap();
            let ba = dice_coefficient(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }
}
