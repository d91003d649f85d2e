//! Soft Dice coefficient and the per-image squared Dice loss.
//!
//! For a prediction `ŷ ∈ [0,1]^P` and a binary reference `g`:
//!
//! ```text
//! DSC  = 2 Σ ŷg / (Σ ŷ² + Σ g² + ε)
//! loss = Σ_images (1 − DSC)²
//! ```
//!
//! When both maps are identically zero the coefficient is defined as 1 and
//! its gradient as 0.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{ensure_same_shape, Scalar, Tensor};

pub const DSC_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub per_image_dsc: Vec<f64>,
}

struct Sums {
    inter: f64,
    pred_sq: f64,
    ref_sq: f64,
}

impl Sums {
    fn of<T: Scalar>(pred: &[T], reference: &[T]) -> Self {
        let mut s = Sums { inter: 0.0, pred_sq: 0.0, ref_sq: 0.0 };
        for (&p, &g) in pred.iter().zip(reference) {
            let (p, g) = (p.as_f64(), g.as_f64());
            s.inter += p * g;
            s.pred_sq += p * p;
            s.ref_sq += g * g;
        }
        s
    }

    fn is_empty(&self) -> bool {
        self.pred_sq + self.ref_sq == 0.0
    }

    fn denom(&self) -> f64 {
        self.pred_sq + self.ref_sq + DSC_EPS
    }

    fn dsc(&self) -> f64 {
        if self.is_empty() {
            1.0
        } else {
            2.0 * self.inter / self.denom()
        }
    }
}

/// Soft Dice coefficient of two equally shaped maps, treated as one image.
pub fn dsc<T: Scalar>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    ensure_same_shape("dsc", pred, reference)?;
    Ok(Sums::of(pred.data(), reference.data()).dsc())
}

/// `∂DSC/∂ŷ_q = (2 g_q S − 4 ŷ_q Σŷg) / S²` with `S = Σŷ² + Σg² + ε`.
pub fn dsc_grad<T: Scalar>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_shape("dsc_grad", pred, reference)?;
    let s = Sums::of(pred.data(), reference.data());
    if s.is_empty() {
        return Ok(Tensor::zeros_like(pred));
    }
    let d = s.denom();
    pred.zip_map(reference, "dsc_grad", |p, g| {
        T::of((2.0 * g.as_f64() * d - 4.0 * p.as_f64() * s.inter) / (d * d))
    })
}

fn images<'a, T: Scalar>(
    pred: &'a Tensor<T>,
    reference: &'a Tensor<T>,
) -> Result<impl Iterator<Item = (&'a [T], &'a [T])>> {
    ensure_same_shape("dice_loss", pred, reference)?;
    let n = pred.shape()[0];
    if n == 0 || pred.rank() < 2 {
        return Err(Error::invalid(format!("dice loss needs a batch axis, got shape {:?}", pred.shape())));
    }
    let per = pred.numel() / n;
    Ok(pred.data().chunks(per).zip(reference.data().chunks(per)))
}

/// Sum over the batch (first axis) of `(1 − DSC_i)²`.
pub fn dice_loss<T: Scalar>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<LossReport> {
    let per_image_dsc: Vec<f64> = images(pred, reference)?.map(|(p, g)| Sums::of(p, g).dsc()).collect();
    let loss = per_image_dsc.iter().map(|d| (1.0 - d) * (1.0 - d)).sum();
    Ok(LossReport { loss, per_image_dsc })
}

/// `∂L/∂ŷ = −2 (1 − DSC_i) ∂DSC_i/∂ŷ` for each image of the batch.
pub fn dice_loss_grad<T: Scalar>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = Vec::with_capacity(pred.numel());
    for (p, g) in images(pred, reference)? {
        let s = Sums::of(p, g);
        if s.is_empty() {
            out.extend(std::iter::repeat_n(T::zero(), p.len()));
            continue;
        }
        let d = s.denom();
        let k = -2.0 * (1.0 - s.dsc());
        out.extend(p.iter().zip(g).map(|(&p, &g)| {
            T::of(k * (2.0 * g.as_f64() * d - 4.0 * p.as_f64() * s.inter) / (d * d))
        }));
    }
    Tensor::new(pred.shape().to_vec(), out)
}

impl<T: Scalar> Graph<T> {
    /// Differentiable per-image coefficients, shape `[N]`.
    pub fn dice_coefficients(&mut self, pred: &Var<T>, reference: &Tensor<T>) -> Result<Var<T>> {
        let empty: Vec<bool> = images(pred.value(), reference)?.map(|(p, g)| Sums::of(p, g).is_empty()).collect();
        let g = self.constant(reference.clone());
        let pg = self.mul(pred, &g)?;
        let inter = self.sum_per_sample(&pg);
        let pp = self.mul(pred, pred)?;
        let pred_sq = self.sum_per_sample(&pp);
        let ref_sq: Vec<T> = images(pred.value(), reference)?.map(|(_, g)| T::of(Sums::of(g, g).inter)).collect();
        let ref_sq = self.constant(Tensor::new(vec![empty.len()], ref_sq)?);
        let s = self.add(&pred_sq, &ref_sq)?;
        let s = self.add_scalar(&s, T::of(DSC_EPS));
        let two_inter = self.scale(&inter, T::of(2.0));
        let d = self.div(&two_inter, &s)?;
        self.mask_fill(&d, empty, T::one())
    }

    /// Differentiable dice loss, shape `[1]`.
    pub fn dice_loss(&mut self, pred: &Var<T>, reference: &Tensor<T>) -> Result<Var<T>> {
        let d = self.dice_coefficients(pred, reference)?;
        let neg = self.scale(&d, -T::one());
        let c = self.add_scalar(&neg, T::one());
        let sq = self.mul(&c, &c)?;
        Ok(self.sum(&sq))
    }
}
