//! Combined soft Dice + cross-entropy loss over voxel class probabilities.
//!
//! For `A` voxels and `C` classes, with probabilities `O` and one-hot `G`:
//!
//! ```text
//! loss = 1 − (2/C)·Σ_r  Σ_x G·O / (Σ_x G² + Σ_x O² + ε_smooth)
//!          − (1/A)·Σ_x Σ_r G·ln(O + ε_log)
//! ```
//!
//! All sums in the Dice ratio run over the voxels of one class.

use ndarray::{Array2, ArrayView2, Axis};
use serde::Serialize;
use thiserror::Error;

use crate::vit::softmax_rows;

pub const EPS_LOG: f64 = 1e-12;
pub const EPS_SMOOTH: f64 = 1e-6;
const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid probability row {row}: {reason}")]
    InvalidProbability { row: usize, reason: String },
    #[error("ground-truth row {0} is not one-hot")]
    NotOneHot(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossParts {
    pub loss: f64,
    /// `1 − (2/C)·Σ_r ratio_r`
    pub dice_term: f64,
    /// `−(1/A)·Σ G·ln(O + ε_log)`
    pub ce_term: f64,
}

fn check_shapes(o: &ArrayView2<f64>, g: &ArrayView2<f64>) -> Result<(), LossError> {
    if o.dim() != g.dim() {
        return Err(LossError::ShapeMismatch(format!("O is {:?}, G is {:?}", o.dim(), g.dim())));
    }
    if o.nrows() == 0 || o.ncols() == 0 {
        return Err(LossError::ShapeMismatch(format!("empty input {:?}", o.dim())));
    }
    Ok(())
}

fn check_one_hot(g: &ArrayView2<f64>) -> Result<(), LossError> {
    for (i, row) in g.rows().into_iter().enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(LossError::NotOneHot(i));
        }
    }
    Ok(())
}

fn check_probabilities(o: &ArrayView2<f64>) -> Result<(), LossError> {
    for (i, row) in o.rows().into_iter().enumerate() {
        if let Some(bad) = row.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(LossError::InvalidProbability { row: i, reason: format!("entry {bad}") });
        }
        let sum = row.sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(LossError::InvalidProbability { row: i, reason: format!("sums to {sum}") });
        }
    }
    Ok(())
}

/// Per-class Dice ratio `Σ G·O / (Σ G² + Σ O² + ε)`; `0` when both the
/// numerator and denominator vanish.
fn dice_ratios(o: &ArrayView2<f64>, g: &ArrayView2<f64>, eps_smooth: f64) -> Vec<(f64, f64, f64)> {
    (0..o.ncols())
        .map(|r| {
            let (oc, gc) = (o.column(r), g.column(r));
            let inter = oc.dot(&gc);
            let denom = gc.dot(&gc) + oc.dot(&oc) + eps_smooth;
            let ratio = if denom > 0.0 { inter / denom } else { 0.0 };
            (ratio, inter, denom)
        })
        .collect()
}

pub fn dice_ce_parts(o: ArrayView2<f64>, g: ArrayView2<f64>, eps_smooth: f64) -> Result<LossParts, LossError> {
    check_shapes(&o, &g)?;
    check_one_hot(&g)?;
    check_probabilities(&o)?;
    let (a, c) = o.dim();
    let ratio_sum: f64 = dice_ratios(&o, &g, eps_smooth).iter().map(|r| r.0).sum();
    let dice_term = 1.0 - 2.0 / c as f64 * ratio_sum;
    let ce_sum: f64 = o.iter().zip(g.iter()).filter(|(_, &gv)| gv != 0.0).map(|(&ov, &gv)| gv * (ov + EPS_LOG).ln()).sum();
    let ce_term = -ce_sum / a as f64;
    Ok(LossParts { loss: dice_term + ce_term, dice_term, ce_term })
}

pub fn dice_ce_loss(o: ArrayView2<f64>, g: ArrayView2<f64>, eps_smooth: f64) -> Result<f64, LossError> {
    dice_ce_parts(o, g, eps_smooth).map(|p| p.loss)
}

/// Loss evaluated on row-softmax of `logits`.
pub fn dice_ce_loss_from_logits(logits: ArrayView2<f64>, g: ArrayView2<f64>, eps_smooth: f64) -> Result<LossParts, LossError> {
    check_shapes(&logits, &g)?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(LossError::InvalidProbability { row: 0, reason: "non-finite logit".into() });
    }
    dice_ce_parts(softmax_rows(logits).view(), g, eps_smooth)
}

/// Gradient of the loss with respect to the probabilities `O`.
pub fn dice_ce_grad_probs(o: ArrayView2<f64>, g: ArrayView2<f64>, eps_smooth: f64) -> Result<Array2<f64>, LossError> {
    check_shapes(&o, &g)?;
    check_one_hot(&g)?;
    let (a, c) = o.dim();
    let ratios = dice_ratios(&o, &g, eps_smooth);
    let mut grad = Array2::zeros((a, c));
    for ((x, r), d) in grad.indexed_iter_mut() {
        let (_, inter, denom) = ratios[r];
        let (ov, gv) = (o[[x, r]], g[[x, r]]);
        let dratio = if denom > 0.0 { (gv * denom - inter * 2.0 * ov) / (denom * denom) } else { 0.0 };
        *d = -2.0 / c as f64 * dratio - gv / ((ov + EPS_LOG) * a as f64);
    }
    Ok(grad)
}

/// Gradient with respect to the logits, through the row softmax.
pub fn dice_ce_grad(logits: ArrayView2<f64>, g: ArrayView2<f64>, eps_smooth: f64) -> Result<Array2<f64>, LossError> {
    check_shapes(&logits, &g)?;
    let o = softmax_rows(logits);
    let d_o = dice_ce_grad_probs(o.view(), g, eps_smooth)?;
    Ok(crate::vit::ops::softmax_rows_backward(o.view(), d_o.view()))
}

/// One-hot rows from class indices.
pub fn one_hot(classes: &[usize], num_classes: usize) -> Array2<f64> {
    let mut g = Array2::zeros((classes.len(), num_classes));
    for (row, &c) in classes.iter().enumerate() {
        g[[row, c]] = 1.0;
    }
    g
}

/// Dice similarity coefficient `2|P∩T| / (|P| + |T|)` for one class; `1`
/// when the class is absent from both.
pub fn dsc_metric(pred: &[u8], truth: &[u8], class: u8) -> Result<f64, LossError> {
    if pred.len() != truth.len() {
        return Err(LossError::ShapeMismatch(format!("{} predicted vs {} true voxels", pred.len(), truth.len())));
    }
    let (mut p, mut t, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        let (ia, ib) = (a == class, b == class);
        p += usize::from(ia);
        t += usize::from(ib);
        both += usize::from(ia && ib);
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + t) as f64)
}

/// Linear per-token classifier used to attach the loss to encoder outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationHead {
    /// `P × C`
    pub weight: Array2<f64>,
    /// `1 × C`
    pub bias: Array2<f64>,
}

pub struct HeadGrads {
    pub tokens: Array2<f64>,
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl SegmentationHead {
    pub fn logits(&self, tokens: ArrayView2<f64>) -> Array2<f64> {
        tokens.dot(&self.weight) + &self.bias
    }

    pub fn backward(&self, tokens: ArrayView2<f64>, d_logits: ArrayView2<f64>) -> HeadGrads {
        HeadGrads {
            tokens: d_logits.dot(&self.weight.t()),
            weight: tokens.t().dot(&d_logits),
            bias: d_logits.sum_axis(Axis(0)).insert_axis(Axis(0)),
        }
    }
}
