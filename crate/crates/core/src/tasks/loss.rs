use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::grid::{BinaryGrid, Grid};

/// Smoothing constant added to the Dice numerator and denominator.
pub const DICE_EPS: f64 = 1.0;

/// Which side of the intensity gate counts as "inside" the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Bright,
    Dark,
}

/// Mean squared pixel difference.
pub fn mse_on_tape(tape: &mut Tape, image: NodeId, target: &Grid) -> Result<NodeId> {
    let shape = tape.value(image).shape();
    if shape != target.shape() {
        return Err(Error::Shape {
            op: "mse_loss",
            left: shape,
            right: target.shape(),
        });
    }
    let t = tape.constant(target.clone())?;
    let diff = tape.sub(image, t)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

/// Soft-Dice loss `1 − (2Σ p⊙M + ε) / (Σp + ΣM + ε)` of a probability map.
pub fn soft_dice_from_probability(tape: &mut Tape, prob: NodeId, mask: &BinaryGrid) -> Result<NodeId> {
    let shape = tape.value(prob).shape();
    if shape != mask.shape() {
        return Err(Error::Shape {
            op: "soft_dice_loss",
            left: shape,
            right: mask.shape(),
        });
    }
    let mask_total = mask.count_ones();
    if mask_total == 0 {
        return Err(Error::Config("soft_dice_loss: mask is all zero".into()));
    }
    let m = tape.constant(mask.to_grid())?;
    let overlap = tape.mul(prob, m)?;
    let overlap = tape.sum(overlap)?;
    let twice = tape.scale(overlap, 2.0)?;
    let numerator = tape.offset(twice, DICE_EPS)?;
    let predicted = tape.sum(prob)?;
    let denominator = tape.offset(predicted, mask_total as f64 + DICE_EPS)?;
    let ratio = tape.div(numerator, denominator)?;
    let negated = tape.scale(ratio, -1.0)?;
    tape.offset(negated, 1.0)
}

/// Soft-Dice of an intensity image gated by `sigmoid(γ·(x − τ))` (bright)
/// or `sigmoid(γ·(τ − x))` (dark).
pub fn soft_dice_on_tape(
    tape: &mut Tape,
    image: NodeId,
    mask: &BinaryGrid,
    polarity: Polarity,
    gate_gamma: f64,
    gate_tau: f64,
) -> Result<NodeId> {
    let centered = tape.offset(image, -gate_tau)?;
    let sign = match polarity {
        Polarity::Bright => 1.0,
        Polarity::Dark => -1.0,
    };
    let logits = tape.scale(centered, sign * gate_gamma)?;
    let prob = tape.sigmoid(logits)?;
    soft_dice_from_probability(tape, prob, mask)
}

pub fn mse_loss(image: &Grid, target: &Grid) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(image.clone())?;
    let l = mse_on_tape(&mut tape, x, target)?;
    Ok(tape.scalar_value(l))
}

pub fn soft_dice_loss(
    image: &Grid,
    mask: &BinaryGrid,
    polarity: Polarity,
    gate_gamma: f64,
    gate_tau: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(image.clone())?;
    let l = soft_dice_on_tape(&mut tape, x, mask, polarity, gate_gamma, gate_tau)?;
    Ok(tape.scalar_value(l))
}
