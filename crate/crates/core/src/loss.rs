//! Training objectives on the tape: normalized vertex regression, the Dice
//! objective for attention and their weighted sum.

use thiserror::Error;

use crate::geometry::Point;
use crate::head::points_to_tensor;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Additive guard in the Dice denominator.
pub const DICE_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("normalizer must be positive, got {0}")]
    Normalizer(f64),
    #[error("expected {expected} vertices, got {got}")]
    VertexCount { expected: usize, got: usize },
    #[error("non-finite loss term (vertex {vertex}, dice {dice})")]
    NonFinite { vertex: f64, dice: f64 },
}

/// `Σ_k Σ_axis smoothL1((pred − target) / W) / K` for `pred` of shape `[2, K]`.
pub fn vertex_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, targets: &[Point], w: f64) -> Result<Var, LossError> {
    if !(w > 0.0) {
        return Err(LossError::Normalizer(w));
    }
    let k = tape.shape(pred)[1];
    if targets.len() != k {
        return Err(LossError::VertexCount { expected: k, got: targets.len() });
    }
    let t = tape.constant(points_to_tensor(targets));
    let d = tape.sub(pred, t)?;
    let d = tape.scale(d, 1.0 / w);
    let s = tape.smooth_l1(d);
    let total = tape.sum(s);
    Ok(tape.scale(total, 1.0 / k as f64))
}

/// `m_k = 1` where vertex `k` is still further than `tau · W` from its target.
pub fn inaccuracy_mask(pred: &[Point], targets: &[Point], w: f64, tau: f64) -> Vec<bool> {
    pred.iter().zip(targets).map(|(p, t)| p.dist(*t) / w > tau).collect()
}

/// Dice loss `1 − 2 Σ β·m / (Σβ + Σm + ε)` between attention `beta` (`[1, K]`)
/// and the inaccuracy mask of `pred`. Returns a constant 0 when both sums
/// vanish.
pub fn modulation_loss<T: Scalar>(
    tape: &mut Tape<T>,
    beta: Var,
    pred: &[Point],
    targets: &[Point],
    w: f64,
    tau: f64,
) -> Result<Var, LossError> {
    if !(w > 0.0) {
        return Err(LossError::Normalizer(w));
    }
    let k = tape.shape(beta)[1];
    if pred.len() != k || targets.len() != k {
        return Err(LossError::VertexCount { expected: k, got: pred.len().min(targets.len()) });
    }
    let mask = inaccuracy_mask(pred, targets, w, tau);
    let m_sum = mask.iter().filter(|&&b| b).count() as f64;
    let b_sum: f64 = tape.value(beta).data().iter().map(|v| v.as_f64()).sum();
    if m_sum + b_sum <= DICE_EPS {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let m = tape.constant(Tensor::from_fn(&[1, k], |i| if mask[i] { T::one() } else { T::zero() }));
    let overlap = tape.mul(beta, m)?;
    let num = tape.sum(overlap);
    let den = tape.sum(beta);
    let den = tape.add_scalar(den, m_sum + DICE_EPS);
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -2.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// `L_dice + alpha · L_vertex`; non-finite terms are an error.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, vertex: Var, dice: Var, alpha: f64) -> Result<Var, LossError> {
    let v = tape.value(vertex).item()?.as_f64();
    let d = tape.value(dice).item()?.as_f64();
    if !v.is_finite() || !d.is_finite() {
        return Err(LossError::NonFinite { vertex: v, dice: d });
    }
    let weighted = tape.scale(vertex, alpha);
    Ok(tape.add(dice, weighted)?)
}
