//! Cross-entropy losses built on the tape.

use crate::tensor::{Tape, TensorId};
use crate::{CoreError, Result};

const CLAMP_LO: f64 = 1e-7;
const CLAMP_HI: f64 = 1.0 - 1e-7;

/// Binary cross-entropy of a sigmoid probability against a 0/1 label:
/// `-(y ln p + (1-y) ln(1-p))` with p clamped to `[1e-7, 1-1e-7]`.
/// Returns a scalar node.
pub fn bce_loss(tape: &mut Tape, prob: TensorId, label: f64) -> Result<TensorId> {
    if label != 0.0 && label != 1.0 {
        return Err(CoreError::InvalidArgument(format!(
            "binary label must be 0 or 1, got {label}"
        )));
    }
    if tape.value(prob).numel() != 1 {
        return Err(CoreError::ShapeMismatch {
            op: "bce_loss",
            details: format!("probability shape {:?}", tape.shape(prob)),
        });
    }
    let p = tape.clamp(prob, CLAMP_LO, CLAMP_HI)?;
    let log_p = tape.log(p)?;
    let one_minus = {
        let neg = tape.mul_scalar(p, -1.0)?;
        tape.add_scalar(neg, 1.0)?
    };
    let log_not = tape.log(one_minus)?;
    let a = tape.mul_scalar(log_p, -label)?;
    let b = tape.mul_scalar(log_not, -(1.0 - label))?;
    let sum = tape.add(a, b)?;
    tape.mean_all(sum)
}

/// Categorical cross-entropy of a softmax row against a class index:
/// `-ln probs[y]`, clamped. `probs` is `[1, n]` and must sum to 1 within
/// 1e-6. Returns a scalar node.
pub fn cce_loss(tape: &mut Tape, probs: TensorId, label: usize) -> Result<TensorId> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 2 || shape[0] != 1 {
        return Err(CoreError::ShapeMismatch {
            op: "cce_loss",
            details: format!("probabilities shape {shape:?}, expected [1, n]"),
        });
    }
    let n = shape[1];
    if label >= n {
        return Err(CoreError::InvalidArgument(format!(
            "class index {label} out of range for {n} classes"
        )));
    }
    let sum: f64 = tape.data(probs).iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(CoreError::InvalidArgument(format!(
            "probabilities sum to {sum}, not 1"
        )));
    }
    let picked = tape.slice(probs, 1, label, 1)?;
    let clamped = tape.clamp(picked, CLAMP_LO, 1.0)?;
    let log_p = tape.log(clamped)?;
    let neg = tape.mul_scalar(log_p, -1.0)?;
    tape.mean_all(neg)
}
