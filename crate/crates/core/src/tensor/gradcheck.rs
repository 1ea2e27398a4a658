//! Finite-difference gradient verification.

use crate::rng::SeedStream;
use crate::tensor::{Tape, Tensor, TensorId};
use crate::{CoreError, Result};

/// Outcome of a [`grad_check`] run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// number of elements compared
    pub checked: usize,
    /// (input index, element index, analytic, numeric) of the worst element
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Compare reverse-mode gradients of a scalar function against central
/// finite differences, element by element. The relative error is
/// `|analytic - numeric| / max(1, |numeric|)`.
///
/// `f` must be deterministic across calls (disable dropout or reseed it
/// inside `f`); the checker re-runs the forward pass for every perturbed
/// element.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    check_impl(f, inputs, step, tolerance, None)
}

/// [`grad_check`] variant that samples at most `max_elements` elements per
/// input (seeded), for functions with many parameters.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor],
    step: f64,
    tolerance: f64,
    max_elements: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    check_impl(f, inputs, step, tolerance, Some((max_elements, seed)))
}

fn check_impl<F>(
    f: F,
    inputs: &[Tensor],
    step: f64,
    tolerance: f64,
    sampling: Option<(usize, u64)>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    if step <= 0.0 {
        return Err(CoreError::InvalidArgument(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }

    let eval = |tensors: &[Tensor]| -> Result<(Tape, Vec<TensorId>, TensorId)> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = tensors
            .iter()
            .map(|t| tape.leaf(&t.clone().with_requires_grad()))
            .collect();
        let out = f(&mut tape, &ids)?;
        if !tape.value(out).is_scalar() {
            return Err(CoreError::InvalidArgument(format!(
                "grad_check function must return a scalar, got {:?}",
                tape.shape(out)
            )));
        }
        Ok((tape, ids, out))
    };

    let (tape, ids, loss) = eval(inputs)?;
    let base = tape.value(loss).item();
    if !base.is_finite() {
        return Err(CoreError::NonFinite { op: "grad_check" });
    }
    let grads = tape.backward(loss)?;

    let mut rng = sampling.map(|(_, seed)| SeedStream::new(seed));
    let mut max_rel_err: f64 = 0.0;
    let mut worst = None;
    let mut checked = 0;

    for (i, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.of(ids[i]) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; input.numel()],
        };
        let elements: Vec<usize> = match (&mut rng, sampling) {
            (Some(r), Some((cap, _))) if input.numel() > cap => r.sample_indices(input.numel(), cap),
            _ => (0..input.numel()).collect(),
        };
        for j in elements {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut dp = plus[i].data().to_vec();
            let mut dm = minus[i].data().to_vec();
            dp[j] += step;
            dm[j] -= step;
            plus[i].replace_data(dp);
            minus[i].replace_data(dm);
            let (tp, _, lp) = eval(&plus)?;
            let (tm, _, lm) = eval(&minus)?;
            let numeric = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * step);
            let rel = (analytic[j] - numeric).abs() / numeric.abs().max(1.0);
            checked += 1;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((i, j, analytic[j], numeric));
            }
        }
    }

    Ok(GradCheckReport {
        max_rel_err,
        tolerance,
        checked,
        worst,
    })
}
