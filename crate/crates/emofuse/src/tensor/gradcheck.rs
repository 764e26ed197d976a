//! Central finite-difference gradient verification.

use super::{Tape, Tensor, TensorId};
use crate::error::{Error, Result};

/// Compares the tape's reverse-mode gradients of a scalar function against
/// central finite differences, one coordinate at a time.
///
/// `build` reconstructs the loss graph on a fresh tape from the given
/// parameter leaves; it is called once for the analytic pass and twice per
/// coordinate for the numeric pass. Returns the maximum over coordinates of
/// |analytic − numeric| / max(1, |analytic|, |numeric|).
pub fn finite_diff_check<F>(params: &[Tensor], build: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidArgument(format!(
            "step size h must lie in [1e-7, 1e-3], got {h}"
        )));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params
        .iter()
        .map(|p| tape.leaf(p.clone().with_requires_grad()))
        .collect::<Result<_>>()?;
    let loss = build(&mut tape, &ids)?;
    if tape.data(loss).len() != 1 {
        return Err(Error::InvalidArgument(
            "finite_diff_check requires a scalar loss".into(),
        ));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.data(id).len()])
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = perturbed
            .iter()
            .map(|p| tape.leaf(p.clone()))
            .collect::<Result<_>>()?;
        let loss = build(&mut tape, &ids)?;
        let value = tape.data(loss)[0];
        if !value.is_finite() {
            return Err(Error::NonFinite("finite_diff_check objective".into()));
        }
        Ok(value)
    };

    let mut worst = 0.0f64;
    let mut scratch: Vec<Tensor> = params.to_vec();
    for (pi, grads) in analytic.iter().enumerate() {
        for (ci, &analytic_grad) in grads.iter().enumerate() {
            let original = scratch[pi].data[ci];
            scratch[pi].data[ci] = original + h;
            let plus = eval(&scratch)?;
            scratch[pi].data[ci] = original - h;
            let minus = eval(&scratch)?;
            scratch[pi].data[ci] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let err =
                (analytic_grad - numeric).abs() / 1.0f64.max(analytic_grad.abs()).max(numeric.abs());
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
