use crate::error::{Result, SruError};
use crate::numerics::ParamStore;

/// Compares the analytic gradients stored in `params` against central finite
/// differences of `loss_fn`.
///
/// Returns the maximum over all coordinates of
/// `|analytic - numeric| / max(1e-6, |analytic| + |numeric|)`. The floor keeps
/// round-off on near-zero gradients from counting as error.
pub fn finite_difference_check<F>(
    mut loss_fn: F,
    params: &ParamStore<f64>,
    epsilon: f64,
) -> Result<f64>
where
    F: FnMut(&ParamStore<f64>) -> f64,
{
    let first = loss_fn(params);
    let second = loss_fn(params);
    if first.to_bits() != second.to_bits() {
        return Err(SruError::Determinism { first, second });
    }
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for id in params.ids() {
        let analytic = params.grad(id).ok_or_else(|| {
            SruError::contract(format!("missing gradient for `{}`", params.name(id)))
        })?;
        for i in 0..params.value(id).len() {
            let base = params.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = base + epsilon;
            let plus = loss_fn(&probe);
            probe.value_mut(id).data_mut()[i] = base - epsilon;
            let minus = loss_fn(&probe);
            probe.value_mut(id).data_mut()[i] = base;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
