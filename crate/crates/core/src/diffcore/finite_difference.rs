//! Central finite-difference probes for validating backward sweeps.
//! Slow by design; intended for tests and debugging, not training.

use super::{DiffResult, GradSet, ParamSet, Tensor2};

/// Central-difference estimate of d(loss)/d(params[name]).
/// `f` must re-evaluate the loss from scratch for the given parameters.
pub fn finite_difference_gradient<F>(
    mut f: F,
    params: &ParamSet,
    name: &str,
    step: f64,
) -> DiffResult<Tensor2>
where
    F: FnMut(&ParamSet) -> DiffResult<f64>,
{
    let base = params.get(name)?.clone();
    let mut grad = Tensor2::zeros(base.rows(), base.cols());
    let mut work = params.clone();
    for i in 0..base.data().len() {
        let original = base.data()[i];
        work.get_mut(name)?.data_mut()[i] = original + step;
        let up = f(&work)?;
        work.get_mut(name)?.data_mut()[i] = original - step;
        let down = f(&work)?;
        work.get_mut(name)?.data_mut()[i] = original;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// Largest relative disagreement between analytic gradients and central
/// finite differences over every entry of every parameter. The relative
/// error uses a floor of 1e-3 in the denominator so that entries whose
/// true gradient is too small for finite differences to resolve do not
/// dominate the comparison.
pub fn max_relative_gradient_error<F>(
    mut f: F,
    params: &ParamSet,
    grads: &GradSet,
    step: f64,
) -> DiffResult<f64>
where
    F: FnMut(&ParamSet) -> DiffResult<f64>,
{
    let mut worst = 0.0f64;
    for (name, _) in params.iter() {
        let numeric = finite_difference_gradient(&mut f, params, name, step)?;
        let analytic = grads.get(name)?;
        for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
            let rel = (a - n).abs() / (a.abs().max(n.abs())).max(1e-3);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
