//! Finite-difference validation of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::TensorError;

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences and returns the maximum relative error
/// `|analytic − numeric| / max(1, |analytic|)` over all input entries.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    grad_check_multi(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        eps,
    )
}

/// [`grad_check`] over several independent inputs.
pub fn grad_check_multi<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = f(&tape, &vars)?;
        if !loss.value().is_scalar() {
            return Err(TensorError::Shape(
                "grad_check requires a scalar-valued function".into(),
            ));
        }
        let grads = tape.backward(loss)?;
        vars.iter().map(|v| grads.get(*v)).collect()
    };

    let eval = |inputs: &[Tensor]| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        f(&tape, &vars)?.item()
    };

    let mut worst: f64 = 0.0;
    let mut perturbed: Vec<Tensor> = xs.to_vec();
    for (xi, grad) in analytic.iter().enumerate() {
        for j in 0..xs[xi].len() {
            let orig = xs[xi].data()[j];
            perturbed[xi].data_mut()[j] = orig + eps;
            let plus = eval(&perturbed)?;
            perturbed[xi].data_mut()[j] = orig - eps;
            let minus = eval(&perturbed)?;
            perturbed[xi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[j];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
