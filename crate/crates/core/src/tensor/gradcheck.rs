use super::{Matrix, Tape, Tensor, TensorError};

/// Compare the tape gradient of a scalar function against central finite
/// differences with the given step.
///
/// Returns `max_i |autodiff_i - fd_i| / max(1, |fd_i|)`.
pub fn grad_check<F, E>(f: F, x: &Matrix, step: f64) -> Result<f64, E>
where
    F: for<'t> Fn(Tensor<'t>) -> Result<Tensor<'t>, E>,
    E: From<TensorError>,
{
    if !(step > 0.0) {
        return Err(TensorError::InvalidArgument(format!("step must be positive, got {step}")).into());
    }
    let analytic = {
        let tape = Tape::new();
        let leaf = tape.param(x.clone())?;
        let out = f(leaf)?;
        check_scalar(&out)?;
        tape.backward(out)?;
        leaf.grad().unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()))
    };
    let eval = |m: Matrix| -> Result<f64, E> {
        let tape = Tape::new();
        let leaf = tape.constant(m)?;
        let out = f(leaf)?;
        Ok(check_scalar(&out)?)
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.as_mut_slice()[i] += step;
        let mut minus = x.clone();
        minus.as_mut_slice()[i] -= step;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic.as_slice()[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Pins a closure to the higher-ranked signature [`grad_check`] expects, so it
/// can be bound to a variable before use.
pub fn objective<F, E>(f: F) -> F
where
    F: for<'t> Fn(Tensor<'t>) -> Result<Tensor<'t>, E>,
{
    f
}

fn check_scalar(t: &Tensor<'_>) -> Result<f64, TensorError> {
    let shape = t.shape();
    let v = t.value_ref().item().ok_or(TensorError::NotScalar { shape })?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TensorError::NonFinite {
            context: "grad_check objective".into(),
        })
    }
}
