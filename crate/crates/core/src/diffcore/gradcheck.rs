use super::{DenseArray, DiffError, Tape, Var};

/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns the largest relative error over all coordinates.
pub fn grad_check<F>(f: F, x: &DenseArray, step: f64) -> Result<f64, DiffError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, DiffError>,
{
    if step <= 0.0 || step.is_nan() {
        return Err(DiffError::Step(step));
    }
    let eval = |point: &DenseArray| -> Result<f64, DiffError> {
        let tape = Tape::new();
        let v = f(&tape, tape.leaf(point.clone()))?.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(DiffError::NonFiniteObjective)
        }
    };

    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&tape, leaf)?;
    if !out.item().is_finite() {
        return Err(DiffError::NonFiniteObjective);
    }
    let analytic = tape.backward(out)?.wrt(leaf);

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let hi = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let lo = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (hi - lo) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
