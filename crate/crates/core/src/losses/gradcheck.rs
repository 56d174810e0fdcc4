use crate::error::{Error, Result};

/// Largest relative disagreement between analytic gradients and central
/// differences, `|a − n| / max(|a|, |n|, 1e-8)`, over all coordinates.
///
/// `loss_fn` returns the loss and its analytic gradient at a point.
pub fn finite_diff_check<F>(loss_fn: F, params: &[f64], epsilon: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let (loss, analytic) = loss_fn(params)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    if analytic.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradient entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + epsilon;
        let (up, _) = loss_fn(&x)?;
        x[k] = orig - epsilon;
        let (down, _) = loss_fn(&x)?;
        x[k] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss near coordinate {k}")));
        }
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic[k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
