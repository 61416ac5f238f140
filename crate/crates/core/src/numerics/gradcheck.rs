use super::tensor::Parameters;
use crate::error::{Error, Result};

/// Relative error with the `max(|a|, |n|, 1e-8)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradients stored in each parameter's `grad` buffer
/// against central differences of `f`. Returns the worst relative error for
/// each parameter tensor, in visiting order. A tensor without a gradient
/// buffer is treated as having an all-zero analytic gradient.
pub fn finite_diff_check<P, F>(mut f: F, params: &mut P, step: f64) -> Result<Vec<f64>>
where
    P: Parameters + ?Sized,
    F: FnMut(&P) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::Numeric(format!("finite difference step must be positive, got {step}")));
    }
    let sizes: Vec<(String, usize)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.len()))
        .collect();
    let mut worst = Vec::with_capacity(sizes.len());
    for (ti, (name, len)) in sizes.iter().enumerate() {
        let mut max_err: f64 = 0.0;
        for j in 0..*len {
            let (orig, analytic) = {
                let t = &mut params.tensors_mut()[ti];
                (t.data()[j], t.grad().map_or(0.0, |g| g[j]))
            };
            params.tensors_mut()[ti].data_mut()[j] = orig + step;
            let plus = f(params);
            params.tensors_mut()[ti].data_mut()[j] = orig - step;
            let minus = f(params);
            params.tensors_mut()[ti].data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite objective while perturbing {name}[{j}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * step);
            max_err = max_err.max(relative_error(analytic, numeric));
        }
        worst.push(max_err);
    }
    Ok(worst)
}
