use super::{Graph, ParamSet, TensorError, Var};

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Where a gradient check disagreed most.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_error: f64,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences with step `eps`, over every coordinate of every parameter.
/// Returns the largest [`relative_error`].
pub fn grad_check<F>(f: F, params: &ParamSet<f64>, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var, TensorError>,
{
    grad_check_report(f, params, eps).map(|r| r.max_error)
}

/// [`grad_check`] with the coordinate that produced the maximum.
pub fn grad_check_report<F>(f: F, params: &ParamSet<f64>, eps: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var, TensorError>,
{
    grad_check_filtered(f, params, eps, |_| true)
}

/// [`grad_check_report`] over the parameters whose name passes `include`.
///
/// Central differences carry roughly `1e-16 |f| / eps` of rounding noise,
/// which the `1e-8` floor turns into a large relative error wherever the
/// true gradient is exactly zero. Such parameters are better checked by
/// asserting their analytic gradient vanishes.
pub fn grad_check_filtered<F>(
    f: F,
    params: &ParamSet<f64>,
    eps: f64,
    include: impl Fn(&str) -> bool,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var, TensorError>,
{
    let eval = |p: &ParamSet<f64>| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let out = f(&mut g, p)?;
        g.check_finite()?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let analytic = g.backward(loss, params)?;

    let mut probe = params.clone();
    let mut worst = GradCheckReport {
        max_error: 0.0,
        param: String::new(),
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for slot in 0..params.len() {
        if !include(&params.names()[slot]) {
            continue;
        }
        for i in 0..params.get(slot).len() {
            let x = params.get(slot).data()[i];
            probe.get_mut(slot).data_mut()[i] = x + eps;
            let up = eval(&probe)?;
            probe.get_mut(slot).data_mut()[i] = x - eps;
            let down = eval(&probe)?;
            probe.get_mut(slot).data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[slot].data()[i];
            let err = relative_error(a, numeric);
            if err > worst.max_error || worst.param.is_empty() {
                worst = GradCheckReport {
                    max_error: err,
                    param: params.names()[slot].clone(),
                    index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(worst)
}
