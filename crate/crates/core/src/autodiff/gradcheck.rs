use super::{FaultInjection, Tape, Tensor, Var};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter index, flat coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coordinates: usize,
}

/// Checks `f`'s reverse-mode gradient wrt every coordinate of `params`.
///
/// `f` builds a scalar on the given tape from one `Var` per parameter and
/// must be deterministic. The error per coordinate is
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn finite_difference_check<E, F>(f: F, params: &[Tensor], epsilon: f64) -> Result<GradCheckReport, E>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
    E: From<super::TensorError>,
{
    finite_difference_check_with(f, params, epsilon, None)
}

/// As [`finite_difference_check`], with `fault` injected into the analytic
/// backward pass.
pub fn finite_difference_check_with<E, F>(
    f: F,
    params: &[Tensor],
    epsilon: f64,
    fault: Option<FaultInjection>,
) -> Result<GradCheckReport, E>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
    E: From<super::TensorError>,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    let analytic: Vec<Tensor> = {
        let tape = fault.map_or_else(Tape::new, Tape::with_fault);
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|v| grads.get(*v).cloned().expect("leaf gradient")).collect()
    };
    let eval = |ps: &[Tensor]| -> Result<f64, E> {
        let tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coordinates: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (p, grad) in analytic.iter().enumerate() {
        for i in 0..params[p].numel() {
            let original = params[p].data()[i];
            work[p].data_mut()[i] = original + epsilon;
            let plus = eval(&work)?;
            work[p].data_mut()[i] = original - epsilon;
            let minus = eval(&work)?;
            work[p].data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err;
                report.worst = Some((p, i));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
