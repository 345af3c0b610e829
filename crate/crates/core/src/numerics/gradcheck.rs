//! Central finite-difference gradient checking.

use super::{Graph, NumericsError, Tensor, Var};

/// Worst entry found by [`gradient_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter index, flat entry index)` of the worst entry.
    pub worst_entry: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// Compares reverse-mode gradients against central differences.
///
/// `loss_fn` receives a fresh graph and one leaf per parameter and must
/// return a one-element output. The relative error of an entry is
/// `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn gradient_check<F>(params: &[Tensor], step: f64, loss_fn: F) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>,
{
    if !(step > 0.0) {
        return Err(NumericsError::InvalidArgument("gradient-check step must be positive".into()));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = loss_fn(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|p| g.param(p.clone())).collect();
        let out = loss_fn(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_entry: None,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for ei in 0..param.len() {
            let orig = param.data()[ei];
            probe[pi].data_mut()[ei] = orig + step;
            let plus = eval(&probe).map_err(|e| probe_error(e, pi, ei))?;
            probe[pi].data_mut()[ei] = orig - step;
            let minus = eval(&probe).map_err(|e| probe_error(e, pi, ei))?;
            probe[pi].data_mut()[ei] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(NumericsError::ProbeNonFinite { param: pi, entry: ei });
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi].data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            report.entries_checked += 1;
            if rel > report.max_relative_error || report.worst_entry.is_none() {
                report.max_relative_error = rel;
                report.worst_entry = Some((pi, ei));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn probe_error(e: NumericsError, param: usize, entry: usize) -> NumericsError {
    match e {
        NumericsError::NonFinite { .. } => NumericsError::ProbeNonFinite { param, entry },
        other => other,
    }
}
