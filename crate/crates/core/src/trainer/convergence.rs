use serde::{Deserialize, Serialize};

use super::step::StepReport;
use super::TrainError;

/// Running averages of the squared gradient norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCurve {
    /// `(1/T)·Σ_{t<T} ‖g_t‖²` for every `T = 1..=n`.
    pub running_mean: Vec<f64>,
    /// The same quantity sampled at `T = window, 2·window, …`.
    pub at_windows: Vec<(usize, f64)>,
    /// Largest sampled cross-Lipschitz ratio, if any were recorded.
    pub cross_lipschitz: Option<f64>,
}

pub fn convergence_metrics(history: &[StepReport], window: usize) -> Result<ConvergenceCurve, TrainError> {
    if window == 0 || window > history.len() {
        return Err(TrainError::Parameter(format!(
            "window {window} must lie in [1, {}]",
            history.len()
        )));
    }
    let running_mean: Vec<f64> = history
        .iter()
        .scan(0.0, |acc, r| {
            *acc += r.grad_norm * r.grad_norm;
            Some(*acc)
        })
        .enumerate()
        .map(|(i, s)| s / (i + 1) as f64)
        .collect();
    let at_windows = (window..=history.len())
        .step_by(window)
        .map(|t| (t, running_mean[t - 1]))
        .collect();
    let cross_lipschitz = history
        .iter()
        .filter_map(|r| r.cross_lipschitz)
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
    Ok(ConvergenceCurve {
        running_mean,
        at_windows,
        cross_lipschitz,
    })
}
