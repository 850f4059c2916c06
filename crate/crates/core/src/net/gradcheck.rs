use crate::error::Result;

use super::{NetworkParams, Nonlinearity, Objective};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Gradient magnitudes below this are compared in absolute terms:
    /// the error is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, floor: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters whose perturbation flipped a ReLU kink and were left out.
    pub skipped_kinks: usize,
}

/// Compares back-propagated gradients with central finite differences for
/// every weight and bias.
pub fn gradient_check(
    params: &NetworkParams,
    input: &[f64],
    target: &[f64],
    objective: Objective,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    let (_, analytic) = params.loss_and_gradients(input, target, objective)?;
    let base_pattern = kink_pattern(params, input)?;
    let mut probe = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped_kinks: 0 };

    let depth = params.depth();
    for d in 0..depth {
        let n_w = params.weights()[d].as_slice().len();
        let n_b = params.biases()[d].len();
        for k in 0..n_w + n_b {
            let is_weight = k < n_w;
            let original = *param_mut(&mut probe, d, k, n_w);
            let mut eval = |value: f64| -> Result<(f64, Vec<bool>)> {
                *param_mut(&mut probe, d, k, n_w) = value;
                Ok((loss_only(&probe, input, target, objective)?, kink_pattern(&probe, input)?))
            };
            let (plus, pat_plus) = eval(original + cfg.step)?;
            let (minus, pat_minus) = eval(original - cfg.step)?;
            *param_mut(&mut probe, d, k, n_w) = original;

            if pat_plus != base_pattern || pat_minus != base_pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let exact = if is_weight {
                analytic.gradients.weights[d].as_slice()[k]
            } else {
                analytic.gradients.biases[d][k - n_w]
            };
            let denom = exact.abs().max(numeric.abs()).max(cfg.floor);
            let err = (exact - numeric).abs() / denom;
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Flat index `k` over layer `d`'s weights followed by its biases.
fn param_mut(p: &mut NetworkParams, d: usize, k: usize, n_w: usize) -> &mut f64 {
    if k < n_w {
        &mut p.weights_mut()[d].as_mut_slice()[k]
    } else {
        &mut p.biases_mut()[d][k - n_w]
    }
}

fn loss_only(p: &NetworkParams, input: &[f64], target: &[f64], objective: Objective) -> Result<f64> {
    let trace = p.forward(input)?;
    let (loss, _) = objective.loss_and_delta(
        p.output_activation(),
        trace.pre_activation(p.depth()),
        trace.output(),
        target,
    )?;
    Ok(loss)
}

/// Signs of every ReLU pre-activation (hidden and, for a ReLU output, the
/// output layer). Empty for smooth networks.
fn kink_pattern(params: &NetworkParams, input: &[f64]) -> Result<Vec<bool>> {
    let hidden_relu = params.nonlinearity() == Nonlinearity::Relu;
    let out_relu = params.output_activation().elementwise() == Some(Nonlinearity::Relu);
    if !hidden_relu && !out_relu {
        return Ok(Vec::new());
    }
    let trace = params.forward(input)?;
    let depth = params.depth();
    let mut pattern = Vec::new();
    for d in 1..=depth {
        if (d < depth && hidden_relu) || (d == depth && out_relu) {
            pattern.extend(trace.pre_activation(d).iter().map(|&a| a > 0.0));
        }
    }
    Ok(pattern)
}
