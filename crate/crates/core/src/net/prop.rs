use crate::error::{Error, Result};
use crate::numeric::{norm_sq, Matrix};

use super::{Gradients, NetworkParams, OutputActivation};

/// Pre-activations `a_1..a_D` and activations `h_0..h_D` of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn depth(&self) -> usize {
        self.pre.len()
    }

    /// `a_d` for `d` in `1..=depth`.
    pub fn pre_activation(&self, d: usize) -> &[f64] {
        &self.pre[d - 1]
    }

    /// `h_d` for `d` in `0..=depth`; `h_0` is the input.
    pub fn activation(&self, d: usize) -> &[f64] {
        &self.act[d]
    }

    pub fn output(&self) -> &[f64] {
        self.act.last().unwrap()
    }
}

/// Back-propagated errors without parameter gradients.
///
/// `deltas[d]` is `∂E/∂a_d` for `d >= 1` and `∂E/∂h_0` for `d = 0`. Step `d`
/// maps `δ_d` to `δ_{d-1} = g_d · diag(f'(a_{d-1})) W_dᵀ δ_d` (no derivative
/// factor when `d - 1` is the input layer), and `z_d` is the squared-norm
/// amplification of the unit vector `δ_d/|δ_d|` through that step without the
/// gain, so `|δ_{d-1}|² = g_d² z_d |δ_d|²`. `z_d` is reported as 0 when `δ_d`
/// is already the zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaTrace {
    pub deltas: Vec<Vec<f64>>,
    pub z: Vec<f64>,
}

impl DeltaTrace {
    pub fn depth(&self) -> usize {
        self.z.len()
    }

    pub fn delta(&self, d: usize) -> &[f64] {
        &self.deltas[d]
    }

    /// `z_d` for `d` in `1..=depth`.
    pub fn z(&self, d: usize) -> f64 {
        self.z[d - 1]
    }

    /// `Z = |δ_0|² / |δ_D|²`, measured directly from the two end vectors.
    pub fn norm_ratio_sq(&self) -> f64 {
        norm_sq(&self.deltas[0]) / norm_sq(self.deltas.last().unwrap())
    }

    /// `ln(|δ_{D-k}|² / |δ_D|²)` for `k = 0..=D`.
    pub fn ln_norm_profile(&self) -> Vec<f64> {
        let top = norm_sq(self.deltas.last().unwrap()).ln();
        self.deltas.iter().rev().map(|d| norm_sq(d).ln() - top).collect()
    }

    /// True if some back-propagated error vanished entirely (a dead ReLU
    /// layer).
    pub fn has_dead_layer(&self) -> bool {
        self.deltas.iter().any(|d| d.iter().all(|&x| x == 0.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardTrace {
    pub deltas: DeltaTrace,
    pub gradients: Gradients,
}

impl BackwardTrace {
    pub fn weight_gradient(&self, d: usize) -> &Matrix {
        &self.gradients.weights[d - 1]
    }

    pub fn bias_gradient(&self, d: usize) -> &[f64] {
        &self.gradients.biases[d - 1]
    }
}

impl NetworkParams {
    pub fn forward(&self, input: &[f64]) -> Result<ForwardTrace> {
        if input.len() != self.input_width() {
            return Err(Error::DimensionMismatch {
                context: "forward input",
                expected: self.input_width(),
                found: input.len(),
            });
        }
        let depth = self.depth();
        let mut pre = Vec::with_capacity(depth);
        let mut act = Vec::with_capacity(depth + 1);
        act.push(input.to_vec());
        for d in 1..=depth {
            let g = self.gain(d);
            let mut a = self.weight(d).matvec_unchecked(&act[d - 1]);
            for (ai, bi) in a.iter_mut().zip(self.bias(d)) {
                *ai = g * *ai + bi;
            }
            let h = if d == depth {
                apply_output(self.output_activation(), &a)
            } else {
                let f = self.nonlinearity();
                a.iter().map(|&x| f.apply(x)).collect()
            };
            pre.push(a);
            act.push(h);
        }
        Ok(ForwardTrace { pre, act })
    }

    /// Back-propagates `delta_out = ∂E/∂a_D` and assembles `∂E/∂W_d`,
    /// `∂E/∂b_d`.
    pub fn backward(&self, trace: &ForwardTrace, delta_out: &[f64]) -> Result<BackwardTrace> {
        self.check_backward(trace, delta_out)?;
        let mut grads = Gradients::zeros_for(self);
        let deltas = self.backprop(trace, delta_out, Some(&mut grads));
        Ok(BackwardTrace { deltas, gradients: grads })
    }

    /// Same as [`backward`](Self::backward) but skips the gradient outer
    /// products.
    pub fn backward_deltas(&self, trace: &ForwardTrace, delta_out: &[f64]) -> Result<DeltaTrace> {
        self.check_backward(trace, delta_out)?;
        Ok(self.backprop(trace, delta_out, None))
    }

    /// Adds one example's gradients into `grads` and returns its loss and
    /// network output.
    pub(crate) fn accumulate_gradients(
        &self,
        input: &[f64],
        target: &[f64],
        objective: super::Objective,
        grads: &mut Gradients,
    ) -> Result<(f64, Vec<f64>)> {
        let trace = self.forward(input)?;
        let (loss, delta) =
            objective.loss_and_delta(self.output_activation(), trace.pre_activation(self.depth()), trace.output(), target)?;
        self.check_backward(&trace, &delta)?;
        self.backprop(&trace, &delta, Some(grads));
        let mut act = trace.act;
        Ok((loss, act.pop().unwrap()))
    }

    fn check_backward(&self, trace: &ForwardTrace, delta_out: &[f64]) -> Result<()> {
        if trace.depth() != self.depth() {
            return Err(Error::DimensionMismatch {
                context: "backward trace depth",
                expected: self.depth(),
                found: trace.depth(),
            });
        }
        if delta_out.len() != self.output_width() {
            return Err(Error::DimensionMismatch {
                context: "backward delta_out",
                expected: self.output_width(),
                found: delta_out.len(),
            });
        }
        Ok(())
    }

    fn backprop(
        &self,
        trace: &ForwardTrace,
        delta_out: &[f64],
        mut grads: Option<&mut Gradients>,
    ) -> DeltaTrace {
        let depth = self.depth();
        let f = self.nonlinearity();
        let mut deltas = vec![Vec::new(); depth + 1];
        let mut z = vec![0.0; depth];
        deltas[depth] = delta_out.to_vec();
        for d in (1..=depth).rev() {
            let g = self.gain(d);
            let delta = &deltas[d];
            if let Some(grads) = grads.as_deref_mut() {
                grads.weights[d - 1].add_outer(g, delta, trace.activation(d - 1));
                crate::numeric::axpy(1.0, delta, &mut grads.biases[d - 1]);
            }
            let mut v = self.weight(d).transpose_matvec_unchecked(delta);
            if d > 1 {
                for (vi, &a) in v.iter_mut().zip(trace.pre_activation(d - 1)) {
                    *vi *= f.derivative(a);
                }
            }
            let in_sq = norm_sq(delta);
            z[d - 1] = if in_sq > 0.0 { norm_sq(&v) / in_sq } else { 0.0 };
            v.iter_mut().for_each(|x| *x *= g);
            deltas[d - 1] = v;
        }
        DeltaTrace { deltas, z }
    }
}

fn apply_output(output: OutputActivation, a: &[f64]) -> Vec<f64> {
    match output.elementwise() {
        Some(f) => a.iter().map(|&x| f.apply(x)).collect(),
        None => {
            let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = a.iter().map(|&x| (x - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / total).collect()
        }
    }
}
