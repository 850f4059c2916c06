//! Fully connected feedforward network `a_d = g_d W_d h_{d-1} + b_d`,
//! `h_d = f(a_d)`, with exact back-propagation and per-layer instrumentation
//! of the squared-norm amplification `z_d` of the error signal.
//!
//! Layer `d` (1-based) owns `W_d` of shape `width(d) x width(d-1)`. Weights are
//! drawn from `N(0, 1/fan_in)`, biases start at zero, and every layer carries
//! its own gain (all equal to `g` unless the first or last is overridden).

mod gradcheck;
mod io;
mod probe;
mod prop;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{gaussian_matrix, Matrix, Rng};

pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport};
pub use io::{load_params, read_params, save_params, write_params};
pub use probe::{random_backprop_trial, ProbeTrial};
pub use prop::{BackwardTrace, DeltaTrace, ForwardTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Linear,
    Relu,
    Tanh,
}

impl Nonlinearity {
    pub const ALL: [Nonlinearity; 3] = [Nonlinearity::Linear, Nonlinearity::Relu, Nonlinearity::Tanh];

    #[inline]
    pub fn apply(self, a: f64) -> f64 {
        match self {
            Nonlinearity::Linear => a,
            Nonlinearity::Relu => a.max(0.0),
            Nonlinearity::Tanh => a.tanh(),
        }
    }

    /// `f'(a)`. The ReLU derivative at exactly zero is taken to be 0.
    #[inline]
    pub fn derivative(self, a: f64) -> f64 {
        match self {
            Nonlinearity::Linear => 1.0,
            Nonlinearity::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::Tanh => {
                let t = a.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Nonlinearity::Linear => "linear",
            Nonlinearity::Relu => "relu",
            Nonlinearity::Tanh => "tanh",
        }
    }
}

impl fmt::Display for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Nonlinearity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Nonlinearity::Linear),
            "relu" => Ok(Nonlinearity::Relu),
            "tanh" => Ok(Nonlinearity::Tanh),
            other => Err(Error::invalid(format!("unknown nonlinearity '{other}'"))),
        }
    }
}

/// Activation applied at the output layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Softmax,
    Linear,
    Relu,
    Tanh,
}

impl OutputActivation {
    pub fn elementwise(self) -> Option<Nonlinearity> {
        match self {
            OutputActivation::Softmax => None,
            OutputActivation::Linear => Some(Nonlinearity::Linear),
            OutputActivation::Relu => Some(Nonlinearity::Relu),
            OutputActivation::Tanh => Some(Nonlinearity::Tanh),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OutputActivation::Softmax => "softmax",
            other => other.elementwise().unwrap().name(),
        }
    }
}

impl From<Nonlinearity> for OutputActivation {
    fn from(nl: Nonlinearity) -> Self {
        match nl {
            Nonlinearity::Linear => OutputActivation::Linear,
            Nonlinearity::Relu => OutputActivation::Relu,
            Nonlinearity::Tanh => OutputActivation::Tanh,
        }
    }
}

impl FromStr for OutputActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "softmax" {
            Ok(OutputActivation::Softmax)
        } else {
            s.parse::<Nonlinearity>().map(OutputActivation::from)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Softmax outputs against one-hot targets, `-Σ t ln p`.
    CrossEntropy,
    /// `½ |h_D - t|²`.
    #[serde(alias = "mse")]
    MeanSquaredError,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::CrossEntropy => "cross-entropy",
            Objective::MeanSquaredError => "mean-squared-error",
        }
    }

    pub(crate) fn check_output(self, output: OutputActivation) -> Result<()> {
        match (self, output) {
            (Objective::CrossEntropy, OutputActivation::Softmax) => Ok(()),
            (Objective::MeanSquaredError, o) if o != OutputActivation::Softmax => Ok(()),
            (obj, o) => Err(Error::invalid(format!(
                "objective {} cannot be paired with a {} output layer",
                obj.name(),
                o.name()
            ))),
        }
    }

    /// Loss for one example and `δ_D = ∂E/∂a_D`, using the fused
    /// softmax/cross-entropy and activation/MSE derivatives.
    pub fn loss_and_delta(
        self,
        output: OutputActivation,
        pre_activation: &[f64],
        activation: &[f64],
        target: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        self.check_output(output)?;
        if target.len() != activation.len() {
            return Err(Error::DimensionMismatch {
                context: "objective target",
                expected: activation.len(),
                found: target.len(),
            });
        }
        match self {
            Objective::CrossEntropy => {
                let max = pre_activation.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let log_norm = max
                    + pre_activation
                        .iter()
                        .map(|&a| (a - max).exp())
                        .sum::<f64>()
                        .ln();
                let loss = target
                    .iter()
                    .zip(pre_activation)
                    .map(|(&t, &a)| if t != 0.0 { -t * (a - log_norm) } else { 0.0 })
                    .sum();
                let delta = activation.iter().zip(target).map(|(p, t)| p - t).collect();
                Ok((loss, delta))
            }
            Objective::MeanSquaredError => {
                let f = output.elementwise().expect("checked above");
                let mut loss = 0.0;
                let delta = activation
                    .iter()
                    .zip(target)
                    .zip(pre_activation)
                    .map(|((&h, &t), &a)| {
                        let r = h - t;
                        loss += 0.5 * r * r;
                        f.derivative(a) * r
                    })
                    .collect();
                Ok((loss, delta))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    widths: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    gains: Vec<f64>,
    g: f64,
    nonlinearity: Nonlinearity,
    output: OutputActivation,
    seed: u64,
}

/// Draws a fresh network. Layer `d`'s weights come from the child stream `d`
/// of `seed`, so a layer's draw does not depend on the other layers' shapes.
pub fn init_network(
    widths: &[usize],
    g: f64,
    nonlinearity: Nonlinearity,
    output: OutputActivation,
    seed: u64,
) -> Result<NetworkParams> {
    if widths.len() < 2 {
        return Err(Error::invalid("a network needs at least an input and an output width"));
    }
    if let Some(pos) = widths.iter().position(|&w| w == 0) {
        return Err(Error::invalid(format!("layer width {pos} is zero")));
    }
    if !(g > 0.0 && g.is_finite()) {
        return Err(Error::invalid(format!("gain must be positive, got {g}")));
    }
    let root = Rng::new(seed);
    let weights = widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| gaussian_matrix(w[1], w[0], 1.0 / w[0] as f64, &mut root.child(i as u64 + 1)))
        .collect::<Result<Vec<_>>>()?;
    let biases = widths[1..].iter().map(|&w| vec![0.0; w]).collect();
    Ok(NetworkParams {
        widths: widths.to_vec(),
        weights,
        biases,
        gains: vec![g; widths.len() - 1],
        g,
        nonlinearity,
        output,
        seed,
    })
}

impl NetworkParams {
    pub(crate) fn from_parts(
        widths: Vec<usize>,
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
        gains: Vec<f64>,
        g: f64,
        nonlinearity: Nonlinearity,
        output: OutputActivation,
        seed: u64,
    ) -> Result<Self> {
        let depth = widths.len().saturating_sub(1);
        if depth == 0 || weights.len() != depth || biases.len() != depth || gains.len() != depth {
            return Err(Error::invalid("inconsistent layer count in network parameters"));
        }
        for d in 0..depth {
            let (rows, cols) = (widths[d + 1], widths[d]);
            if weights[d].rows() != rows || weights[d].cols() != cols || biases[d].len() != rows {
                return Err(Error::invalid(format!(
                    "layer {} has the wrong shape (expected {rows}x{cols})",
                    d + 1
                )));
            }
        }
        Ok(NetworkParams { widths, weights, biases, gains, g, nonlinearity, output, seed })
    }

    /// Overrides the gain of the first layer (`g_1`).
    pub fn with_input_gain(mut self, g1: f64) -> Self {
        self.gains[0] = g1;
        self
    }

    /// Overrides the gain of the output layer (`g_D`).
    pub fn with_output_gain(mut self, g_out: f64) -> Self {
        let last = self.gains.len() - 1;
        self.gains[last] = g_out;
        self
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// `W_d` for `d` in `1..=depth`.
    pub fn weight(&self, d: usize) -> &Matrix {
        &self.weights[d - 1]
    }

    pub fn bias(&self, d: usize) -> &[f64] {
        &self.biases[d - 1]
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    pub(crate) fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    pub fn gain(&self, d: usize) -> f64 {
        self.gains[d - 1]
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    pub fn g(&self) -> f64 {
        self.g
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        self.nonlinearity
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn parameter_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    /// Loss and full backward pass for a single example.
    pub fn loss_and_gradients(
        &self,
        input: &[f64],
        target: &[f64],
        objective: Objective,
    ) -> Result<(f64, BackwardTrace)> {
        let trace = self.forward(input)?;
        let (loss, delta) = objective.loss_and_delta(
            self.output,
            trace.pre_activation(self.depth()),
            trace.output(),
            target,
        )?;
        let back = self.backward(&trace, &delta)?;
        Ok((loss, back))
    }
}

/// Parameter-shaped gradient (or update) container.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_for(params: &NetworkParams) -> Self {
        Gradients {
            weights: params
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add_scaled(&mut self, scale: f64, other: &Gradients) {
        for (w, o) in self.weights.iter_mut().zip(&other.weights) {
            crate::numeric::axpy(scale, o.as_slice(), w.as_mut_slice());
        }
        for (b, o) in self.biases.iter_mut().zip(&other.biases) {
            crate::numeric::axpy(scale, o, b);
        }
    }

    pub fn clear(&mut self) {
        self.weights
            .iter_mut()
            .flat_map(|w| w.as_mut_slice().iter_mut())
            .chain(self.biases.iter_mut().flatten())
            .for_each(|x| *x = 0.0);
    }

    pub fn scale(&mut self, s: f64) {
        self.weights
            .iter_mut()
            .flat_map(|w| w.as_mut_slice().iter_mut())
            .chain(self.biases.iter_mut().flatten())
            .for_each(|x| *x *= s);
    }

    pub fn global_norm(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|w| w.as_slice().iter())
            .chain(self.biases.iter().flatten())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}
