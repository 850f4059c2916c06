//! Minibatch SGD with per-layer learning rates that vary exponentially with
//! depth, plus the layer sizing used to compare depths at a fixed parameter
//! budget.
//!
//! # Parameter counting
//!
//! A network with widths `w_0..w_D` has `Σ_d (w_d · w_{d-1} + w_d)`
//! parameters: every weight matrix and every bias vector, including the
//! output layer's. For the constant-width family the `D - 1` hidden layers
//! share one width `N`; for the autoencoder family the hidden widths taper
//! linearly by a constant integer step to a 30-unit code layer in the middle
//! and back out.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{Gradients, NetworkParams, Objective};
use crate::numeric::{axpy, Rng};

/// Per-layer rates `λ_1..λ_D` drawn from a depth profile
/// `γ_j = α exp(-(D_max - j + 1)/τ)` that runs from `λ_in` at `j = 1` to
/// `λ_out` at `j = D_max`. A network of depth `D` takes the top `D` values:
/// `λ_k = γ_{D_max - D + k}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub d_max: usize,
    pub lambda_in: f64,
    pub lambda_out: f64,
    /// `None` when the profile is flat (`λ_in = λ_out`, or `D_max = 1`).
    pub tau: Option<f64>,
    pub alpha: Option<f64>,
    rates: Vec<f64>,
}

impl LrSchedule {
    /// The same rate in every layer.
    pub fn constant(rate: f64, depth: usize) -> Result<Self> {
        build_schedule(depth, depth, rate, rate)
    }

    pub fn depth(&self) -> usize {
        self.rates.len()
    }

    /// Rate of layer `d`, 1-based.
    pub fn rate(&self, d: usize) -> f64 {
        self.rates[d - 1]
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }
}

pub fn build_schedule(d: usize, d_max: usize, lambda_in: f64, lambda_out: f64) -> Result<LrSchedule> {
    if d == 0 || d > d_max {
        return Err(Error::invalid(format!("schedule depth {d} must lie in 1..={d_max}")));
    }
    for r in [lambda_in, lambda_out] {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::invalid(format!("learning rates must be positive, got {r}")));
        }
    }
    let flat = lambda_in == lambda_out || d_max == 1;
    let (ln_in, ln_out) = (lambda_in.ln(), lambda_out.ln());
    let (tau, alpha) = if flat {
        (None, None)
    } else {
        let tau = (d_max - 1) as f64 / (ln_out - ln_in);
        (Some(tau), Some((ln_in + d_max as f64 / tau).exp()))
    };
    // Interpolating the logs keeps both endpoints exact.
    let gamma = |j: usize| -> f64 {
        if flat {
            lambda_out
        } else if j == 1 {
            lambda_in
        } else if j == d_max {
            lambda_out
        } else {
            let t = (j - 1) as f64 / (d_max - 1) as f64;
            (ln_in * (1.0 - t) + ln_out * t).exp()
        }
    };
    let rates = (1..=d).map(|k| gamma(d_max - d + k)).collect();
    Ok(LrSchedule { d_max, lambda_in, lambda_out, tau, alpha, rates })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub minibatch: usize,
    pub epochs: usize,
    /// Every rate is multiplied by this at the end of each epoch.
    pub epoch_decay: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_threshold: Option<f64>,
    pub objective: Objective,
    pub seed: u64,
    /// Bias rates are the layer rate times this.
    pub bias_rate_multiplier: f64,
    /// Examples (taken from the front of the set) used for the gradient
    /// ratio recorded each epoch.
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            minibatch: 100,
            epochs: 100,
            epoch_decay: 0.995,
            clip_threshold: Some(100.0),
            objective: Objective::CrossEntropy,
            seed: 0,
            bias_rate_multiplier: 1.0,
            probe_size: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.minibatch == 0 {
            return Err(Error::invalid("minibatch must be at least 1"));
        }
        if !(self.epoch_decay > 0.0 && self.epoch_decay <= 1.0) {
            return Err(Error::invalid(format!("epoch decay must lie in (0, 1], got {}", self.epoch_decay)));
        }
        if let Some(t) = self.clip_threshold {
            if t.is_nan() || t <= 0.0 {
                return Err(Error::invalid(format!("clip threshold must be positive, got {t}")));
            }
        }
        if !(self.bias_rate_multiplier >= 0.0 && self.bias_rate_multiplier.is_finite()) {
            return Err(Error::invalid("bias rate multiplier must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizingFamily {
    Constant,
    Autoencoder,
}

pub const CODE_WIDTH: usize = 30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizingPlan {
    pub p_lim: u64,
    pub depth: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub family: SizingFamily,
    /// All `depth + 1` widths, input first.
    pub widths: Vec<usize>,
    pub parameter_count: u64,
}

impl SizingPlan {
    /// Hidden widths followed by the output width.
    pub fn layer_sizes(&self) -> &[usize] {
        &self.widths[1..]
    }
}

pub fn parameter_count(widths: &[usize]) -> u64 {
    widths.windows(2).map(|w| (w[1] as u64) * (w[0] as u64 + 1)).sum()
}

/// The smallest network of the family whose parameter count reaches
/// `p_lim`. Fails if even the narrowest member already exceeds the budget.
pub fn size_layers(
    p_lim: u64,
    depth: usize,
    input_dim: usize,
    output_dim: usize,
    family: SizingFamily,
) -> Result<SizingPlan> {
    if input_dim == 0 || output_dim == 0 {
        return Err(Error::invalid("input and output dimensions must be positive"));
    }
    let widths_for: Box<dyn Fn(usize) -> Vec<usize>> = match family {
        SizingFamily::Constant => {
            if depth < 2 {
                return Err(Error::invalid("a constant-width network needs depth >= 2"));
            }
            Box::new(move |n| {
                let mut w = vec![n; depth + 1];
                w[0] = input_dim;
                w[depth] = output_dim;
                w
            })
        }
        SizingFamily::Autoencoder => {
            if depth < 4 || !depth.is_multiple_of(2) {
                return Err(Error::invalid("an autoencoder needs an even depth >= 4"));
            }
            let half = depth / 2;
            Box::new(move |step| {
                let mut w = vec![input_dim];
                w.extend((1..half).rev().map(|j| CODE_WIDTH + j * step));
                w.push(CODE_WIDTH);
                w.extend((1..half).map(|j| CODE_WIDTH + j * step));
                w.push(output_dim);
                w
            })
        }
    };
    let count = |k: usize| parameter_count(&widths_for(k));
    if count(1) > p_lim {
        return Err(Error::invalid(format!(
            "budget {p_lim} is below the smallest {family:?} network of depth {depth} ({} parameters)",
            count(1)
        )));
    }
    let mut hi = 1usize;
    while count(hi) < p_lim {
        hi = hi.checked_mul(2).ok_or_else(|| Error::invalid("parameter budget too large"))?;
    }
    let mut lo = hi / 2;
    // count(lo) < p_lim <= count(hi), or hi == 1.
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if count(mid) >= p_lim {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let widths = widths_for(hi);
    Ok(SizingPlan {
        p_lim,
        depth,
        input_dim,
        output_dim,
        family,
        parameter_count: parameter_count(&widths),
        widths,
    })
}

/// Rescales `grads` to norm `threshold` if its global L2 norm exceeds it.
/// Returns whether it did.
pub fn clip_gradient(grads: &mut Gradients, threshold: f64) -> Result<bool> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::invalid(format!("clip threshold must be positive, got {threshold}")));
    }
    let norm = grads.global_norm();
    if norm > threshold {
        grads.scale(threshold / norm);
        Ok(true)
    } else {
        Ok(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-example objective over the whole set after the epoch.
    pub objective: f64,
    /// Misclassified examples; `None` for regression targets.
    pub training_errors: Option<usize>,
    /// Mean `|δ_0| / |δ_D|` over the probe examples.
    pub grad_ratio: f64,
    /// Mean `ln(|δ_0|² / |δ_D|²)` over the same examples.
    pub mean_ln_z: f64,
    pub clipped_updates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Epoch 0 is the untrained network.
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn initial(&self) -> &EpochRecord {
        &self.records[0]
    }

    pub fn last(&self) -> &EpochRecord {
        self.records.last().unwrap()
    }

    pub fn min_training_errors(&self) -> Option<usize> {
        self.records.iter().filter_map(|r| r.training_errors).min()
    }

    /// First epoch whose error count is at most `errors`.
    pub fn epochs_to_errors(&self, errors: usize) -> Option<usize> {
        self.records.iter().find(|r| r.training_errors.is_some_and(|e| e <= errors)).map(|r| r.epoch)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "objective", "training_error_count", "grad_ratio", "mean_ln_z", "clipped_updates"])
            .map_err(Error::csv)?;
        for r in &self.records {
            out.write_record([
                r.epoch.to_string(),
                r.objective.to_string(),
                r.training_errors.map(|e| e.to_string()).unwrap_or_default(),
                r.grad_ratio.to_string(),
                r.mean_ln_z.to_string(),
                r.clipped_updates.to_string(),
            ])
            .map_err(Error::csv)?;
        }
        out.flush().map_err(|e| Error::invalid(format!("writing history: {e}")))
    }
}

fn check_shapes(params: &NetworkParams, data: &Dataset, schedule: &LrSchedule) -> Result<()> {
    let checks = [
        ("schedule depth", params.depth(), schedule.depth()),
        ("dataset inputs", params.input_width(), data.input_dim()),
        ("dataset targets", params.output_width(), data.target_dim()),
    ];
    for (context, expected, found) in checks {
        if expected != found {
            return Err(Error::DimensionMismatch { context, expected, found });
        }
    }
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    Ok(())
}

/// Runs `cfg.epochs` shuffled passes of minibatch SGD over `data`, updating
/// `params` in place. Inputs are used as given; standardize them first.
pub fn train(params: &mut NetworkParams, data: &Dataset, schedule: &LrSchedule, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    check_shapes(params, data, schedule)?;
    let mut records = vec![evaluate(params, data, cfg, 0, 0)?];
    let mut rates = schedule.rates().to_vec();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle = Rng::new(cfg.seed).child_named("shuffle");
    let mut grads = Gradients::zeros_for(params);

    for epoch in 1..=cfg.epochs {
        shuffle.shuffle(&mut order);
        let mut clipped = 0;
        for batch in order.chunks(cfg.minibatch) {
            grads.clear();
            for &i in batch {
                let (loss, _) = params.accumulate_gradients(data.input(i), data.target(i), cfg.objective, &mut grads)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, value: loss });
                }
            }
            grads.scale(1.0 / batch.len() as f64);
            if let Some(t) = cfg.clip_threshold {
                if clip_gradient(&mut grads, t)? {
                    clipped += 1;
                }
            }
            apply_update(params, &grads, &rates, cfg.bias_rate_multiplier);
        }
        rates.iter_mut().for_each(|r| *r *= cfg.epoch_decay);
        records.push(evaluate(params, data, cfg, epoch, clipped)?);
    }
    Ok(TrainHistory { records })
}

fn apply_update(params: &mut NetworkParams, grads: &Gradients, rates: &[f64], bias_multiplier: f64) {
    for ((w, g), &r) in params.weights_mut().iter_mut().zip(&grads.weights).zip(rates) {
        axpy(-r, g.as_slice(), w.as_mut_slice());
    }
    for ((b, g), &r) in params.biases_mut().iter_mut().zip(&grads.biases).zip(rates) {
        axpy(-r * bias_multiplier, g, b);
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

fn evaluate(params: &NetworkParams, data: &Dataset, cfg: &TrainConfig, epoch: usize, clipped: usize) -> Result<EpochRecord> {
    let depth = params.depth();
    let mut total = 0.0;
    let mut errors = 0;
    let mut ratio_sum = 0.0;
    let mut ln_z_sum = 0.0;
    let mut ratio_count = 0usize;
    for i in 0..data.len() {
        let trace = params.forward(data.input(i))?;
        let (loss, delta) =
            cfg.objective.loss_and_delta(params.output_activation(), trace.pre_activation(depth), trace.output(), data.target(i))?;
        total += loss;
        if let Some(labels) = data.labels() {
            if argmax(trace.output()) != labels[i] {
                errors += 1;
            }
        }
        if i < cfg.probe_size {
            let deltas = params.backward_deltas(&trace, &delta)?;
            let r = deltas.norm_ratio_sq();
            if r.is_finite() && r > 0.0 {
                ratio_sum += r.sqrt();
                ln_z_sum += r.ln();
                ratio_count += 1;
            }
        }
    }
    let objective = total / data.len() as f64;
    if !objective.is_finite() {
        return Err(Error::Diverged { epoch, value: objective });
    }
    Ok(EpochRecord {
        epoch,
        objective,
        training_errors: data.labels().map(|_| errors),
        grad_ratio: if ratio_count > 0 { ratio_sum / ratio_count as f64 } else { f64::NAN },
        mean_ln_z: if ratio_count > 0 { ln_z_sum / ratio_count as f64 } else { f64::NAN },
        clipped_updates: clipped,
    })
}
