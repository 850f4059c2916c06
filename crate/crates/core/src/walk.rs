//! Ensembles of the random walk `ln Z_k = Σ (ln g² + ln z)` taken by the
//! back-propagated error, either stepped directly from the closed-form step
//! distribution (`Abstract`) or measured on freshly drawn networks
//! (`Network`).

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{random_backprop_trial, Nonlinearity};
use crate::numeric::{derive_seed, merge_pairwise, Matrix, Moments, Rng};
use crate::theory::{log_norm_ratio, sample_ln_z, RatioEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WalkMode {
    /// Steps drawn from the closed-form `ln z` distribution, the last one
    /// (into the input layer) from the linear law. Linear and ReLU only.
    Abstract,
    /// Each trajectory is a new random network with a random input and a
    /// random output error.
    Network,
}

/// Above this many stored entries only per-layer moments are kept.
pub const DEFAULT_TRACE_BUDGET: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkConfig {
    pub n: usize,
    pub d: usize,
    pub g: f64,
    pub nonlinearity: Nonlinearity,
    pub samples: usize,
    pub seed: u64,
    pub mode: WalkMode,
    #[serde(default = "default_budget")]
    pub trace_budget: usize,
}

fn default_budget() -> usize {
    DEFAULT_TRACE_BUDGET
}

impl WalkConfig {
    pub fn new(n: usize, d: usize, g: f64, nonlinearity: Nonlinearity, samples: usize, seed: u64, mode: WalkMode) -> Self {
        WalkConfig { n, d, g, nonlinearity, samples, seed, mode, trace_budget: DEFAULT_TRACE_BUDGET }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.samples == 0 {
            return Err(Error::invalid("walk needs n, d and samples all >= 1"));
        }
        if !(self.g > 0.0 && self.g.is_finite()) {
            return Err(Error::invalid(format!("gain must be positive, got {}", self.g)));
        }
        if self.mode == WalkMode::Abstract && self.nonlinearity == Nonlinearity::Tanh {
            return Err(Error::invalid("abstract walks need a closed-form step; use network mode for tanh"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WalkTrace {
    pub samples: usize,
    pub depth: usize,
    /// `samples x (depth + 1)` values of `ln Z`, column 0 all zero. `None`
    /// when the ensemble exceeded the storage budget.
    pub ln_z: Option<Matrix>,
    pub mean: Vec<f64>,
    /// Unbiased per-layer variance; NaN for a single trajectory.
    pub variance: Vec<f64>,
    /// Network draws thrown away because a ReLU layer died.
    pub discarded: usize,
}

impl WalkTrace {
    pub fn final_mean(&self) -> f64 {
        *self.mean.last().unwrap()
    }

    pub fn final_variance(&self) -> f64 {
        *self.variance.last().unwrap()
    }

    /// Standard error of the final-layer mean.
    pub fn final_std_error(&self) -> f64 {
        (self.final_variance() / self.samples as f64).sqrt()
    }
}

const BLOCK: usize = 64;
const MAX_ATTEMPTS: u64 = 10_000;

pub fn simulate_walk(cfg: &WalkConfig) -> Result<WalkTrace> {
    cfg.validate()?;
    let cols = cfg.d + 1;
    let store = cfg.samples.saturating_mul(cols) <= cfg.trace_budget;
    let blocks = cfg.samples.div_ceil(BLOCK);

    struct Block {
        rows: Vec<f64>,
        moments: Vec<Moments>,
        discarded: usize,
    }

    let results: Vec<Block> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let start = b * BLOCK;
            let end = (start + BLOCK).min(cfg.samples);
            let mut block = Block { rows: Vec::new(), moments: vec![Moments::new(); cols], discarded: 0 };
            for i in start..end {
                let (path, discarded) = trajectory(cfg, i)?;
                block.discarded += discarded;
                for (m, &x) in block.moments.iter_mut().zip(&path) {
                    m.push(x);
                }
                if store {
                    block.rows.extend(path);
                }
            }
            Ok(block)
        })
        .collect::<Result<_>>()?;

    let discarded = results.iter().map(|b| b.discarded).sum();
    let per_layer: Vec<Moments> = (0..cols)
        .map(|k| merge_pairwise(&results.iter().map(|b| b.moments[k]).collect::<Vec<_>>()))
        .collect();
    let ln_z = if store {
        let data = results.into_iter().flat_map(|b| b.rows).collect();
        Some(Matrix::from_vec(cfg.samples, cols, data)?)
    } else {
        None
    };
    Ok(WalkTrace {
        samples: cfg.samples,
        depth: cfg.d,
        ln_z,
        mean: per_layer.iter().map(Moments::mean).collect(),
        variance: per_layer.iter().map(Moments::variance).collect(),
        discarded,
    })
}

/// Trajectory `i` of the ensemble plus the number of discarded draws.
fn trajectory(cfg: &WalkConfig, i: usize) -> Result<(Vec<f64>, usize)> {
    match cfg.mode {
        WalkMode::Abstract => {
            let mut rng = Rng::new(cfg.seed).child(i as u64);
            let step_gain = (cfg.g * cfg.g).ln();
            let mut path = Vec::with_capacity(cfg.d + 1);
            let mut acc = 0.0;
            path.push(acc);
            for k in 0..cfg.d {
                // The step into the input layer carries no derivative.
                let nl = if k + 1 == cfg.d { Nonlinearity::Linear } else { cfg.nonlinearity };
                acc += step_gain + sample_ln_z(nl, cfg.n, cfg.g, &mut rng)?;
                path.push(acc);
            }
            Ok((path, 0))
        }
        WalkMode::Network => {
            // Same seeding as theory::log_norm_ratio, so the two agree draw
            // for draw.
            let widths = vec![cfg.n; cfg.d + 1];
            let trial_seed = derive_seed(cfg.seed, i as u64);
            for attempt in 0..MAX_ATTEMPTS {
                let s = if attempt == 0 { trial_seed } else { derive_seed(trial_seed, attempt) };
                let trial = random_backprop_trial(&widths, cfg.nonlinearity, cfg.g, s)?;
                if !trial.is_dead() {
                    return Ok((trial.ln_norm_profile(), attempt as usize));
                }
            }
            Err(Error::invalid(format!(
                "no live {} network of width {} in {MAX_ATTEMPTS} draws",
                cfg.nonlinearity, cfg.n
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least-squares line through `(layer, variance)` for layers `0..=depth`.
pub fn variance_fit(trace: &WalkTrace) -> Result<LinearFit> {
    if trace.variance.len() < 2 {
        return Err(Error::invalid("a variance slope needs at least two layers"));
    }
    if trace.variance.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("variance is undefined for a single trajectory"));
    }
    let xs: Vec<f64> = (0..trace.variance.len()).map(|k| k as f64).collect();
    Ok(least_squares(&xs, &trace.variance))
}

pub fn variance_slope(trace: &WalkTrace) -> Result<f64> {
    variance_fit(trace).map(|f| f.slope)
}

fn least_squares(xs: &[f64], ys: &[f64]) -> LinearFit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { slope * sxy / syy };
    LinearFit { slope, intercept, r_squared }
}

/// Mean and standard error of `ln(|δ_0| / |δ_D|)` (half of `ln Z`) for each
/// gain, measured on random networks with common random numbers across the
/// grid.
pub fn mean_log_ratio_vs_g(
    n: usize,
    d: usize,
    g_grid: &[f64],
    nonlinearity: Nonlinearity,
    samples: usize,
    seed: u64,
) -> Result<Vec<RatioEstimate>> {
    if g_grid.is_empty() || g_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("gain grid must be non-empty and strictly increasing"));
    }
    g_grid
        .iter()
        .map(|&g| log_norm_ratio(nonlinearity, n, d, g, samples, seed))
        .collect()
}

/// The interval of gains over which the (piecewise-linear) curve stays
/// inside `(-threshold, threshold)`, assuming the curve is increasing.
pub fn serviceable_band(curve: &[RatioEstimate], threshold: f64) -> Option<(f64, f64)> {
    let crossing = |level: f64| -> Option<f64> {
        curve.windows(2).find_map(|w| {
            let (a, b) = (w[0], w[1]);
            (a.mean <= level && b.mean > level).then(|| a.g + (b.g - a.g) * (level - a.mean) / (b.mean - a.mean))
        })
    };
    Some((crossing(-threshold)?, crossing(threshold)?))
}

/// Writes `layer,mean_lnZ,var_lnZ` plus one column per trajectory when at
/// most 100 were stored.
pub fn write_trace_csv<W: Write>(trace: &WalkTrace, w: W) -> Result<()> {
    let per_sample = trace.ln_z.as_ref().filter(|_| trace.samples <= 100);
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["layer".to_string(), "mean_lnZ".into(), "var_lnZ".into()];
    if per_sample.is_some() {
        header.extend((0..trace.samples).map(|s| format!("sample_{s}")));
    }
    out.write_record(&header).map_err(Error::csv)?;
    for k in 0..=trace.depth {
        let mut rec = vec![k.to_string(), trace.mean[k].to_string(), trace.variance[k].to_string()];
        if let Some(m) = per_sample {
            rec.extend((0..trace.samples).map(|s| m.get(s, k).to_string()));
        }
        out.write_record(&rec).map_err(Error::csv)?;
    }
    out.flush().map_err(|e| Error::invalid(format!("writing trace: {e}")))?;
    Ok(())
}
