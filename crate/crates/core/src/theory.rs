//! Statistics of the per-layer log step `ln z` and the gain `g` that makes the
//! walk of `ln Z` unbiased, `g = exp(-⟨ln z⟩ / 2)`.
//!
//! Linear layers: `z = χ²_N / N`. To leading order `⟨ln z⟩ = -1/N`, giving
//! `g = exp(1/(2N))`; [`ln_z_var_linear`] returns the leading-order `1/(2N)`.
//! Note that `1/(2N)` is the per-layer variance of the log *norm* `½ ln z`;
//! the variance of `ln z` itself is close to `2/N`. Both are measurable with
//! [`monte_carlo_stats`].
//!
//! ReLU layers: `z = χ²_M / N` with `M ~ Binomial(N, ½)` conditioned on
//! `M > 0`, summarised by fitted expressions.
//!
//! tanh layers have no closed form. A `ln z` draw is made by running one
//! back-propagation step of an explicit network whose derivative factors come
//! from a forward-propagated activation, so unlike the other two it depends on
//! `g`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{random_backprop_trial, Nonlinearity};
use crate::numeric::{derive_seed, sample_binomial, sample_chi_square, Moments, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum StatsSource {
    ClosedForm,
    MonteCarlo {
        samples: u64,
        mean_std_error: f64,
        variance_std_error: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LnZStats {
    pub mean: f64,
    pub variance: f64,
    pub n: usize,
    pub nonlinearity: Nonlinearity,
    pub source: StatsSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GainMethod {
    ClosedForm,
    EmpiricalSearch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainRecommendation {
    pub g: f64,
    pub n: usize,
    pub nonlinearity: Nonlinearity,
    pub method: GainMethod,
}

fn check_width(n: usize) -> Result<f64> {
    if n == 0 {
        Err(Error::invalid("layer width must be at least 1"))
    } else {
        Ok(n as f64)
    }
}

pub fn ln_z_mean_linear(n: usize) -> Result<f64> {
    Ok(-1.0 / check_width(n)?)
}

pub fn ln_z_var_linear(n: usize) -> Result<f64> {
    Ok(1.0 / (2.0 * check_width(n)?))
}

pub fn ln_z_mean_relu(n: usize) -> Result<f64> {
    let n = check_width(n)?.max(6.0);
    Ok(-std::f64::consts::LN_2 - 2.4 / (n - 2.4))
}

pub fn ln_z_var_relu(n: usize) -> Result<f64> {
    let n = check_width(n)?.max(6.0);
    Ok(5.0 / (n - 4.0))
}

/// The gain that cancels a mean log step.
pub fn gain_for_mean_ln_z(mean_ln_z: f64) -> f64 {
    (-0.5 * mean_ln_z).exp()
}

pub fn g_linear(n: usize) -> Result<GainRecommendation> {
    let n_f = check_width(n)?;
    Ok(GainRecommendation {
        g: (1.0 / (2.0 * n_f)).exp(),
        n,
        nonlinearity: Nonlinearity::Linear,
        method: GainMethod::ClosedForm,
    })
}

pub fn g_relu(n: usize) -> Result<GainRecommendation> {
    let n_f = check_width(n)?.max(6.0);
    Ok(GainRecommendation {
        g: std::f64::consts::SQRT_2 * (1.2 / (n_f - 2.4)).exp(),
        n,
        nonlinearity: Nonlinearity::Relu,
        method: GainMethod::ClosedForm,
    })
}

/// Closed-form gain for linear and ReLU layers; tanh has none.
pub fn closed_form_gain(nonlinearity: Nonlinearity, n: usize) -> Result<GainRecommendation> {
    match nonlinearity {
        Nonlinearity::Linear => g_linear(n),
        Nonlinearity::Relu => g_relu(n),
        Nonlinearity::Tanh => Err(Error::invalid(
            "tanh has no closed-form gain; use estimate_optimal_g or pick g in [1.1, 1.3]",
        )),
    }
}

pub fn closed_form_stats(nonlinearity: Nonlinearity, n: usize) -> Result<LnZStats> {
    let (mean, variance) = match nonlinearity {
        Nonlinearity::Linear => (ln_z_mean_linear(n)?, ln_z_var_linear(n)?),
        Nonlinearity::Relu => (ln_z_mean_relu(n)?, ln_z_var_relu(n)?),
        Nonlinearity::Tanh => return Err(Error::invalid("tanh has no closed-form ln z statistics")),
    };
    Ok(LnZStats { mean, variance, n, nonlinearity, source: StatsSource::ClosedForm })
}

/// One draw of `ln z`. `g` only matters for tanh.
pub fn sample_ln_z(nonlinearity: Nonlinearity, n: usize, g: f64, rng: &mut Rng) -> Result<f64> {
    let n_f = check_width(n)?;
    match nonlinearity {
        Nonlinearity::Linear => Ok((sample_chi_square(n as u64, rng)? / n_f).ln()),
        Nonlinearity::Relu => {
            let m = loop {
                let m = sample_binomial(n as u64, 0.5, rng)?;
                if m > 0 {
                    break m;
                }
            };
            Ok((sample_chi_square(m, rng)? / n_f).ln())
        }
        Nonlinearity::Tanh => {
            use rand::RngCore;
            // Layer 2's step sees derivative factors from a_1 = g W_1 h_0.
            let trial = random_backprop_trial(&[n, n, n], Nonlinearity::Tanh, g, rng.next_u64())?;
            Ok(trial.deltas.z(2).ln())
        }
    }
}

const MC_BLOCK: usize = 4096;

/// Monte-Carlo mean and variance of `ln z` from `samples` draws. Draws are
/// generated in fixed blocks on child streams and merged in block order, so
/// the result does not depend on thread scheduling.
pub fn monte_carlo_stats(nonlinearity: Nonlinearity, n: usize, g: f64, samples: usize, seed: u64) -> Result<LnZStats> {
    if samples < 2 {
        return Err(Error::invalid("Monte-Carlo estimate needs at least two samples"));
    }
    let root = Rng::new(seed);
    let blocks = samples.div_ceil(MC_BLOCK);
    let draws: Vec<Vec<f64>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = root.child(b as u64);
            let len = MC_BLOCK.min(samples - b * MC_BLOCK);
            (0..len).map(|_| sample_ln_z(nonlinearity, n, g, &mut rng)).collect()
        })
        .collect::<Result<_>>()?;
    let xs: Vec<f64> = draws.into_iter().flatten().collect();
    let m = Moments::from_slice(&xs);
    let mean = m.mean();
    let var = m.variance();
    // SE of s² from the sample fourth central moment.
    let count = xs.len() as f64;
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / count;
    let var_se = ((m4 - var * var * (count - 3.0) / (count - 1.0)) / count).max(0.0).sqrt();
    Ok(LnZStats {
        mean,
        variance: var,
        n,
        nonlinearity,
        source: StatsSource::MonteCarlo {
            samples: samples as u64,
            mean_std_error: m.std_error(),
            variance_std_error: var_se,
        },
    })
}

/// Mean of `ln(|δ_0| / |δ_D|)` over random networks at one gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioEstimate {
    pub g: f64,
    pub mean: f64,
    pub std_error: f64,
    pub trials: usize,
    /// Draws thrown away because a ReLU layer died.
    pub discarded: usize,
}

const MAX_ATTEMPTS: u64 = 10_000;

/// Runs `trials` random networks of `depth` square layers of width `n` at gain
/// `g`. Trial `t` always uses the same seeds for a given `seed`, whatever `g`
/// is, so curves over `g` use common random numbers. Draws with a dead ReLU
/// layer are discarded and redrawn.
pub fn log_norm_ratio(nonlinearity: Nonlinearity, n: usize, depth: usize, g: f64, trials: usize, seed: u64) -> Result<RatioEstimate> {
    check_width(n)?;
    if trials == 0 || depth == 0 {
        return Err(Error::invalid("need at least one trial and one layer"));
    }
    let widths = vec![n; depth + 1];
    let per_trial: Vec<(f64, usize)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let trial_seed = derive_seed(seed, t as u64);
            for attempt in 0..MAX_ATTEMPTS {
                let s = if attempt == 0 { trial_seed } else { derive_seed(trial_seed, attempt) };
                let trial = random_backprop_trial(&widths, nonlinearity, g, s)?;
                if !trial.is_dead() {
                    return Ok((trial.ln_norm_ratio(), attempt as usize));
                }
            }
            Err(Error::invalid(format!(
                "no live {nonlinearity} network of width {n} and depth {depth} in {MAX_ATTEMPTS} draws"
            )))
        })
        .collect::<Result<_>>()?;
    let m = Moments::from_slice(&per_trial.iter().map(|p| p.0).collect::<Vec<_>>());
    Ok(RatioEstimate {
        g,
        mean: m.mean(),
        std_error: if trials > 1 { m.std_error() } else { f64::NAN },
        trials,
        discarded: per_trial.iter().map(|p| p.1).sum(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainSearch {
    /// Ascending grid scanned for the first sign change of the mean log ratio.
    pub grid: Vec<f64>,
    /// Bisection stops once the bracket is narrower than this.
    pub tolerance: f64,
}

impl Default for GainSearch {
    fn default() -> Self {
        GainSearch {
            grid: (0..=20).map(|i| 1.0 + 0.05 * i as f64).collect(),
            tolerance: 5e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainEstimate {
    pub recommendation: GainRecommendation,
    /// Every evaluation made, in order.
    pub evaluations: Vec<RatioEstimate>,
    pub discarded: usize,
}

/// Searches for the gain at which the mean of `ln(|δ_0| / |δ_D|)` crosses
/// zero. The grid is scanned upwards until the mean turns positive, then the
/// bracket is bisected; the returned gain interpolates linearly inside the
/// final bracket. Assumes the mean is increasing in `g`.
pub fn estimate_optimal_g(
    nonlinearity: Nonlinearity,
    n: usize,
    depth: usize,
    trials: usize,
    seed: u64,
    search: &GainSearch,
) -> Result<GainEstimate> {
    if search.grid.is_empty() || search.grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("gain grid must be non-empty and strictly increasing"));
    }
    let mut evaluations = Vec::new();
    let mut eval = |g: f64| -> Result<RatioEstimate> {
        let r = log_norm_ratio(nonlinearity, n, depth, g, trials, seed)?;
        evaluations.push(r);
        Ok(r)
    };

    let mut below: Option<RatioEstimate> = None;
    let mut above: Option<RatioEstimate> = None;
    for &g in &search.grid {
        let r = eval(g)?;
        if r.mean > 0.0 {
            above = Some(r);
            break;
        }
        below = Some(r);
    }
    let (mut lo, mut hi) = match (below, above) {
        (Some(lo), Some(hi)) => (lo, hi),
        (None, Some(r)) => {
            return Err(Error::NotBracketed(format!(
                "mean log ratio is already {:.4} > 0 at the lowest gain {}",
                r.mean, r.g
            )))
        }
        (_, None) => {
            return Err(Error::NotBracketed(format!(
                "mean log ratio stays <= 0 up to g = {}",
                search.grid.last().unwrap()
            )))
        }
    };
    while hi.g - lo.g > search.tolerance {
        let mid = eval(0.5 * (lo.g + hi.g))?;
        if mid.mean > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let g = if hi.mean > lo.mean {
        lo.g + (hi.g - lo.g) * (-lo.mean) / (hi.mean - lo.mean)
    } else {
        0.5 * (lo.g + hi.g)
    };
    let discarded = evaluations.iter().map(|e| e.discarded).sum();
    Ok(GainEstimate {
        recommendation: GainRecommendation { g, n, nonlinearity, method: GainMethod::EmpiricalSearch },
        evaluations,
        discarded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn closed_form_values() {
        assert_eq!(ln_z_mean_linear(100).unwrap(), -0.01);
        assert_eq!(ln_z_mean_linear(1).unwrap(), -1.0);
        assert_eq!(ln_z_var_linear(100).unwrap(), 0.005);
        assert_eq!(ln_z_var_linear(1).unwrap(), 0.5);
        assert_abs_diff_eq!(ln_z_mean_relu(6).unwrap(), -1.359_81, epsilon = 1e-5);
        assert_abs_diff_eq!(ln_z_mean_relu(100).unwrap(), -0.717_74, epsilon = 1e-5);
        assert_abs_diff_eq!(ln_z_mean_relu(1_000_000_000).unwrap(), -std::f64::consts::LN_2, epsilon = 1e-8);
        assert_eq!(ln_z_var_relu(6).unwrap(), 2.5);
        assert_eq!(ln_z_var_relu(104).unwrap(), 0.05);
        // Below 6 the fit is clamped.
        assert_eq!(ln_z_var_relu(2).unwrap(), 2.5);
    }

    #[test]
    fn closed_form_gains() {
        assert_abs_diff_eq!(g_linear(100).unwrap().g, 1.005_01, epsilon = 1e-5);
        assert_abs_diff_eq!(g_linear(1).unwrap().g, 1.648_72, epsilon = 1e-5);
        assert_abs_diff_eq!(g_linear(10_000_000).unwrap().g, 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(g_relu(6).unwrap().g, 1.973_694, epsilon = 1e-6);
        assert_abs_diff_eq!(g_relu(100).unwrap().g, 1.431_709, epsilon = 1e-6);
        assert_abs_diff_eq!(g_relu(100_000_000).unwrap().g, std::f64::consts::SQRT_2, epsilon = 1e-6);
        assert!(closed_form_gain(Nonlinearity::Tanh, 100).is_err());
    }

    #[test]
    fn zero_width_is_rejected() {
        assert!(ln_z_mean_linear(0).is_err());
        assert!(ln_z_var_linear(0).is_err());
        assert!(ln_z_mean_relu(0).is_err());
        assert!(ln_z_var_relu(0).is_err());
        assert!(g_linear(0).is_err());
        assert!(g_relu(0).is_err());
    }

    #[test]
    fn gain_matches_mean_exactly() {
        for n in [1, 2, 5, 6, 7, 20, 100, 1000] {
            assert_eq!(g_linear(n).unwrap().g, gain_for_mean_ln_z(ln_z_mean_linear(n).unwrap()));
            let relu = gain_for_mean_ln_z(ln_z_mean_relu(n).unwrap());
            assert!((g_relu(n).unwrap().g - relu).abs() < 1e-15);
        }
    }

    #[test]
    fn gains_at_least_one_and_stats_finite() {
        for n in 1..300 {
            for nl in [Nonlinearity::Linear, Nonlinearity::Relu] {
                assert!(closed_form_gain(nl, n).unwrap().g >= 1.0);
                let s = closed_form_stats(nl, n).unwrap();
                assert!(s.mean.is_finite() && s.variance > 0.0 && s.variance.is_finite());
            }
        }
    }

    #[test]
    fn relu_draws_never_use_zero_rows() {
        let mut rng = Rng::new(4);
        for _ in 0..20_000 {
            assert!(sample_ln_z(Nonlinearity::Relu, 3, 1.0, &mut rng).unwrap().is_finite());
        }
    }

    #[test]
    fn linear_monte_carlo_mean() {
        let s = monte_carlo_stats(Nonlinearity::Linear, 100, 1.0, 1_000_000, 1).unwrap();
        let StatsSource::MonteCarlo { mean_std_error, .. } = s.source else { panic!() };
        // Leading-order value plus an O(1/N²) allowance.
        let allowance = 1.0 / 100f64.powi(2);
        assert!((s.mean - -0.01).abs() < 3.0 * mean_std_error + allowance, "{}", s.mean);
    }

    #[test]
    fn relu_monte_carlo_mean() {
        let s = monte_carlo_stats(Nonlinearity::Relu, 100, 1.0, 400_000, 2).unwrap();
        let fit = ln_z_mean_relu(100).unwrap();
        assert!(((s.mean - fit) / fit).abs() < 0.05);
        assert!(((s.variance - ln_z_var_relu(100).unwrap()) / s.variance).abs() < 0.10);
    }

    #[test]
    fn tanh_step_depends_on_gain() {
        let lo = monte_carlo_stats(Nonlinearity::Tanh, 50, 1.0, 2_000, 3).unwrap();
        let hi = monte_carlo_stats(Nonlinearity::Tanh, 50, 3.0, 2_000, 3).unwrap();
        // Stronger saturation shrinks the derivative factors.
        assert!(hi.mean < lo.mean - 0.5);
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let a = monte_carlo_stats(Nonlinearity::Relu, 20, 1.0, 10_000, 8).unwrap();
        let b = monte_carlo_stats(Nonlinearity::Relu, 20, 1.0, 10_000, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn linear_ratio_is_increasing_in_gain() {
        let grid = [0.9, 0.95, 1.0, 1.02, 1.05, 1.2];
        let means: Vec<f64> = grid
            .iter()
            .map(|&g| log_norm_ratio(Nonlinearity::Linear, 20, 30, g, 20, 6).unwrap().mean)
            .collect();
        assert!(means.windows(2).all(|w| w[1] > w[0]), "{means:?}");
        // Common random numbers make the linear curve exactly D·ln g apart.
        let diff = means[5] - means[2];
        assert!((diff - 30.0 * 1.2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn small_relu_search_reports_discards() {
        let est = estimate_optimal_g(Nonlinearity::Relu, 8, 30, 20, 1, &GainSearch::default()).unwrap();
        assert!(est.discarded > 0);
        assert!(est.recommendation.g > 1.3 && est.recommendation.g < 2.0);
    }

    #[test]
    fn unbracketed_search_fails() {
        let search = GainSearch { grid: vec![1.5, 2.0], tolerance: 1e-3 };
        assert!(matches!(
            estimate_optimal_g(Nonlinearity::Linear, 20, 10, 5, 1, &search),
            Err(Error::NotBracketed(_))
        ));
    }
}
