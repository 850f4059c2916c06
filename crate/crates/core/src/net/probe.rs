use crate::error::Result;
use crate::numeric::Rng;

use super::{init_network, DeltaTrace, Nonlinearity};

/// One freshly drawn network with a random input pushed forward and a random
/// output error pushed back.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTrial {
    pub deltas: DeltaTrace,
    /// Sum over layers of `ln(g_d²)`.
    pub ln_gain_sq: f64,
}

impl ProbeTrial {
    pub fn is_dead(&self) -> bool {
        self.deltas.has_dead_layer()
    }

    /// `ln(|δ_{D-k}|² / |δ_D|²)` for `k = 0..=D`.
    pub fn ln_norm_profile(&self) -> Vec<f64> {
        self.deltas.ln_norm_profile()
    }

    /// `ln Z = ln(|δ_0|² / |δ_D|²)`.
    pub fn ln_z(&self) -> f64 {
        *self.ln_norm_profile().last().unwrap()
    }

    /// `ln(|δ_0| / |δ_D|)`, half of `ln Z`.
    pub fn ln_norm_ratio(&self) -> f64 {
        0.5 * self.ln_z()
    }
}

/// Draws a network with the given widths and gain (zero biases, fan-in
/// weight variance), forward-propagates an input with i.i.d. `N(0, 1)`
/// entries and back-propagates an output error `δ_D` with i.i.d. `N(0, 1)`
/// entries. All randomness comes from child streams of `seed`.
pub fn random_backprop_trial(widths: &[usize], nonlinearity: Nonlinearity, g: f64, seed: u64) -> Result<ProbeTrial> {
    let root = Rng::new(seed);
    let params = init_network(widths, g, nonlinearity, nonlinearity.into(), root.child_named("network").seed())?;
    let input = root.child_named("input").normal_vec(widths[0]);
    let delta_out = root.child_named("delta").normal_vec(*widths.last().unwrap());
    let trace = params.forward(&input)?;
    let deltas = params.backward_deltas(&trace, &delta_out)?;
    let ln_gain_sq = params.gains().iter().map(|g| (g * g).ln()).sum();
    Ok(ProbeTrial { deltas, ln_gain_sq })
}
