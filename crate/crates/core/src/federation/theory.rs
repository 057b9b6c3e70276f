//! Convergence monitor: empirical estimates of the smoothness, variance and
//! prototype-norm constants, the learning-rate and λ_c bounds, the round
//! count to reach an ε-stationary point, and a per-round descent check.
//!
//! Everything here is an estimate computed from observed trajectories, not a
//! certificate. The learning rate is treated as constant within a round.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TheoryError {
    #[error("cannot estimate constants: {0}")]
    InsufficientTrace(String),
    #[error("outside the convergence regime: requires {condition}")]
    Regime { condition: String },
    #[error("invalid theory input: {0}")]
    Invalid(String),
}

/// Constants of the one-round bound and the round-count formula.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    /// Smoothness constant `L`.
    pub l_sm: f64,
    /// Minibatch gradient variance bound `σ²`.
    pub sigma2: f64,
    /// Prototype norm bound `G`.
    pub g: f64,
    pub tau: f64,
    pub lambda_c: f64,
    /// Local steps per round.
    pub e: f64,
    pub eta: f64,
    /// Initial suboptimality `F_0 − F*`.
    pub delta: f64,
    /// Target squared gradient norm.
    pub epsilon: f64,
}

impl TheoryParams {
    /// `α(η) = η − L η² / 2`.
    pub fn alpha(&self) -> f64 {
        self.eta - self.l_sm * self.eta * self.eta / 2.0
    }

    /// Right-hand side of the one-round bound minus `F_t`:
    /// `−α Σ‖∇F‖² + (L η² E / 2) σ² + λ_c E η G / τ`.
    pub fn one_round_change(&self, grad_norm_sum: f64) -> f64 {
        -self.alpha() * grad_norm_sum
            + self.l_sm * self.eta * self.eta * self.e / 2.0 * self.sigma2
            + self.lambda_c * self.e * self.eta * self.g / self.tau
    }

    fn check_positive(&self, fields: &[(&str, f64)]) -> Result<(), TheoryError> {
        for (name, v) in fields {
            if !(*v > 0.0) || !v.is_finite() {
                return Err(TheoryError::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Largest admissible learning rate for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct LrBound {
    pub eta_max: f64,
    /// Why the bound collapsed to zero, if it did.
    pub diagnostic: Option<String>,
}

/// `2(Σ‖∇F‖² − λ_c E G/τ) / (L (Σ‖∇F‖² + E σ²))`.
///
/// A negative numerator means λ_c is too large for any positive rate; the
/// bound is then reported as zero with a diagnostic.
pub fn lr_upper_bound(theory: &TheoryParams, grad_norm_sum: f64) -> Result<LrBound, TheoryError> {
    let denominator = theory.l_sm * (grad_norm_sum + theory.e * theory.sigma2);
    if !(denominator > 0.0) || !denominator.is_finite() {
        return Err(TheoryError::Invalid(format!(
            "learning-rate bound denominator L(Σ‖∇F‖² + Eσ²) = {denominator} is not positive"
        )));
    }
    theory.check_positive(&[("τ", theory.tau)])?;
    let numerator = 2.0 * (grad_norm_sum - theory.lambda_c * theory.e * theory.g / theory.tau);
    if numerator < 0.0 {
        return Ok(LrBound {
            eta_max: 0.0,
            diagnostic: Some(format!(
                "λ_c too large: requires λ_c < τΣ‖∇F‖²/(EG) = {}",
                lambda_c_upper_bound(theory.tau, grad_norm_sum, theory.e, theory.g)
            )),
        });
    }
    Ok(LrBound {
        eta_max: numerator / denominator,
        diagnostic: None,
    })
}

/// `τ Σ‖∇F‖² / (E G)`: the λ_c above which no learning rate gives descent.
pub fn lambda_c_upper_bound(tau: f64, grad_norm_sum: f64, e: f64, g: f64) -> f64 {
    tau * grad_norm_sum / (e * g)
}

/// Rounds needed for the average squared gradient norm to drop below ε:
/// `⌈2Δ / (E ε (2η − L η²) − E η (L η σ² + 2 λ_c G/τ))⌉`.
pub fn rounds_to_epsilon(theory: &TheoryParams) -> Result<u64, TheoryError> {
    let t = theory;
    t.check_positive(&[
        ("L", t.l_sm),
        ("G", t.g),
        ("τ", t.tau),
        ("E", t.e),
        ("η", t.eta),
        ("Δ", t.delta),
        ("ε", t.epsilon),
    ])?;
    if !(t.sigma2 >= 0.0) || !(t.lambda_c >= 0.0) {
        return Err(TheoryError::Invalid("σ² and λ_c must be nonnegative".into()));
    }
    let lambda_max = t.tau * t.epsilon / t.g;
    if t.lambda_c >= lambda_max {
        return Err(TheoryError::Regime {
            condition: format!("λ_c < τε/G = {lambda_max} (got λ_c = {})", t.lambda_c),
        });
    }
    let eta_max = 2.0 * (t.epsilon - t.lambda_c * t.g / t.tau) / (t.l_sm * (t.epsilon + t.sigma2));
    if t.eta >= eta_max {
        return Err(TheoryError::Regime {
            condition: format!("η < 2(ε − λ_c G/τ)/(L(ε + σ²)) = {eta_max} (got η = {})", t.eta),
        });
    }
    let denominator = t.e * t.epsilon * (2.0 * t.eta - t.l_sm * t.eta * t.eta)
        - t.e * t.eta * (t.l_sm * t.eta * t.sigma2 + 2.0 * t.lambda_c * t.g / t.tau);
    if !(denominator > 0.0) {
        // Only reachable through rounding at the regime boundary.
        return Err(TheoryError::Regime {
            condition: format!("a positive per-round decrease (got {denominator})"),
        });
    }
    Ok((2.0 * t.delta / denominator).ceil() as u64)
}

/// What the monitor records for one round, aggregated over clients with the
/// aggregation weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    /// Federated objective `Σ_m w_m F_m` at the broadcast parameters and
    /// prototypes of this round.
    pub objective_start: f64,
    /// The same objective at the next broadcast (new parameters and new
    /// prototypes).
    pub objective_end: f64,
    /// `Σ_m w_m Σ_e ‖∇F_m(Θ_e)‖²`.
    pub grad_norm_sum: f64,
    /// Largest smoothness ratio seen on any client this round.
    pub smoothness: Option<f64>,
    /// Largest client minibatch variance this round.
    pub variance: f64,
    /// Largest uploaded prototype norm this round.
    pub prototype_norm: f64,
    /// Local steps per client.
    pub local_steps: usize,
}

/// Estimates `L`, `σ²` and `G` as maxima over the trace, and `Δ` as the
/// drop from the first objective to the smallest one observed. The
/// remaining fields come from the run configuration.
pub fn estimate_theory_params(
    trace: &[RoundTrace],
    tau: f64,
    lambda_c: f64,
    eta: f64,
    epsilon: f64,
) -> Result<TheoryParams, TheoryError> {
    let steps: usize = trace.iter().map(|r| r.local_steps).sum();
    if steps < 2 {
        return Err(TheoryError::InsufficientTrace(format!("need at least 2 recorded steps, got {steps}")));
    }
    let l_sm = trace
        .iter()
        .filter_map(|r| r.smoothness)
        .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))))
        .ok_or_else(|| TheoryError::InsufficientTrace("no pair of consecutive local steps".into()))?;
    let sigma2 = trace.iter().map(|r| r.variance).fold(0.0, f64::max);
    let g = trace.iter().map(|r| r.prototype_norm).fold(0.0, f64::max);
    let first = trace[0].objective_start;
    let lowest = trace
        .iter()
        .flat_map(|r| [r.objective_start, r.objective_end])
        .fold(f64::INFINITY, f64::min);
    let e = trace.iter().map(|r| r.local_steps).max().unwrap_or(1) as f64;
    Ok(TheoryParams {
        l_sm,
        sigma2,
        g,
        tau,
        lambda_c,
        e,
        eta,
        delta: first - lowest,
        epsilon,
    })
}

/// Whether one round satisfies `F_{t+1} ≤ F_t − α Σ‖∇F‖² + (L η² E/2) σ² + λ_c E η G/τ`.
pub fn round_satisfies_bound(round: &RoundTrace, theory: &TheoryParams) -> bool {
    round.objective_end <= round.objective_start + theory.one_round_change(round.grad_norm_sum)
}

/// Fraction of rounds satisfying the one-round bound.
pub fn descent_check(trace: &[RoundTrace], theory: &TheoryParams) -> f64 {
    if trace.is_empty() {
        return 0.0;
    }
    let ok = trace.iter().filter(|r| round_satisfies_bound(r, theory)).count();
    ok as f64 / trace.len() as f64
}
