//! Weighted mixtures of expert densities and their exponentiated-gradient
//! updates.
//!
//! The tree's nodes act as experts; their fitted densities are combined by a
//! weight vector on the probability simplex.  After each normal sample the
//! weights move by a multiplicative exponentiated-gradient step driven by
//! each expert's share `f_i / p̃` of the mixture value, followed by an
//! explicit renormalization so the simplex is preserved regardless of float
//! roundoff.  All density arithmetic here is done in log space and the
//! mixture value is floored, so downstream losses stay finite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Densities below this value are clamped before logs or losses are taken.
pub const MIN_DENSITY: f64 = 1e-300;

/// `ln(MIN_DENSITY)`, the floor for log-mixture values.
pub fn ln_min_density() -> f64 {
    MIN_DENSITY.ln()
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidParameter(
            "weights must be finite and nonnegative".into(),
        ));
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::InvalidParameter("weights sum to zero".into()));
    }
    Ok(())
}

fn check_same_len(weights: &[f64], values: &[f64]) -> Result<()> {
    if weights.len() != values.len() {
        return Err(Error::DimensionMismatch {
            expected: weights.len(),
            got: values.len(),
        });
    }
    Ok(())
}

/// Log of the mixture value `Σ w_i exp(ld_i)` via log-sum-exp, floored at
/// `ln(MIN_DENSITY)`.  Entries with zero weight are ignored, so experts may
/// report `-inf` without poisoning the result.
pub fn log_mixture_density(weights: &[f64], log_densities: &[f64]) -> Result<f64> {
    check_same_len(weights, log_densities)?;
    check_weights(weights)?;
    if log_densities.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite("log-density input".into()));
    }
    let mut m = f64::NEG_INFINITY;
    for (w, ld) in weights.iter().zip(log_densities) {
        if *w > 0.0 {
            m = m.max(w.ln() + ld);
        }
    }
    if m == f64::NEG_INFINITY {
        return Ok(ln_min_density());
    }
    let mut sum = 0.0;
    for (w, ld) in weights.iter().zip(log_densities) {
        if *w > 0.0 {
            sum += (w.ln() + ld - m).exp();
        }
    }
    Ok((m + sum.ln()).max(ln_min_density()))
}

/// Mixture value `Σ w_i f_i` for plain density inputs, floored at
/// `MIN_DENSITY`.
pub fn mixture_density(weights: &[f64], densities: &[f64]) -> Result<f64> {
    check_same_len(weights, densities)?;
    if densities.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::NonFinite("density input".into()));
    }
    let logs: Vec<f64> = densities.iter().map(|f| f.ln()).collect();
    Ok(log_mixture_density(weights, &logs)?.exp().max(MIN_DENSITY))
}

/// One exponentiated-gradient step, in place: `w_i ← w_i exp(θ r_i)` with
/// `r_i = f_i / p̃`, then renormalize.  The largest exponent over the
/// supported experts is subtracted first so the step cannot overflow;
/// zero-weight experts stay at zero.
pub fn eg_update_in_place(weights: &mut [f64], theta: f64, ratios: &[f64]) -> Result<()> {
    check_same_len(weights, ratios)?;
    check_weights(weights)?;
    if !theta.is_finite() || theta <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "learning rate must be finite and positive, got {theta}"
        )));
    }
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::NonFinite("density ratio input".into()));
    }
    let mut m = f64::NEG_INFINITY;
    for (w, r) in weights.iter().zip(ratios) {
        if *w > 0.0 {
            m = m.max(theta * r);
        }
    }
    let mut sum = 0.0;
    for (w, r) in weights.iter_mut().zip(ratios) {
        if *w > 0.0 {
            *w *= (theta * r - m).exp();
            sum += *w;
        }
    }
    for w in weights.iter_mut() {
        *w /= sum;
    }
    Ok(())
}

/// Mixture weights paired with their learning rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureWeights {
    weights: Vec<f64>,
    theta: f64,
}

impl MixtureWeights {
    /// Uniform weights over `n` experts.
    pub fn uniform(n: usize, theta: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("need at least one expert".into()));
        }
        Self::from_weights(vec![1.0 / n as f64; n], theta)
    }

    /// Adopt an explicit weight vector, which is normalized to sum to one.
    pub fn from_weights(mut weights: Vec<f64>, theta: f64) -> Result<Self> {
        check_weights(&weights)?;
        if !theta.is_finite() || theta <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be finite and positive, got {theta}"
            )));
        }
        let sum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= sum;
        }
        Ok(MixtureWeights { weights, theta })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn density(&self, densities: &[f64]) -> Result<f64> {
        mixture_density(&self.weights, densities)
    }

    pub fn log_density(&self, log_densities: &[f64]) -> Result<f64> {
        log_mixture_density(&self.weights, log_densities)
    }

    /// EG step from plain expert densities and the already-computed mixture
    /// value `p_tilde`.
    pub fn eg_update(&mut self, densities: &[f64], p_tilde: f64) -> Result<()> {
        if p_tilde <= 0.0 || !p_tilde.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "mixture value must be positive, got {p_tilde}"
            )));
        }
        let ratios: Vec<f64> = densities.iter().map(|f| f / p_tilde).collect();
        eg_update_in_place(&mut self.weights, self.theta, &ratios)
    }

    /// EG step from log-densities and the log-mixture value.
    pub fn eg_update_log(&mut self, log_densities: &[f64], log_p: f64) -> Result<()> {
        check_same_len(&self.weights, log_densities)?;
        if log_p.is_nan() {
            return Err(Error::NonFinite("log mixture value".into()));
        }
        let ratios: Vec<f64> = log_densities.iter().map(|ld| (ld - log_p).exp()).collect();
        eg_update_in_place(&mut self.weights, self.theta, &ratios)
    }

    /// Split expert `parent`: it keeps `ξ` of its weight and two new experts
    /// appended at the end share the rest equally.  Returns their indices.
    /// `ξ = 1` is legal and leaves the children with zero weight.
    pub fn redistribute_on_split(&mut self, parent: usize, xi: f64) -> Result<(usize, usize)> {
        if parent >= self.weights.len() {
            return Err(Error::InvalidParameter(format!(
                "no expert at index {parent}"
            )));
        }
        if !(xi > 0.0 && xi <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "xi must lie in (0, 1], got {xi}"
            )));
        }
        let w = self.weights[parent];
        let child = (1.0 - xi) * w / 2.0;
        self.weights[parent] = xi * w;
        self.weights.push(child);
        self.weights.push(child);
        Ok((self.weights.len() - 2, self.weights.len() - 1))
    }
}

/// Constants appearing in the worst-case tuning of the EG learning rate:
/// a bound `A` on the average per-round loss, a bound `R` on expert
/// densities, and the horizon `T`.
#[derive(Debug, Clone, Copy)]
pub struct EgTuning {
    pub loss_bound_a: f64,
    pub density_bound_r: f64,
    pub horizon: usize,
}

/// The learning rate `2√(ln N) / (R√(2AT) + R²√(ln N))` that balances the
/// two terms of the mixture regret guarantee for `N` experts.
pub fn theoretical_theta(tuning: &EgTuning, n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least two experts, got {n}"
        )));
    }
    let EgTuning {
        loss_bound_a: a,
        density_bound_r: r,
        horizon: t,
    } = *tuning;
    if a <= 0.0 || !a.is_finite() || r <= 0.0 || !r.is_finite() || t == 0 {
        return Err(Error::InvalidParameter(
            "loss bound, density bound, and horizon must be positive".into(),
        ));
    }
    let ln_n = (n as f64).ln();
    Ok(2.0 * ln_n.sqrt() / (r * (2.0 * a * t as f64).sqrt() + r * r * ln_n.sqrt()))
}
