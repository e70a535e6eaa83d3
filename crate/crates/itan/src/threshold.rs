//! Adaptive density threshold driven by projected online gradient descent.
//!
//! A round's score (the estimated density of the sample, or its log) is
//! compared against a threshold τ: scores strictly below τ are declared
//! anomalous (+1), everything else normal (−1).  The reference loss is the
//! cost-weighted zero-one error; learning runs on its logistic surrogate,
//! whose gradient in τ feeds a projected OGD step with the classical
//! `O(1/k)` step-size schedule over the feasible interval `G`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Asymmetric decision costs: `miss` is charged when an anomaly (+1) is
/// declared normal, `false_alarm` when a normal (−1) is declared anomalous.
///
/// `false_alarm` may be zero — the ROC sweep's first grid point uses it —
/// which makes the step-size schedule degenerate (infinite); the OGD step
/// handles that limit by saturating at the feasible boundary.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CostPair {
    miss: f64,
    false_alarm: f64,
}

impl CostPair {
    pub fn new(miss: f64, false_alarm: f64) -> Result<Self> {
        if miss <= 0.0 || !miss.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "miss cost must be positive, got {miss}"
            )));
        }
        if false_alarm < 0.0 || !false_alarm.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "false-alarm cost must be nonnegative, got {false_alarm}"
            )));
        }
        Ok(CostPair { miss, false_alarm })
    }

    pub fn miss(&self) -> f64 {
        self.miss
    }

    pub fn false_alarm(&self) -> f64 {
        self.false_alarm
    }

    /// Cost attached to mislabeling a round whose true label is `label`.
    pub fn cost_of(&self, label: i8) -> Result<f64> {
        match label {
            1 => Ok(self.miss),
            -1 => Ok(self.false_alarm),
            other => Err(Error::InvalidParameter(format!(
                "label must be +1 or -1, got {other}"
            ))),
        }
    }

    pub fn max(&self) -> f64 {
        self.miss.max(self.false_alarm)
    }

    pub fn min(&self) -> f64 {
        self.miss.min(self.false_alarm)
    }
}

/// Decision rule: anomalous (+1) iff the score falls strictly below the
/// threshold; ties count as normal.
pub fn decide(tau: f64, score: f64) -> i8 {
    if score < tau {
        1
    } else {
        -1
    }
}

/// Cost-weighted zero-one loss of the thresholded decision.
pub fn zero_one_loss(tau: f64, score: f64, label: i8, costs: &CostPair) -> Result<f64> {
    let c = costs.cost_of(label)?;
    Ok(if decide(tau, score) == label { 0.0 } else { c })
}

/// `ln(1 + e^z)` computed without overflow for large `z`.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Logistic surrogate `C_d · ln(1 + e^{(score-τ)·d})`, convex in τ and an
/// upper bound (scaled) of the zero-one loss.
pub fn logistic_loss(tau: f64, score: f64, label: i8, costs: &CostPair) -> Result<f64> {
    let c = costs.cost_of(label)?;
    Ok(c * softplus((score - tau) * label as f64))
}

/// Gradient of [`logistic_loss`] in τ: `-d·C_d / (1 + e^{(τ-score)·d})`.
pub fn logistic_loss_grad(tau: f64, score: f64, label: i8, costs: &CostPair) -> Result<f64> {
    let c = costs.cost_of(label)?;
    let d = label as f64;
    Ok(-d * c / (1.0 + ((tau - score) * d).exp()))
}

/// OGD step size for the `k`-th feedback round over an interval of diameter
/// `d_g`: `(1 + e^{D})² / (k · C_min · e^{D})`.  With a zero minimum cost
/// this is infinite, the saturating limit handled by the step itself.
pub fn step_size(k: u64, costs: &CostPair, d_g: f64) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidParameter("step index must be >= 1".into()));
    }
    if d_g <= 0.0 || !d_g.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "feasible diameter must be positive, got {d_g}"
        )));
    }
    let e = d_g.exp();
    Ok((1.0 + e).powi(2) / (k as f64 * costs.min() * e))
}

/// Clamp `x` into `[lo, hi]`.
pub fn project(lo: f64, hi: f64, x: f64) -> f64 {
    x.clamp(lo, hi)
}

/// Threshold learner state: the feasible interval, the current τ, and how
/// many feedback rounds have driven it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdState {
    lo: f64,
    hi: f64,
    tau: f64,
    feedback_rounds: u64,
}

impl ThresholdState {
    /// New state over `G = [lo, hi]`, with τ started at the midpoint.
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(Error::InvalidParameter(format!(
                "feasible interval must be finite with lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(ThresholdState {
            lo,
            hi,
            tau: 0.5 * (lo + hi),
            feedback_rounds: 0,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn diameter(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn feedback_rounds(&self) -> u64 {
        self.feedback_rounds
    }

    /// One projected OGD step on the logistic surrogate for a feedback
    /// round with the given score and revealed label.
    ///
    /// An infinite step size (zero minimum cost) moves τ to the feasible
    /// boundary in the descent direction, unless the gradient is exactly
    /// zero, in which case τ stays put.
    pub fn ogd_step(
        &mut self,
        score: f64,
        label: i8,
        costs: &CostPair,
        alpha: f64,
    ) -> Result<()> {
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("score {score}")));
        }
        if alpha.is_nan() || alpha <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "step size must be positive, got {alpha}"
            )));
        }
        let grad = logistic_loss_grad(self.tau, score, label, costs)?;
        let delta = if grad == 0.0 { 0.0 } else { alpha * -grad };
        self.tau = if delta.is_finite() {
            project(self.lo, self.hi, self.tau + delta)
        } else if delta > 0.0 {
            self.hi
        } else {
            self.lo
        };
        self.feedback_rounds += 1;
        Ok(())
    }
}
