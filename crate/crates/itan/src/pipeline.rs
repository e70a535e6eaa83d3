//! The detector pipeline: one estimator, one adaptive threshold, one pass
//! over a stream.
//!
//! Each round runs strictly in this order: score the sample with the
//! density learned from *earlier* rounds, decide by thresholding, record
//! losses, then — and only then — use the round's feedback to move the
//! threshold and (unless the sample was revealed anomalous) train the
//! estimator.  Revealed anomalies never enter any density estimate, and
//! rounds without feedback never move the threshold, so the reported score
//! for round `t` is independent of round `t`'s own updates.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::StreamRecord;
use crate::error::{Error, Result};
use crate::idt::{Tree, TreeConfig};
use crate::mixture::{eg_update_in_place, ln_min_density, log_mixture_density};
use crate::threshold::{decide, step_size, zero_one_loss, CostPair, ThresholdState};

/// Which space the threshold compares scores in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdSpace {
    /// Scores are densities; the feasible interval is on raw density values.
    Density,
    /// Scores are log-densities; useful when densities span many decades,
    /// as in higher-dimensional data.
    LogDensity,
}

/// Everything a detector run needs besides the stream itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub tree: TreeConfig,
    /// Learning rate of the mixture-weight update.
    pub theta: f64,
    pub costs: CostPair,
    /// Feasible threshold interval `G = [g_lo, g_hi]` in the chosen space.
    pub g_lo: f64,
    pub g_hi: f64,
    pub threshold_space: ThresholdSpace,
    /// Component count for the windowed-GMM baseline.
    pub gmm_components: usize,
    /// Seed for the baseline EM initialization.
    pub em_seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            tree: TreeConfig::default(),
            theta: 0.5,
            costs: CostPair::new(1.0, 0.5).expect("valid default costs"),
            g_lo: 0.0,
            g_hi: 1.0,
            threshold_space: ThresholdSpace::Density,
            gmm_components: 3,
            em_seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.tree.validate()?;
        if !self.theta.is_finite() || self.theta <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "theta must be finite and positive, got {}",
                self.theta
            )));
        }
        if self.gmm_components == 0 {
            return Err(Error::InvalidParameter(
                "gmm component count must be positive".into(),
            ));
        }
        ThresholdState::new(self.g_lo, self.g_hi).map(|_| ())
    }
}

/// What the detector reports for one round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundOutput {
    /// 1-based round index.
    pub t: u64,
    /// Score in the configured threshold space (density or log-density).
    pub p_hat: f64,
    /// Threshold the decision was made against.
    pub tau: f64,
    /// `+1` anomalous, `-1` normal.
    pub decision: i8,
    pub true_label: Option<i8>,
    /// Self-information loss `-ln p̂(x)`, present only for rounds whose true
    /// label is normal.
    pub log_loss: Option<f64>,
    /// Cost-weighted zero-one loss, present when the true label is known.
    pub zero_one: Option<f64>,
}

/// An online density estimator the pipeline can drive.
///
/// Implementations must be deterministic functions of the observation
/// sequence fed to them, so that replays are exact.
pub trait DensityEstimator {
    /// Log-density estimate for round `t` *before* the round's sample is
    /// used for training.
    fn log_density(&mut self, t: u64, x: &DVector<f64>) -> Result<f64>;

    /// Absorb one sample presumed normal.
    fn observe_normal(&mut self, t: u64, x: &DVector<f64>) -> Result<()>;

    /// Housekeeping at the end of round `t`, after scoring and training.
    fn end_round(&mut self, _t: u64) {}

    fn name(&self) -> &'static str;

    /// Number of component estimators currently in play.
    fn node_count(&self) -> usize {
        1
    }
}

/// The tree-mixture estimator: per-node Gaussians combined with
/// exponentiated-gradient weights, growing on the split schedule.
pub struct ItanEstimator {
    tree: Tree,
    theta: f64,
    /// Per-round memo of (t, sample bits, node log-densities, log-mixture),
    /// so scoring and the follow-up training pass share one evaluation.
    memo: Option<(u64, Vec<u64>, Vec<f64>, f64)>,
}

impl ItanEstimator {
    pub fn new(dim: usize, tree: TreeConfig, theta: f64) -> Result<Self> {
        if !theta.is_finite() || theta <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "theta must be finite and positive, got {theta}"
            )));
        }
        Ok(ItanEstimator {
            tree: Tree::new(dim, tree)?,
            theta,
            memo: None,
        })
    }

    pub fn from_config(dim: usize, cfg: &DetectorConfig) -> Result<Self> {
        Self::new(dim, cfg.tree.clone(), cfg.theta)
    }

    pub fn tree(&self) -> &Tree {
        &self.tree
    }

    fn evaluate(&mut self, t: u64, x: &DVector<f64>) -> Result<(Vec<f64>, f64)> {
        let bits: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        if let Some((mt, mbits, lds, lp)) = &self.memo {
            if *mt == t && *mbits == bits {
                return Ok((lds.clone(), *lp));
            }
        }
        let lds = self.tree.log_densities(x)?;
        let lp = log_mixture_density(&self.tree.weights(), &lds)?;
        self.memo = Some((t, bits, lds.clone(), lp));
        Ok((lds, lp))
    }
}

impl DensityEstimator for ItanEstimator {
    fn log_density(&mut self, t: u64, x: &DVector<f64>) -> Result<f64> {
        Ok(self.evaluate(t, x)?.1)
    }

    fn observe_normal(&mut self, t: u64, x: &DVector<f64>) -> Result<()> {
        // Weight update first, from the pre-update densities of this round.
        let (lds, lp) = self.evaluate(t, x)?;
        let ratios: Vec<f64> = lds.iter().map(|ld| (ld - lp).exp()).collect();
        let mut weights = self.tree.weights();
        eg_update_in_place(&mut weights, self.theta, &ratios)?;
        self.tree.assign_weights(&weights)?;
        self.tree.observe(x)?;
        self.memo = None;
        Ok(())
    }

    fn end_round(&mut self, t: u64) {
        if self.tree.maybe_grow(t).is_some() {
            self.memo = None;
        }
    }

    fn name(&self) -> &'static str {
        "itan"
    }

    fn node_count(&self) -> usize {
        self.tree.len()
    }
}

/// Run the detector over a stream, producing one output per round.
pub fn run_detector(
    stream: &[StreamRecord],
    estimator: &mut dyn DensityEstimator,
    cfg: &DetectorConfig,
) -> Result<Vec<RoundOutput>> {
    cfg.validate()?;
    let mut state = ThresholdState::new(cfg.g_lo, cfg.g_hi)?;
    let mut out = Vec::with_capacity(stream.len());
    let dim = match stream.first() {
        Some(r) => r.x.len(),
        None => return Ok(out),
    };

    for (i, rec) in stream.iter().enumerate() {
        let t = (i + 1) as u64;
        let step = (|| -> Result<RoundOutput> {
            if rec.x.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: rec.x.len(),
                });
            }
            let lp = estimator.log_density(t, &rec.x)?.max(ln_min_density());
            let score = match cfg.threshold_space {
                ThresholdSpace::Density => lp.exp(),
                ThresholdSpace::LogDensity => lp,
            };
            let tau = state.tau();
            let decision = decide(tau, score);
            let log_loss = (rec.true_label == Some(-1)).then(|| -lp);
            let zero_one = match rec.true_label {
                Some(l) => Some(zero_one_loss(tau, score, l, &cfg.costs)?),
                None => None,
            };

            if rec.feedback {
                let label = rec.true_label.expect("feedback implies a label");
                let k = state.feedback_rounds() + 1;
                let alpha = step_size(k, &cfg.costs, state.diameter())?;
                state.ogd_step(score, label, &cfg.costs, alpha)?;
            }
            let revealed_anomalous = rec.feedback && rec.true_label == Some(1);
            if !revealed_anomalous {
                estimator.observe_normal(t, &rec.x)?;
            }
            estimator.end_round(t);

            Ok(RoundOutput {
                t,
                p_hat: score,
                tau,
                decision,
                true_label: rec.true_label,
                log_loss,
                zero_one,
            })
        })()
        .map_err(|e| e.at_round(t as usize))?;
        out.push(step);
    }
    Ok(out)
}
