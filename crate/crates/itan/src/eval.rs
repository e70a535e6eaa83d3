//! Evaluation: averaged self-information loss curves, detection/false-alarm
//! rates, cost-swept ROC curves, and multi-stream experiment summaries.
//!
//! The ROC sweep exploits one structural fact about the pipeline: density
//! estimators train on every round presumed normal regardless of what was
//! decided, so the score sequence of a run does not depend on the cost
//! pair.  Sweeping costs therefore only requires replaying the threshold
//! recursion over one recorded score sequence, which is exactly equivalent
//! to a full detector run per cost point (a test pins this bitwise).

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{build_estimator, Algo};
use crate::data::StreamRecord;
use crate::error::{Error, Result};
use crate::pipeline::{run_detector, DetectorConfig, RoundOutput};
use crate::threshold::{decide, step_size, CostPair, ThresholdState};

/// Running average of the self-information loss after each round.  Rounds
/// with a non-normal (or unknown) true label contribute zero loss but still
/// count in the denominator.
pub fn avg_log_loss_curve(outputs: &[RoundOutput]) -> Vec<f64> {
    let mut total = 0.0;
    outputs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            total += r.log_loss.unwrap_or(0.0);
            total / (i as f64 + 1.0)
        })
        .collect()
}

/// False-alarm and detection rates of a run, over rounds with known labels.
///
/// Returns `(fpr, tpr)`; `tpr` is `None` when the run contains no labeled
/// anomalies, and `fpr` is zero when it contains no labeled normals.
pub fn detection_rates(outputs: &[RoundOutput]) -> (f64, Option<f64>) {
    let mut fp = 0u64;
    let mut normals = 0u64;
    let mut tp = 0u64;
    let mut anomalies = 0u64;
    for r in outputs {
        match r.true_label {
            Some(-1) => {
                normals += 1;
                if r.decision == 1 {
                    fp += 1;
                }
            }
            Some(1) => {
                anomalies += 1;
                if r.decision == 1 {
                    tp += 1;
                }
            }
            _ => {}
        }
    }
    let fpr = if normals == 0 {
        0.0
    } else {
        fp as f64 / normals as f64
    };
    let tpr = (anomalies > 0).then(|| tp as f64 / anomalies as f64);
    (fpr, tpr)
}

/// The cost grid swept for ROC curves: the miss cost stays at 1 while the
/// false-alarm cost runs over `{i/100 : i = 0..=99}`.
pub fn roc_cost_grid() -> Vec<CostPair> {
    (0..100)
        .map(|i| CostPair::new(1.0, i as f64 / 100.0).expect("grid costs are valid"))
        .collect()
}

/// One ROC operating point and the false-alarm cost that produced it.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RocPoint {
    pub false_alarm_cost: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Replay the threshold recursion over a recorded score sequence under a
/// different cost pair, and report the resulting rates.  Because scores do
/// not depend on costs, this matches a full detector run at those costs.
fn replay_rates(
    stream: &[StreamRecord],
    scores: &[f64],
    costs: &CostPair,
    g: (f64, f64),
) -> Result<(f64, Option<f64>)> {
    let mut state = ThresholdState::new(g.0, g.1)?;
    let mut fp = 0u64;
    let mut normals = 0u64;
    let mut tp = 0u64;
    let mut anomalies = 0u64;
    for (rec, &score) in stream.iter().zip(scores) {
        let decision = decide(state.tau(), score);
        match rec.true_label {
            Some(-1) => {
                normals += 1;
                if decision == 1 {
                    fp += 1;
                }
            }
            Some(1) => {
                anomalies += 1;
                if decision == 1 {
                    tp += 1;
                }
            }
            _ => {}
        }
        if rec.feedback {
            let label = rec.true_label.expect("feedback implies a label");
            let k = state.feedback_rounds() + 1;
            let alpha = step_size(k, costs, state.diameter())?;
            state.ogd_step(score, label, costs, alpha)?;
        }
    }
    let fpr = if normals == 0 {
        0.0
    } else {
        fp as f64 / normals as f64
    };
    let tpr = (anomalies > 0).then(|| tp as f64 / anomalies as f64);
    Ok((fpr, tpr))
}

/// Sweep the full cost grid over one stream with a fresh estimator, giving
/// one operating point per cost.
pub fn roc_sweep(stream: &[StreamRecord], algo: Algo, cfg: &DetectorConfig) -> Result<Vec<RocPoint>> {
    let dim = match stream.first() {
        Some(r) => r.x.len(),
        None => {
            return Err(Error::InvalidParameter(
                "cannot sweep an empty stream".into(),
            ))
        }
    };
    let mut estimator = build_estimator(algo, dim, cfg)?;
    let outputs = run_detector(stream, estimator.as_mut(), cfg)?;
    roc_sweep_from_outputs(stream, &outputs, cfg)
}

/// Sweep the cost grid by replaying thresholds over an existing run.
pub fn roc_sweep_from_outputs(
    stream: &[StreamRecord],
    outputs: &[RoundOutput],
    cfg: &DetectorConfig,
) -> Result<Vec<RocPoint>> {
    let scores: Vec<f64> = outputs.iter().map(|r| r.p_hat).collect();
    roc_cost_grid()
        .par_iter()
        .map(|costs| {
            let (fpr, tpr) = replay_rates(stream, &scores, costs, (cfg.g_lo, cfg.g_hi))?;
            let tpr = tpr.ok_or_else(|| {
                Error::InvalidParameter(
                    "stream has no labeled anomalies; the ROC curve is undefined".into(),
                )
            })?;
            Ok(RocPoint {
                false_alarm_cost: costs.false_alarm(),
                fpr,
                tpr,
            })
        })
        .collect()
}

/// Trapezoidal area under the operating points, with the `(0,0)` and
/// `(1,1)` corners appended.  Invariant to point order and duplicates.
pub fn auc(points: &[(f64, f64)]) -> f64 {
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(points.len() + 2);
    pts.push((0.0, 0.0));
    pts.extend_from_slice(points);
    pts.push((1.0, 1.0));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Everything recorded about one detector run, written alongside the
/// per-round trace so a run can be audited or replayed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub algo: String,
    pub seed: Option<u64>,
    pub rounds: usize,
    pub node_count: usize,
    pub final_avg_log_loss: Option<f64>,
    pub fpr: f64,
    pub tpr: Option<f64>,
    pub wall_ms: u64,
    pub config: DetectorConfig,
}

/// Aggregate results of one algorithm over several streams.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlgoReport {
    pub algo: String,
    /// Final averaged log loss of each stream's run.
    pub loss_finals: Vec<f64>,
    pub loss_mean: f64,
    /// Per-stream areas under the cost-swept ROC curve.
    pub aucs: Vec<f64>,
    pub auc_mean: f64,
    /// Sample standard deviation of the per-stream areas.
    pub auc_std: f64,
    /// Operating points averaged over streams at each cost index.
    pub mean_roc: Vec<RocPoint>,
    /// Loss curve averaged over streams at each round.
    pub mean_loss_curve: Vec<f64>,
    pub wall_ms: u64,
}

fn sample_std(values: &[f64], mean: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (ss / (values.len() as f64 - 1.0)).sqrt()
}

/// Run one algorithm over every stream: a single detector run per stream
/// for the loss curve, plus the cost sweep for its ROC curve.
///
/// All streams must have the same length so curves can be averaged
/// pointwise.
pub fn evaluate_algo(
    streams: &[Vec<StreamRecord>],
    algo: Algo,
    cfg: &DetectorConfig,
) -> Result<AlgoReport> {
    if streams.is_empty() {
        return Err(Error::InvalidParameter("no streams to evaluate".into()));
    }
    let rounds = streams[0].len();
    if streams.iter().any(|s| s.len() != rounds) {
        return Err(Error::InvalidParameter(
            "streams must share a length to average their curves".into(),
        ));
    }
    let started = Instant::now();
    let per_stream: Vec<(Vec<f64>, Vec<RocPoint>)> = streams
        .par_iter()
        .map(|stream| {
            let dim = stream[0].x.len();
            let mut estimator = build_estimator(algo, dim, cfg)?;
            let outputs = run_detector(stream, estimator.as_mut(), cfg)?;
            let curve = avg_log_loss_curve(&outputs);
            let roc = roc_sweep_from_outputs(stream, &outputs, cfg)?;
            Ok((curve, roc))
        })
        .collect::<Result<_>>()?;

    let n = streams.len() as f64;
    let loss_finals: Vec<f64> = per_stream
        .iter()
        .map(|(curve, _)| *curve.last().expect("streams are nonempty"))
        .collect();
    let loss_mean = loss_finals.iter().sum::<f64>() / n;
    let aucs: Vec<f64> = per_stream
        .iter()
        .map(|(_, roc)| auc(&roc.iter().map(|p| (p.fpr, p.tpr)).collect::<Vec<_>>()))
        .collect();
    let auc_mean = aucs.iter().sum::<f64>() / n;
    let auc_std = sample_std(&aucs, auc_mean);

    let mut mean_loss_curve = vec![0.0; rounds];
    for (curve, _) in &per_stream {
        for (acc, v) in mean_loss_curve.iter_mut().zip(curve) {
            *acc += v / n;
        }
    }
    let mean_roc: Vec<RocPoint> = (0..per_stream[0].1.len())
        .map(|i| RocPoint {
            false_alarm_cost: per_stream[0].1[i].false_alarm_cost,
            fpr: per_stream.iter().map(|(_, roc)| roc[i].fpr).sum::<f64>() / n,
            tpr: per_stream.iter().map(|(_, roc)| roc[i].tpr).sum::<f64>() / n,
        })
        .collect();

    Ok(AlgoReport {
        algo: algo.name().to_string(),
        loss_finals,
        loss_mean,
        aucs,
        auc_mean,
        auc_std,
        mean_roc,
        mean_loss_curve,
        wall_ms: started.elapsed().as_millis() as u64,
    })
}
