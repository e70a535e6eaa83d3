//! Baseline density estimators: a single Gaussian over the full history,
//! a windowed kernel density estimate, and a windowed Gaussian mixture
//! fitted with EM.
//!
//! All three implement [`DensityEstimator`] and are deterministic for a
//! fixed observation sequence and seed, so detector runs against them are
//! exactly replayable.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exp_family::{fit_moment_match, GaussianMember, SufficientStatsAccumulator};
use crate::mixture::log_mixture_density;
use crate::pipeline::{DensityEstimator, DetectorConfig, ItanEstimator};

/// Lower bound on every kernel bandwidth, so duplicate or constant
/// coordinates cannot collapse the estimate to a point mass.
pub const MIN_BANDWIDTH: f64 = 1e-3;

/// Smallest responsibility mass a mixture component may collect before EM
/// keeps its previous parameters instead of refitting it.
const EM_EMPTY_TOL: f64 = 1e-12;

const EM_MAX_ITERS: usize = 50;
const EM_LOGLIK_TOL: f64 = 1e-6;

/// Single Gaussian, moment-matched to every normal sample seen so far.
pub struct MlEstimator {
    stats: SufficientStatsAccumulator,
    fitted: Option<GaussianMember>,
}

impl MlEstimator {
    pub fn new(dim: usize) -> Result<Self> {
        Ok(MlEstimator {
            stats: SufficientStatsAccumulator::new(dim),
            fitted: None,
        })
    }

    fn member(&mut self) -> &GaussianMember {
        if self.fitted.is_none() {
            self.fitted = Some(fit_moment_match(&self.stats));
        }
        self.fitted.as_ref().expect("populated above")
    }
}

impl DensityEstimator for MlEstimator {
    fn log_density(&mut self, _t: u64, x: &DVector<f64>) -> Result<f64> {
        self.member().log_density(x)
    }

    fn observe_normal(&mut self, _t: u64, x: &DVector<f64>) -> Result<()> {
        self.stats.accumulate_sample(x)?;
        self.fitted = None;
        Ok(())
    }

    fn name(&self) -> &'static str {
        "ml"
    }
}

/// Window length for the kernel estimate at round `t`: `⌈√t⌉`.
pub fn kde_window_len(t: u64) -> usize {
    (t as f64).sqrt().ceil() as usize
}

/// Window length for the mixture baseline at round `t`: `⌈ln t⌉`, but never
/// below 2 samples or below the component count.
pub fn gmm_window_len(t: u64, components: usize) -> usize {
    let log_len = (t as f64).ln().ceil() as usize;
    log_len.max(2).max(components)
}

/// Product-Gaussian kernel density estimate over a sliding window of the
/// most recent normal samples, with per-dimension plug-in bandwidths.
pub struct WkdeEstimator {
    dim: usize,
    normals: Vec<DVector<f64>>,
}

impl WkdeEstimator {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter(
                "dimension must be positive".into(),
            ));
        }
        Ok(WkdeEstimator {
            dim,
            normals: Vec::new(),
        })
    }

    /// Plug-in bandwidth per dimension over `window`:
    /// `h_j = σ̂_j · (4 / ((d+2) n))^{1/(d+4)}`, floored at [`MIN_BANDWIDTH`].
    fn bandwidths(&self, window: &[DVector<f64>]) -> Vec<f64> {
        let n = window.len();
        let d = self.dim;
        let scale = (4.0 / ((d as f64 + 2.0) * n as f64)).powf(1.0 / (d as f64 + 4.0));
        (0..d)
            .map(|j| {
                let mean = window.iter().map(|x| x[j]).sum::<f64>() / n as f64;
                let sq = window.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>();
                let sd = if n > 1 {
                    (sq / (n as f64 - 1.0)).sqrt()
                } else {
                    0.0
                };
                (sd * scale).max(MIN_BANDWIDTH)
            })
            .collect()
    }
}

impl DensityEstimator for WkdeEstimator {
    fn log_density(&mut self, t: u64, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if self.normals.is_empty() {
            return GaussianMember::standard(self.dim).log_density(x);
        }
        let w = kde_window_len(t).min(self.normals.len());
        let window = &self.normals[self.normals.len() - w..];
        let h = self.bandwidths(window);
        let ln_norm: f64 = h
            .iter()
            .map(|hj| (hj * (2.0 * std::f64::consts::PI).sqrt()).ln())
            .sum();
        // logsumexp over kernel terms, each a product of 1-D Gaussians.
        let terms: Vec<f64> = window
            .iter()
            .map(|xi| {
                let quad: f64 = (0..self.dim)
                    .map(|j| ((x[j] - xi[j]) / h[j]).powi(2))
                    .sum();
                -0.5 * quad - ln_norm
            })
            .collect();
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = terms.iter().map(|v| (v - max).exp()).sum();
        Ok(max + sum.ln() - (w as f64).ln())
    }

    fn observe_normal(&mut self, _t: u64, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        self.normals.push(x.clone());
        Ok(())
    }

    fn name(&self) -> &'static str {
        "wkde"
    }
}

/// One EM fit: mixing weights and members, plus the log-likelihood after
/// each iteration (strictly for diagnostics and tests).
fn em_fit(
    window: &[DVector<f64>],
    k: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<GaussianMember>, Vec<f64>)> {
    let n = window.len();
    let dim = window[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Farthest-point seeding: one random center, then greedy max-min.
    let mut centers: Vec<usize> = vec![rng.random_range(0..n)];
    while centers.len() < k {
        let next = (0..n)
            .map(|i| {
                let dmin = centers
                    .iter()
                    .map(|&c| (&window[i] - &window[c]).norm_squared())
                    .fold(f64::INFINITY, f64::min);
                (i, dmin)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .expect("window is nonempty");
        centers.push(next);
    }

    // Hard assignment to the nearest seed center gives the initial M-step.
    let mut resp = vec![vec![0.0; k]; n];
    for (i, x) in window.iter().enumerate() {
        let nearest = (0..k)
            .map(|c| (c, (x - &window[centers[c]]).norm_squared()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(c, _)| c)
            .expect("k is positive");
        resp[i][nearest] = 1.0;
    }

    let m_step = |resp: &[Vec<f64>],
                  prev: Option<(&[f64], &[GaussianMember])>|
     -> Result<(Vec<f64>, Vec<GaussianMember>)> {
        let mut pis = Vec::with_capacity(k);
        let mut members = Vec::with_capacity(k);
        for c in 0..k {
            let mass: f64 = resp.iter().map(|r| r[c]).sum();
            if mass < EM_EMPTY_TOL {
                // A starved component keeps its previous parameters.
                let (ppis, pmembers) = prev.expect("init assignment covers every component");
                pis.push(ppis[c]);
                members.push(pmembers[c].clone());
                continue;
            }
            let mut mean = DVector::zeros(dim);
            for (r, x) in resp.iter().zip(window) {
                mean += x * r[c];
            }
            mean /= mass;
            let mut cov = DMatrix::zeros(dim, dim);
            for (r, x) in resp.iter().zip(window) {
                let delta = x - &mean;
                cov += (&delta * delta.transpose()) * r[c];
            }
            cov /= mass;
            pis.push(mass / n as f64);
            members.push(GaussianMember::new(mean, cov));
        }
        let total: f64 = pis.iter().sum();
        for p in &mut pis {
            *p /= total;
        }
        Ok((pis, members))
    };

    let (mut pis, mut members) = m_step(&resp, None)?;
    let mut trace = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;
    for _ in 0..EM_MAX_ITERS {
        // E-step in log space.
        let mut loglik = 0.0;
        for (i, x) in window.iter().enumerate() {
            let lds: Vec<f64> = (0..k)
                .map(|c| {
                    if pis[c] > 0.0 {
                        Ok(pis[c].ln() + members[c].log_density(x)?)
                    } else {
                        Ok(f64::NEG_INFINITY)
                    }
                })
                .collect::<Result<_>>()?;
            let max = lds.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = lds.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loglik += lse;
            for c in 0..k {
                resp[i][c] = (lds[c] - lse).exp();
            }
        }
        trace.push(loglik);
        if (loglik - prev_ll).abs() < EM_LOGLIK_TOL {
            break;
        }
        prev_ll = loglik;
        let refit = m_step(&resp, Some((&pis, &members)))?;
        pis = refit.0;
        members = refit.1;
    }
    Ok((pis, members, trace))
}

/// Gaussian mixture fitted by EM on a short sliding window of recent
/// normal samples.  While the window holds fewer samples than components,
/// it falls back to a single moment-matched Gaussian.
pub struct WgmmEstimator {
    dim: usize,
    components: usize,
    em_seed: u64,
    normals: Vec<DVector<f64>>,
    /// Fit cache keyed by the window it was computed from, as
    /// `(start index, length)` into `normals`.
    cache: Option<CachedFit>,
}

/// A window key `(start, len)` with the mixture weights and members EM fit
/// on that window.
type CachedFit = ((usize, usize), Vec<f64>, Vec<GaussianMember>);

impl WgmmEstimator {
    pub fn new(dim: usize, components: usize, em_seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter(
                "dimension must be positive".into(),
            ));
        }
        if components == 0 {
            return Err(Error::InvalidParameter(
                "component count must be positive".into(),
            ));
        }
        Ok(WgmmEstimator {
            dim,
            components,
            em_seed,
            normals: Vec::new(),
            cache: None,
        })
    }

    fn fit_window(&mut self, t: u64) -> Result<(&[f64], &[GaussianMember])> {
        let w = gmm_window_len(t, self.components).min(self.normals.len());
        let start = self.normals.len() - w;
        let key = (start, w);
        let stale = match &self.cache {
            Some((k, _, _)) => *k != key,
            None => true,
        };
        if stale {
            let window = &self.normals[start..];
            let (pis, members) = if w < self.components {
                // Too few samples for a mixture: one moment-matched Gaussian.
                let mut stats = SufficientStatsAccumulator::new(self.dim);
                for x in window {
                    stats.accumulate_sample(x)?;
                }
                (vec![1.0], vec![fit_moment_match(&stats)])
            } else {
                // Decorrelate the seed from both the configured seed and the
                // position of the window in the stream.
                let seed = self.em_seed
                    ^ (self.normals.len() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                let (pis, members, _) = em_fit(window, self.components, seed)?;
                (pis, members)
            };
            self.cache = Some((key, pis, members));
        }
        let (_, pis, members) = self.cache.as_ref().expect("populated above");
        Ok((pis, members))
    }
}

impl DensityEstimator for WgmmEstimator {
    fn log_density(&mut self, t: u64, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if self.normals.is_empty() {
            return GaussianMember::standard(self.dim).log_density(x);
        }
        let (pis, members) = self.fit_window(t)?;
        let lds: Vec<f64> = members
            .iter()
            .map(|m| m.log_density(x))
            .collect::<Result<_>>()?;
        log_mixture_density(pis, &lds)
    }

    fn observe_normal(&mut self, _t: u64, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        self.normals.push(x.clone());
        Ok(())
    }

    fn name(&self) -> &'static str {
        "wgmm"
    }

    fn node_count(&self) -> usize {
        self.components
    }
}

/// The detectors this crate ships.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algo {
    Itan,
    Wgmm,
    Wkde,
    Ml,
}

impl Algo {
    pub const ALL: [Algo; 4] = [Algo::Itan, Algo::Wgmm, Algo::Wkde, Algo::Ml];

    pub fn name(&self) -> &'static str {
        match self {
            Algo::Itan => "itan",
            Algo::Wgmm => "wgmm",
            Algo::Wkde => "wkde",
            Algo::Ml => "ml",
        }
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "itan" => Ok(Algo::Itan),
            "wgmm" => Ok(Algo::Wgmm),
            "wkde" => Ok(Algo::Wkde),
            "ml" => Ok(Algo::Ml),
            other => Err(Error::InvalidParameter(format!(
                "unknown algorithm {other:?}; expected itan, wgmm, wkde, or ml"
            ))),
        }
    }
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Construct a fresh estimator of the given kind for `dim`-dimensional data.
pub fn build_estimator(
    algo: Algo,
    dim: usize,
    cfg: &DetectorConfig,
) -> Result<Box<dyn DensityEstimator>> {
    Ok(match algo {
        Algo::Itan => Box::new(ItanEstimator::from_config(dim, cfg)?),
        Algo::Wgmm => Box::new(WgmmEstimator::new(dim, cfg.gmm_components, cfg.em_seed)?),
        Algo::Wkde => Box::new(WkdeEstimator::new(dim)?),
        Algo::Ml => Box::new(MlEstimator::new(dim)?),
    })
}
