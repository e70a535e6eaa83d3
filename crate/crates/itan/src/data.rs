//! Stream records, synthetic stream generators, dataset loading, and the
//! CSV interchange format.
//!
//! All randomness flows through a `ChaCha8` generator seeded explicitly, so
//! every stream is reproducible bit-for-bit from its seed.  Correlated
//! Gaussian samples are produced through the symmetric (eigendecomposition)
//! square root of the covariance rather than a Cholesky factor.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// One round of a stream: the sample, its true label if known, and whether
/// that label is revealed to the detector after it decides.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamRecord {
    pub x: DVector<f64>,
    /// `+1` anomalous, `-1` normal, `None` unknown.
    pub true_label: Option<i8>,
    /// Labels can only be revealed if they exist.
    pub feedback: bool,
}

impl StreamRecord {
    pub fn new(x: DVector<f64>, true_label: Option<i8>, feedback: bool) -> Result<Self> {
        if let Some(l) = true_label {
            if l != 1 && l != -1 {
                return Err(Error::InvalidParameter(format!(
                    "label must be +1 or -1, got {l}"
                )));
            }
        }
        if feedback && true_label.is_none() {
            return Err(Error::InvalidParameter(
                "feedback requires a true label".into(),
            ));
        }
        Ok(StreamRecord {
            x,
            true_label,
            feedback,
        })
    }

    /// A labeled record whose label is revealed as feedback.
    pub fn labeled(x: DVector<f64>, label: i8) -> Result<Self> {
        Self::new(x, Some(label), true)
    }
}

/// Means and covariances of the three normal components of the Gaussian
/// mixture stream.
pub fn gauss_mixture_components() -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
    let means = vec![
        DVector::from_vec(vec![-1.0, 1.0]),
        DVector::from_vec(vec![1.0, -1.0]),
        DVector::from_vec(vec![2.0, 2.0]),
    ];
    let covs = vec![
        DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.0, 0.2]),
        DMatrix::from_row_slice(2, 2, &[0.14, 0.2, 0.2, 0.4]),
        DMatrix::from_row_slice(2, 2, &[0.4, -0.2, -0.2, 0.14]),
    ];
    (means, covs)
}

/// Mean and covariance of the anomalous component of the Gaussian mixture
/// stream.
pub fn gauss_anomaly_component() -> (DVector<f64>, DMatrix<f64>) {
    (
        DVector::from_vec(vec![1.0, 1.0]),
        DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 0.1]),
    )
}

/// Symmetric positive-semidefinite square root `S` with `S S = m`.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let sqrt_vals = DVector::from_fn(eig.eigenvalues.len(), |i, _| {
        eig.eigenvalues[i].max(0.0).sqrt()
    });
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

fn standard_pair(rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_vec(vec![
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    ])
}

/// Gaussian mixture stream: each round is anomalous with probability 0.1;
/// normal samples come from an equal-weight three-component mixture and
/// anomalous ones from a single Gaussian sitting between the components.
/// Labels are attached and marked for feedback.
pub fn gen_gauss_mixture_stream(seed: u64, len: usize) -> Vec<StreamRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (means, covs) = gauss_mixture_components();
    let roots: Vec<DMatrix<f64>> = covs.iter().map(sym_sqrt).collect();
    let (a_mean, a_cov) = gauss_anomaly_component();
    let a_root = sym_sqrt(&a_cov);

    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let anomalous = rng.random::<f64>() < 0.1;
        let record = if anomalous {
            let x = &a_mean + &a_root * standard_pair(&mut rng);
            StreamRecord::labeled(x, 1)
        } else {
            let c = rng.random_range(0..3);
            let x = &means[c] + &roots[c] * standard_pair(&mut rng);
            StreamRecord::labeled(x, -1)
        };
        out.push(record.expect("generated labels are valid"));
    }
    out
}

/// Band stream: `x₁ ~ U(-1,1)` and `x₂` uniform on a width-0.2 band above
/// `sin(πx₁)` for normal rounds and above `cos(πx₁)` for anomalous ones
/// (probability 0.1).
pub fn gen_sine_stream(seed: u64, len: usize) -> Vec<StreamRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let anomalous = rng.random::<f64>() < 0.1;
        let x1 = rng.random_range(-1.0..1.0);
        let base = if anomalous {
            (std::f64::consts::PI * x1).cos()
        } else {
            (std::f64::consts::PI * x1).sin()
        };
        let x2 = base + 0.2 * rng.random::<f64>();
        let x = DVector::from_vec(vec![x1, x2]);
        let label = if anomalous { 1 } else { -1 };
        out.push(StreamRecord::labeled(x, label).expect("valid label"));
    }
    out
}

/// Keep each record's feedback flag with probability `q` (labels stay in
/// the record for scoring; only their revelation to the detector is
/// masked).  `q = 1` returns the stream unchanged.
pub fn mask_feedback(stream: &[StreamRecord], q: f64, seed: u64) -> Result<Vec<StreamRecord>> {
    if !(0.0..=1.0).contains(&q) || !q.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "feedback probability must lie in [0, 1], got {q}"
        )));
    }
    if q >= 1.0 {
        return Ok(stream.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(stream
        .iter()
        .map(|r| {
            let keep = rng.random::<f64>() < q;
            StreamRecord {
                x: r.x.clone(),
                true_label: r.true_label,
                feedback: r.feedback && keep,
            }
        })
        .collect())
}

/// Replace each sample by `(x - μ)/σ` computed from the running mean and
/// standard deviation of the *earlier* presumed-normal samples (those not
/// revealed as anomalous).  The first two rounds pass through unchanged and
/// σ is floored at 1e-6 per dimension.
pub fn standardize_stream(stream: &[StreamRecord]) -> Vec<StreamRecord> {
    let mut out = Vec::with_capacity(stream.len());
    if stream.is_empty() {
        return out;
    }
    let d = stream[0].x.len();
    let mut count = 0u64;
    let mut mean = DVector::zeros(d);
    let mut m2 = DVector::<f64>::zeros(d);
    for r in stream {
        let x = if count >= 2 {
            let var = &m2 / count as f64;
            DVector::from_fn(d, |i, _| {
                (r.x[i] - mean[i]) / var[i].sqrt().max(1e-6)
            })
        } else {
            r.x.clone()
        };
        out.push(StreamRecord {
            x,
            true_label: r.true_label,
            feedback: r.feedback,
        });
        let revealed_anomalous = r.feedback && r.true_label == Some(1);
        if !revealed_anomalous {
            // Welford update on the raw sample.
            count += 1;
            let delta = &r.x - &mean;
            mean += &delta / count as f64;
            let delta2 = &r.x - &mean;
            m2 += delta.component_mul(&delta2);
        }
    }
    out
}

/// Write a stream as CSV with columns `x1..xd,label`.  Floats are printed
/// in shortest round-trip form, so reading the file back is lossless.
pub fn write_stream_csv<W: Write>(mut w: W, stream: &[StreamRecord]) -> Result<()> {
    if let Some(first) = stream.first() {
        let cols: Vec<String> = (1..=first.x.len()).map(|i| format!("x{i}")).collect();
        writeln!(w, "{},label", cols.join(","))?;
    }
    for r in stream {
        let xs: Vec<String> = r.x.iter().map(|v| format!("{v}")).collect();
        let label = r
            .true_label
            .map(|l| l.to_string())
            .unwrap_or_default();
        writeln!(w, "{},{}", xs.join(","), label)?;
    }
    Ok(())
}

fn data_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Data {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Read a stream written by [`write_stream_csv`].  Comment lines starting
/// with `#`, blank lines, and a leading header row are skipped; every data
/// row must have the same number of feature columns plus a `±1` label.
pub fn read_stream_csv(path: &Path) -> Result<Vec<StreamRecord>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    let mut dim = None;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(data_err(path, lineno, "expected at least one feature and a label"));
        }
        if fields[0].parse::<f64>().is_err() && out.is_empty() && dim.is_none() {
            // Header row.
            dim = Some(fields.len() - 1);
            continue;
        }
        if let Some(d) = dim {
            if fields.len() != d + 1 {
                return Err(data_err(
                    path,
                    lineno,
                    format!("expected {} columns, found {}", d + 1, fields.len()),
                ));
            }
        } else {
            dim = Some(fields.len() - 1);
        }
        let d = fields.len() - 1;
        let mut x = DVector::zeros(d);
        for (i, f) in fields[..d].iter().enumerate() {
            x[i] = f.parse::<f64>().map_err(|_| {
                data_err(path, lineno, format!("bad float in column {}: {f:?}", i + 1))
            })?;
        }
        let label: i8 = fields[d]
            .trim_start_matches('+')
            .parse()
            .map_err(|_| data_err(path, lineno, format!("bad label {:?}", fields[d])))?;
        out.push(
            StreamRecord::labeled(x, label)
                .map_err(|e| data_err(path, lineno, e.to_string()))?,
        );
    }
    Ok(out)
}

const VEHICLE_DIM: usize = 18;
const VEHICLE_CLASSES: [&str; 4] = ["opel", "saab", "bus", "van"];

/// Load the vehicle-silhouette dataset: 18 numeric features followed by a
/// class token per line (comma- or whitespace-separated).  `van` rows are
/// labeled anomalous (+1), the other three classes normal (−1).
pub fn load_vehicle(path: &Path) -> Result<Vec<StreamRecord>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed
            .split([',', ' ', '\t'])
            .filter(|s| !s.is_empty())
            .collect();
        if out.is_empty() && fields[0].parse::<f64>().is_err() && lineno == 1 {
            continue; // header row
        }
        if fields.len() != VEHICLE_DIM + 1 {
            return Err(data_err(
                path,
                lineno,
                format!("expected {} fields, found {}", VEHICLE_DIM + 1, fields.len()),
            ));
        }
        let mut x = DVector::zeros(VEHICLE_DIM);
        for (i, f) in fields[..VEHICLE_DIM].iter().enumerate() {
            x[i] = f.parse::<f64>().map_err(|_| {
                data_err(path, lineno, format!("bad feature in column {}: {f:?}", i + 1))
            })?;
        }
        let class = fields[VEHICLE_DIM].to_ascii_lowercase();
        if !VEHICLE_CLASSES.contains(&class.as_str()) {
            return Err(data_err(path, lineno, format!("unknown class {class:?}")));
        }
        let label = if class == "van" { 1 } else { -1 };
        out.push(StreamRecord::labeled(x, label).expect("valid label"));
    }
    Ok(out)
}
