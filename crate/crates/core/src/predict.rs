//! Secrecy scaling predictions from a measured covariance matrix.
//!
//! A covariance over `n0` adjacent channels is extrapolated to `m > n0`
//! channels diagonal by diagonal: every lag keeps the entries it has and
//! fills the missing ones uniformly between the lag's observed minimum and
//! maximum. Wider channel spacing is simulated by keeping every `s`-th
//! channel before extrapolating. The differential entropy of the result is
//! the predicted secrecy.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::entropy::{mvn_differential_entropy, unit_normal_entropy};
use crate::error::{Error, Result};
use crate::rng;

/// Eigenvalue floor applied to extrapolated matrices, in dB².
pub const EIGEN_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Keep the source determinant; each added channel contributes the
    /// entropy of a unit-variance Normal.
    FixedDeterminant,
    /// Lag-wise uniform fill of the missing covariance entries.
    DiagonalUniform,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::FixedDeterminant => "fixed_determinant",
            Method::DiagonalUniform => "diagonal_uniform",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed_determinant" => Ok(Method::FixedDeterminant),
            "diagonal_uniform" => Ok(Method::DiagonalUniform),
            other => Err(Error::InvalidParameter(format!("unknown method {other:?}"))),
        }
    }
}

/// Fill range for lags the source matrix is too small to contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LagFallback {
    /// Continue the decay of the last two observed lags geometrically: lag
    /// `l` uses the last lag's range scaled by `r^(l - last)`, where `r` is
    /// the ratio of the last two lag means clamped to `[0, 1]`. A 1x1 source
    /// has no decay information and fills unobserved lags with zero.
    #[default]
    Geometric,
    /// Reuse the range of the highest observed lag unchanged.
    HighestLag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtrapolationConfig {
    pub source: DMatrix<f64>,
    pub target: usize,
    pub stride: usize,
    pub replicates: usize,
    pub seed: u64,
    pub fallback: LagFallback,
}

/// Covariance of the channel subset `0, s, 2s, ...`.
pub fn thin_for_spacing(cov: &DMatrix<f64>, stride: usize) -> Result<DMatrix<f64>> {
    if stride == 0 {
        return Err(Error::InvalidParameter("stride must be at least 1".into()));
    }
    let idx: Vec<usize> = (0..cov.nrows()).step_by(stride).collect();
    if idx.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "stride {stride} leaves fewer than two of {} channels",
            cov.nrows()
        )));
    }
    Ok(DMatrix::from_fn(idx.len(), idx.len(), |i, j| {
        cov[(idx[i], idx[j])]
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LagRange {
    min: f64,
    max: f64,
}

impl LagRange {
    fn scaled(self, factor: f64) -> Self {
        Self {
            min: self.min * factor,
            max: self.max * factor,
        }
    }

    fn draw(self, rng: &mut rng::Rng) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..=self.max)
        } else {
            self.min
        }
    }
}

fn lag_ranges(source: &DMatrix<f64>, target: usize, fallback: LagFallback) -> Vec<LagRange> {
    let n = source.nrows();
    let observed: Vec<(LagRange, f64)> = (0..n)
        .map(|lag| {
            let values: Vec<f64> = (0..n - lag).map(|r| source[(r, r + lag)]).collect();
            let min = values.iter().copied().fold(f64::INFINITY, f64::min);
            let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            (LagRange { min, max }, mean)
        })
        .collect();
    let last = n - 1;
    let ratio = if n >= 2 && observed[last - 1].1 > 0.0 {
        (observed[last].1 / observed[last - 1].1).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (0..target)
        .map(|lag| {
            if lag < n {
                return observed[lag].0;
            }
            match fallback {
                LagFallback::HighestLag => observed[last].0,
                LagFallback::Geometric if n == 1 => LagRange { min: 0.0, max: 0.0 },
                LagFallback::Geometric => observed[last].0.scaled(ratio.powi((lag - last) as i32)),
            }
        })
        .collect()
}

/// Clips eigenvalues below [`EIGEN_FLOOR`]. Returns the repaired matrix and
/// the number of clipped eigenvalues.
pub fn clip_eigenvalues(m: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let eig = SymmetricEigen::new(m.clone());
    let clipped = eig.eigenvalues.iter().filter(|&&l| l < EIGEN_FLOOR).count();
    if clipped == 0 {
        return (m.clone(), 0);
    }
    let values = eig.eigenvalues.map(|l| l.max(EIGEN_FLOOR));
    let rebuilt =
        &eig.eigenvectors * DMatrix::from_diagonal(&values) * eig.eigenvectors.transpose();
    let sym = (&rebuilt + rebuilt.transpose()) * 0.5;
    (sym, clipped)
}

/// One extrapolated matrix per replicate, with its clip count.
#[derive(Debug, Clone, PartialEq)]
pub struct Extrapolation {
    pub matrices: Vec<DMatrix<f64>>,
    pub clipped: Vec<usize>,
}

fn check_psd(m: &DMatrix<f64>) -> Result<()> {
    let scale = m.amax().max(1.0);
    let min = SymmetricEigen::new(m.clone()).eigenvalues.min();
    if min < -1e-9 * scale {
        return Err(Error::NotPositiveSemiDefinite(min));
    }
    Ok(())
}

fn extrapolate_one(
    source: &DMatrix<f64>,
    target: usize,
    ranges: &[LagRange],
    rng: &mut rng::Rng,
) -> (DMatrix<f64>, usize) {
    let n = source.nrows();
    let mut out = DMatrix::zeros(target, target);
    for r in 0..target {
        for c in r..target {
            let v = if c < n {
                source[(r, c)]
            } else {
                ranges[c - r].draw(rng)
            };
            out[(r, c)] = v;
            out[(c, r)] = v;
        }
    }
    clip_eigenvalues(&out)
}

/// Extrapolates the (thinned) source to `target` channels, once per replicate.
/// Replicate `j` draws from its own stream, so results do not depend on
/// scheduling.
pub fn extrapolate_covariance(config: &ExtrapolationConfig) -> Result<Extrapolation> {
    let source = thin_source(&config.source, config.stride)?;
    check_psd(&source)?;
    let n = source.nrows();
    if config.target < n {
        return Err(Error::InvalidParameter(format!(
            "target size {} is below the source size {n}",
            config.target
        )));
    }
    let ranges = lag_ranges(&source, config.target, config.fallback);
    let (matrices, clipped) = (0..config.replicates as u64)
        .into_par_iter()
        .map(|j| {
            let mut rng = rng::substream(
                config.seed,
                rng::PREDICT_STREAMS,
                ((config.target as u64) << 24) | j,
            );
            extrapolate_one(&source, config.target, &ranges, &mut rng)
        })
        .unzip();
    Ok(Extrapolation { matrices, clipped })
}

fn thin_source(source: &DMatrix<f64>, stride: usize) -> Result<DMatrix<f64>> {
    if source.nrows() == 0 || source.nrows() != source.ncols() {
        return Err(Error::InvalidParameter(
            "source covariance must be square and non-empty".into(),
        ));
    }
    if stride == 1 {
        Ok(source.clone())
    } else {
        thin_for_spacing(source, stride)
    }
}

/// 2.5 % / 97.5 % percentiles with linear interpolation between order statistics.
pub fn percentile_interval(values: &[f64]) -> (f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    (percentile(&sorted, 0.025), percentile(&sorted, 0.975))
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRow {
    pub method: Method,
    pub channels: usize,
    pub stride: usize,
    pub entropy_mean_bits: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub replicates: usize,
    /// Total eigenvalues clipped over all replicates.
    pub clipped: usize,
}

pub const PROJECTION_HEADER: &str =
    "method,channels,stride,entropy_mean_bits,ci_low,ci_high,replicates";

pub fn write_projection_csv<W: Write>(rows: &[ProjectionRow], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(PROJECTION_HEADER.split(','))?;
    for r in rows {
        w.write_record([
            r.method.name().to_owned(),
            r.channels.to_string(),
            r.stride.to_string(),
            format!("{:.6}", r.entropy_mean_bits),
            format!("{:.6}", r.ci_low),
            format!("{:.6}", r.ci_high),
            r.replicates.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionRequest {
    pub targets: Vec<usize>,
    pub methods: Vec<Method>,
    pub stride: usize,
    pub replicates: usize,
    pub seed: u64,
    pub fallback: LagFallback,
}

/// Differential entropy projections for each target size and method.
pub fn entropy_projection(
    source: &DMatrix<f64>,
    request: &ProjectionRequest,
) -> Result<Vec<ProjectionRow>> {
    let thinned = thin_source(source, request.stride)?;
    let base = mvn_differential_entropy(&thinned)?;
    let n0 = thinned.nrows();
    let mut rows = Vec::new();
    for &method in &request.methods {
        for &m in &request.targets {
            if m < n0 {
                return Err(Error::InvalidParameter(format!(
                    "target {m} is below the {n0} channels left after thinning"
                )));
            }
            let row = match method {
                Method::FixedDeterminant => {
                    let h = base + (m - n0) as f64 * unit_normal_entropy();
                    ProjectionRow {
                        method,
                        channels: m,
                        stride: request.stride,
                        entropy_mean_bits: h,
                        ci_low: h,
                        ci_high: h,
                        replicates: 1,
                        clipped: 0,
                    }
                }
                Method::DiagonalUniform => {
                    let ex = extrapolate_covariance(&ExtrapolationConfig {
                        source: thinned.clone(),
                        target: m,
                        stride: 1,
                        replicates: request.replicates,
                        seed: request.seed,
                        fallback: request.fallback,
                    })?;
                    let (mean, lo, hi) = summarize(&ex)?;
                    ProjectionRow {
                        method,
                        channels: m,
                        stride: request.stride,
                        entropy_mean_bits: mean,
                        ci_low: lo,
                        ci_high: hi,
                        replicates: request.replicates,
                        clipped: ex.clipped.iter().sum(),
                    }
                }
            };
            rows.push(row);
        }
    }
    Ok(rows)
}

fn summarize(ex: &Extrapolation) -> Result<(f64, f64, f64)> {
    if ex.matrices.is_empty() {
        return Err(Error::InvalidParameter(
            "need at least one replicate".into(),
        ));
    }
    let h = ex
        .matrices
        .iter()
        .map(mvn_differential_entropy)
        .collect::<Result<Vec<_>>>()?;
    let mean = h.iter().sum::<f64>() / h.len() as f64;
    let (lo, hi) = percentile_interval(&h);
    Ok((mean, lo, hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub size: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub truth: f64,
    pub covered: bool,
}

/// Predicts the entropy of `full` from each leading `i x i` block and checks
/// whether the 95 % interval contains the true value.
pub fn validate_prediction(
    full: &DMatrix<f64>,
    sizes: &[usize],
    replicates: usize,
    seed: u64,
    fallback: LagFallback,
) -> Result<Vec<ValidationRow>> {
    let m = full.nrows();
    let truth = mvn_differential_entropy(full)?;
    sizes
        .iter()
        .map(|&i| {
            if i == 0 || i > m {
                return Err(Error::InvalidParameter(format!(
                    "sub-matrix size {i} outside 1..={m}"
                )));
            }
            let ex = extrapolate_covariance(&ExtrapolationConfig {
                source: full.view((0, 0), (i, i)).into_owned(),
                target: m,
                stride: 1,
                replicates,
                seed,
                fallback,
            })?;
            let (mean, lo, hi) = summarize(&ex)?;
            let slack = 1e-9 * truth.abs().max(1.0);
            Ok(ValidationRow {
                size: i,
                mean,
                ci_low: lo,
                ci_high: hi,
                truth,
                covered: lo - slack <= truth && truth <= hi + slack,
            })
        })
        .collect()
}
