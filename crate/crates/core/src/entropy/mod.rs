//! Secrecy measures for quantized channel outcomes.
//!
//! Entropies are reported in bits. The joint entropy of all channels is
//! estimated three ways: the sum of marginals (exact only for independent
//! channels), the plug-in estimate over full level vectors (needs far more
//! samples than exist for many channels), and the T-complexity estimate of
//! the concatenated T-string, which picks up inter-channel dependence without
//! a model.

pub mod tcomplexity;

use std::collections::HashMap;
use std::hash::Hash;
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::channel::{synthesize_trace_in, ChannelModel, PositionSamples, RssTrace};
use crate::error::{Error, Result};
use crate::quantizer::{MetricSpace, QuantizationScheme};

pub use tcomplexity::{t_decompose, t_information_bits, TDecomposition};

/// First character of the T-string alphabet; level index `i` maps to `0x3F + i`.
pub const TSTRING_BASE: u8 = 0x3F;
/// Level indices that fit in printable ASCII above the base (`'?'..='~'`).
pub const TSTRING_SYMBOLS: usize = (0x7E - TSTRING_BASE as usize) + 1;

fn plugin<T: Eq + Hash>(values: impl IntoIterator<Item = T>) -> (f64, usize, usize) {
    let mut counts: HashMap<T, usize> = HashMap::new();
    let mut total = 0usize;
    for v in values {
        *counts.entry(v).or_default() += 1;
        total += 1;
    }
    let n = total as f64;
    let mut sorted: Vec<usize> = counts.values().copied().collect();
    sorted.sort_unstable();
    let h = sorted
        .iter()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>();
    (h.max(0.0), total, counts.len())
}

/// Plug-in Shannon entropy of one channel's quantized outcomes.
pub fn marginal_entropy<T: Eq + Hash + Copy>(outcomes: &[T]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::InvalidParameter(
            "marginal entropy of no outcomes".into(),
        ));
    }
    Ok(plugin(outcomes.iter().copied()).0)
}

/// Sum of marginal entropies, the joint entropy if channels were independent
/// and an upper bound otherwise.
pub fn joint_entropy_independent(per_channel: &[f64]) -> f64 {
    per_channel.iter().sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PluginEstimate {
    pub bits: f64,
    pub samples: usize,
    pub distinct: usize,
    /// Fewer than ten samples per distinct observed outcome vector.
    pub undersampled: bool,
}

/// Plug-in entropy over the empirical distribution of whole outcome vectors.
pub fn joint_entropy_plugin<T: Eq + Hash + Clone>(vectors: &[Vec<T>]) -> PluginEstimate {
    let (bits, samples, distinct) = plugin(vectors.iter().cloned());
    PluginEstimate {
        bits,
        samples,
        distinct,
        undersampled: samples < 10 * distinct,
    }
}

/// Maps level-index vectors to a T-string, one character per channel, vectors
/// concatenated in order.
pub fn tstring_encode(vectors: &[Vec<usize>]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(vectors.iter().map(Vec::len).sum());
    for v in vectors {
        for &index in v {
            if index >= TSTRING_SYMBOLS {
                return Err(Error::AlphabetOverflow {
                    index,
                    max: TSTRING_SYMBOLS,
                });
            }
            out.push(TSTRING_BASE + index as u8);
        }
    }
    Ok(out)
}

pub fn tstring_decode(text: &[u8], n: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 || !text.len().is_multiple_of(n) {
        return Err(Error::Data(format!(
            "T-string of length {} does not split into {n}-channel vectors",
            text.len()
        )));
    }
    text.chunks(n)
        .map(|chunk| {
            chunk
                .iter()
                .map(|&c| match c {
                    c if (TSTRING_BASE..=0x7E).contains(&c) => Ok(usize::from(c - TSTRING_BASE)),
                    c => Err(Error::Data(format!(
                        "byte {c:#04x} is outside the T-string alphabet"
                    ))),
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TComplexityEstimate {
    /// T-complexity `C_T` in taits.
    pub complexity: f64,
    /// Entropy of the whole string in bits.
    pub bits: f64,
}

pub fn t_complexity(text: &[u8]) -> TComplexityEstimate {
    let complexity = t_decompose(text).complexity;
    TComplexityEstimate {
        complexity,
        bits: t_information_bits(complexity),
    }
}

/// Differential entropy of `N(mu, cov)` in bits: `1/2 log2((2 pi e)^n det cov)`.
pub fn mvn_differential_entropy(cov: &DMatrix<f64>) -> Result<f64> {
    let n = cov.nrows();
    if n == 0 || cov.ncols() != n {
        return Err(Error::InvalidParameter(format!(
            "covariance must be square and non-empty, got {}x{}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    let Some(chol) = cov.clone().cholesky() else {
        let min = SymmetricEigen::new(cov.clone()).eigenvalues.min();
        return Err(Error::NotPositiveDefinite(min));
    };
    let log2_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.log2()).sum();
    Ok(0.5 * (n as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E).log2() + log2_det))
}

/// `1/2 log2(2 pi e)`, the entropy of a unit-variance Normal in bits.
pub fn unit_normal_entropy() -> f64 {
    0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).log2()
}

/// Entropy figures for one tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub tolerance: f64,
    pub per_channel: Vec<f64>,
    pub joint_independent: f64,
    pub joint_plugin: f64,
    /// Joint entropy per position from the T-complexity of the T-string.
    pub joint_tcomplexity: f64,
    pub samples: usize,
    pub distinct: usize,
    pub undersampled: bool,
}

impl EntropyReport {
    pub fn per_channel_mean(&self) -> f64 {
        if self.per_channel.is_empty() {
            return 0.0;
        }
        self.per_channel.iter().sum::<f64>() / self.per_channel.len() as f64
    }
}

pub const REPORT_HEADER: &str =
    "tolerance,per_channel_mean,joint_independent,joint_plugin,joint_tcomplexity,samples,undersampled_flag";

pub fn write_report_csv<W: Write>(reports: &[EntropyReport], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(REPORT_HEADER.split(','))?;
    for r in reports {
        w.write_record([
            r.tolerance.to_string(),
            format!("{:.6}", r.per_channel_mean()),
            format!("{:.6}", r.joint_independent),
            format!("{:.6}", r.joint_plugin),
            format!("{:.6}", r.joint_tcomplexity),
            r.samples.to_string(),
            r.undersampled.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Level indices of each mean vector under `scheme`.
pub fn quantize_vectors(means: &[Vec<f64>], scheme: &QuantizationScheme) -> Vec<Vec<usize>> {
    means
        .iter()
        .map(|v| v.iter().map(|&mu| scheme.level_index(mu)).collect())
        .collect()
}

/// Entropy report of mean vectors quantized at `tolerance`.
pub fn entropy_report(
    means: &[Vec<f64>],
    space: MetricSpace,
    tolerance: f64,
) -> Result<EntropyReport> {
    let n = means.first().map_or(0, Vec::len);
    if n == 0 || means.iter().any(|v| v.len() != n) {
        return Err(Error::Data(
            "entropy analysis needs equally sized, non-empty mean vectors".into(),
        ));
    }
    let scheme = QuantizationScheme::new(space, tolerance)?;
    let vectors = quantize_vectors(means, &scheme);
    let per_channel = (0..n)
        .map(|ch| marginal_entropy(&vectors.iter().map(|v| v[ch]).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let joint = joint_entropy_plugin(&vectors);
    let text = tstring_encode(&vectors)?;
    let tc = t_complexity(&text);
    Ok(EntropyReport {
        tolerance,
        joint_independent: joint_entropy_independent(&per_channel),
        per_channel,
        joint_plugin: joint.bits,
        joint_tcomplexity: tc.bits / vectors.len() as f64,
        samples: joint.samples,
        distinct: joint.distinct,
        undersampled: joint.undersampled,
    })
}

pub fn entropy_curve(
    means: &[Vec<f64>],
    space: MetricSpace,
    grid: &[f64],
) -> Result<Vec<EntropyReport>> {
    grid.iter()
        .map(|&t| entropy_report(means, space, t))
        .collect()
}

/// The default tolerance grid, 0.4 dB to 2.0 dB in 0.1 dB steps.
pub fn default_grid() -> Vec<f64> {
    (4..=20).map(|i| f64::from(i) / 10.0).collect()
}

/// Alice's per-position mean vectors, the values she quantizes.
pub fn alice_mean_vectors(positions: &[PositionSamples]) -> Vec<Vec<f64>> {
    positions.iter().map(PositionSamples::alice_means).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    pub tolerance: f64,
    /// T-complexity joint entropy per position of the measured trace.
    pub empirical_bits: f64,
    /// Same estimator on an equally sized trace synthesized from the model.
    pub model_bits: f64,
    pub independent_empirical_bits: f64,
    pub independent_model_bits: f64,
}

/// Dependent-channel entropy curves of a trace and of its model.
pub fn model_vs_empirical(
    model: &ChannelModel,
    trace: &RssTrace,
    space: MetricSpace,
    grid: &[f64],
    seed: u64,
) -> Result<Vec<ModelComparison>> {
    let positions = trace.positions()?;
    let Some(first) = positions.first() else {
        return Err(Error::Data("trace has no positions".into()));
    };
    if first.alice.len() != model.n() {
        return Err(Error::InvalidParameter(format!(
            "trace has {} channels, model has {}",
            first.alice.len(),
            model.n()
        )));
    }
    let k = first.alice[0].len();
    let synthetic = synthesize_trace_in(model, space, positions.len(), k, seed)?.positions()?;
    let empirical = alice_mean_vectors(&positions);
    let modeled = alice_mean_vectors(&synthetic);
    grid.iter()
        .map(|&t| {
            let e = entropy_report(&empirical, space, t)?;
            let m = entropy_report(&modeled, space, t)?;
            Ok(ModelComparison {
                tolerance: t,
                empirical_bits: e.joint_tcomplexity,
                model_bits: m.joint_tcomplexity,
                independent_empirical_bits: e.joint_independent,
                independent_model_bits: m.joint_independent,
            })
        })
        .collect()
}
