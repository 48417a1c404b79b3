//! Reciprocal frequency-selective channel model.
//!
//! The true per-channel RSS vector `c` is multivariate Normal. Alice and Bob
//! observe `c` plus independent per-party noise; Eve observes an independent
//! draw from the same distribution. Traces of integer RSS samples can be
//! synthesized from a model and a model can be fitted back from a trace.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

use crate::error::{Error, Result};
use crate::quantizer::MetricSpace;
use crate::rng::{self, Rng};

/// Std. dev. of the per-sample jitter added before rounding to integer dBm.
pub const SAMPLE_JITTER_DB: f64 = 0.5;

/// Ridge added to a fitted covariance diagonal when it is not positive definite.
pub const PD_RIDGE: f64 = 1e-9;

const SYMMETRY_TOL: f64 = 1e-9;

/// Multivariate Normal RSS model plus the reciprocity noise level.
///
/// `noise_sigma` is the std. dev. of the Alice-Bob difference of mean
/// observations; each party carries half of its variance.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelModel {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    noise_sigma: f64,
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    n: usize,
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
    noise_sigma: f64,
}

impl ChannelModel {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, noise_sigma: f64) -> Result<Self> {
        let n = mean.len();
        if n == 0 {
            return Err(Error::InvalidParameter(
                "model needs at least one channel".into(),
            ));
        }
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::InvalidParameter(format!(
                "covariance is {}x{}, expected {n}x{n}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if !noise_sigma.is_finite() || noise_sigma < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "noise_sigma must be finite and non-negative, got {noise_sigma}"
            )));
        }
        check_symmetric(&cov)?;
        Ok(Self {
            mean,
            cov,
            noise_sigma,
        })
    }

    /// Stationary model with covariance `variance * rho^|i-j|`.
    pub fn toeplitz(
        n: usize,
        mean: f64,
        variance: f64,
        rho: f64,
        noise_sigma: f64,
    ) -> Result<Self> {
        Self::new(
            DVector::from_element(n, mean),
            exponential_toeplitz(n, variance, rho),
            noise_sigma,
        )
    }

    pub fn n(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn with_noise_sigma(&self, noise_sigma: f64) -> Result<Self> {
        Self::new(self.mean.clone(), self.cov.clone(), noise_sigma)
    }

    pub fn sampler(&self) -> Result<ChannelSampler> {
        Ok(ChannelSampler {
            mvn: MvnSampler::new(self.mean.clone(), &self.cov)?,
            party_sigma: self.noise_sigma / std::f64::consts::SQRT_2,
        })
    }

    pub fn to_json(&self) -> String {
        let n = self.n();
        let doc = ModelJson {
            n,
            mean: self.mean.iter().copied().collect(),
            cov: (0..n)
                .map(|i| self.cov.row(i).iter().copied().collect())
                .collect(),
            noise_sigma: self.noise_sigma,
        };
        serde_json::to_string_pretty(&doc).expect("model values serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ModelJson = serde_json::from_str(s)?;
        if doc.mean.len() != doc.n
            || doc.cov.len() != doc.n
            || doc.cov.iter().any(|r| r.len() != doc.n)
        {
            return Err(Error::Data(format!(
                "model JSON shapes do not match n={}",
                doc.n
            )));
        }
        let cov = DMatrix::from_fn(doc.n, doc.n, |i, j| doc.cov[i][j]);
        Self::new(DVector::from_vec(doc.mean), cov, doc.noise_sigma)
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::InvalidParameter(format!(
                    "covariance is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

pub fn exponential_toeplitz(n: usize, variance: f64, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| variance * rho.powi(i.abs_diff(j) as i32))
}

/// Draws from `N(mean, cov)` through a square-root factor of `cov`.
///
/// Positive definite matrices use the Cholesky factor; semi-definite ones
/// fall back to `V sqrt(max(L, 0))` from the eigendecomposition.
#[derive(Debug, Clone)]
pub struct MvnSampler {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl MvnSampler {
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let factor = match cov.clone().cholesky() {
            Some(chol) => chol.l(),
            None => {
                let eig = SymmetricEigen::new(cov.clone());
                let min = eig.eigenvalues.min();
                let scale = cov.amax().max(1.0);
                if min < -1e-9 * scale {
                    return Err(Error::NotPositiveSemiDefinite(min));
                }
                let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
                &eig.eigenvectors * DMatrix::from_diagonal(&roots)
            }
        };
        Ok(Self { mean, factor })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample(&self, rng: &mut Rng) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        &self.mean + &self.factor * z
    }
}

/// One draw of the channel: true state and the three parties' observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub c: DVector<f64>,
    pub x_alice: DVector<f64>,
    pub x_bob: DVector<f64>,
    pub x_eve: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct ChannelSampler {
    mvn: MvnSampler,
    party_sigma: f64,
}

impl ChannelSampler {
    pub fn n(&self) -> usize {
        self.mvn.dim()
    }

    pub fn realization(&self, rng: &mut Rng) -> ChannelRealization {
        let c = self.mvn.sample(rng);
        let noise = |rng: &mut Rng| {
            DVector::from_fn(self.n(), |_, _| {
                let z: f64 = StandardNormal.sample(rng);
                self.party_sigma * z
            })
        };
        let x_alice = &c + noise(rng);
        let x_bob = &c + noise(rng);
        let x_eve = self.mvn.sample(rng);
        ChannelRealization {
            c,
            x_alice,
            x_bob,
            x_eve,
        }
    }
}

pub fn sample_realization(model: &ChannelModel, seed: u64) -> Result<ChannelRealization> {
    let mut rng = rng::stream(seed, 0);
    Ok(model.sampler()?.realization(&mut rng))
}

/// `k` integer RSS samples whose mean is `observation` rounded to the
/// nearest `1/k` dB.
///
/// Each sample is `round(observation + jitter)`; the rounded samples are then
/// nudged one dB at a time, largest rounding residual first, until their sum
/// hits `round(k * observation)`. Samples stay inside the metric space.
pub fn synthesize_samples(
    observation: f64,
    k: usize,
    space: MetricSpace,
    rng: &mut Rng,
) -> Vec<i32> {
    let jitter = Normal::new(0.0, SAMPLE_JITTER_DB).expect("positive jitter");
    let (lo, hi) = (space.mu_min, space.mu_max);
    let raw: Vec<f64> = (0..k).map(|_| observation + jitter.sample(rng)).collect();
    let mut samples: Vec<i32> = raw
        .iter()
        .map(|&r| (r.round() as i32).clamp(lo, hi))
        .collect();
    let target = ((k as f64 * observation).round() as i64)
        .clamp(i64::from(lo) * k as i64, i64::from(hi) * k as i64);
    let mut deficit = target - samples.iter().map(|&s| i64::from(s)).sum::<i64>();
    while deficit != 0 {
        let up = deficit > 0;
        let pick = (0..k)
            .filter(|&j| if up { samples[j] < hi } else { samples[j] > lo })
            .max_by(|&a, &b| {
                let ra = raw[a] - f64::from(samples[a]);
                let rb = raw[b] - f64::from(samples[b]);
                let (ra, rb) = if up { (ra, rb) } else { (-ra, -rb) };
                ra.total_cmp(&rb).then(b.cmp(&a))
            });
        let Some(j) = pick else { break };
        samples[j] += if up { 1 } else { -1 };
        deficit += if up { -1 } else { 1 };
    }
    samples
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Party {
    Alice,
    Bob,
}

/// One CSV row: `position,channel,party,sample,rss_dbm`, all indices 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub position: u32,
    pub channel: u32,
    pub party: Party,
    pub sample: u32,
    pub rss_dbm: i32,
}

pub const TRACE_HEADER: &str = "position,channel,party,sample,rss_dbm";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RssTrace {
    pub rows: Vec<TraceRow>,
}

/// Per-party integer samples of one position, indexed `[channel][sample]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionSamples {
    pub position: u32,
    pub alice: Vec<Vec<i32>>,
    pub bob: Vec<Vec<i32>>,
}

impl PositionSamples {
    pub fn alice_means(&self) -> Vec<f64> {
        channel_means(&self.alice)
    }

    pub fn bob_means(&self) -> Vec<f64> {
        channel_means(&self.bob)
    }
}

pub fn channel_means(samples: &[Vec<i32>]) -> Vec<f64> {
    samples
        .iter()
        .map(|s| s.iter().map(|&v| f64::from(v)).sum::<f64>() / s.len() as f64)
        .collect()
}

impl RssTrace {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .has_headers(false)
            .from_writer(writer);
        w.write_record(TRACE_HEADER.split(','))?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
        if header.join(",") != TRACE_HEADER {
            return Err(Error::Data(format!(
                "trace header is {:?}, expected {TRACE_HEADER:?}",
                header.join(",")
            )));
        }
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<TraceRow>, _>>()?;
        Ok(Self { rows })
    }

    /// Groups rows by position and checks that every position carries the
    /// same `n` channels and `k` samples for both parties.
    pub fn positions(&self) -> Result<Vec<PositionSamples>> {
        type Cell = BTreeMap<u32, i32>;
        let mut grouped: BTreeMap<u32, BTreeMap<(Party, u32), Cell>> = BTreeMap::new();
        for row in &self.rows {
            if row.channel == 0 || row.sample == 0 {
                return Err(Error::Data(format!("indices are 1-based, got {row:?}")));
            }
            let prev = grouped
                .entry(row.position)
                .or_default()
                .entry((row.party, row.channel))
                .or_default()
                .insert(row.sample, row.rss_dbm);
            if prev.is_some() {
                return Err(Error::Data(format!("duplicate sample {row:?}")));
            }
        }
        let mut shape: Option<(u32, usize)> = None;
        let mut out = Vec::with_capacity(grouped.len());
        for (position, cells) in grouped {
            let n = cells.keys().map(|&(_, ch)| ch).max().unwrap_or(0);
            let mut alice = Vec::with_capacity(n as usize);
            let mut bob = Vec::with_capacity(n as usize);
            for party in [Party::Alice, Party::Bob] {
                for ch in 1..=n {
                    let cell = cells.get(&(party, ch)).ok_or_else(|| {
                        Error::Data(format!("position {position} lacks {party:?} channel {ch}"))
                    })?;
                    let k = cell.len();
                    if cell.keys().copied().ne(1..=k as u32) {
                        return Err(Error::Data(format!(
                            "position {position} channel {ch} sample indices are not 1..={k}"
                        )));
                    }
                    match shape {
                        None => shape = Some((n, k)),
                        Some(s) if s != (n, k) => return Err(Error::Data(format!(
                            "position {position} has {n} channels x {k} samples, expected {} x {}",
                            s.0, s.1
                        ))),
                        _ => {}
                    }
                    let values = cell.values().copied().collect();
                    match party {
                        Party::Alice => alice.push(values),
                        Party::Bob => bob.push(values),
                    }
                }
            }
            out.push(PositionSamples {
                position,
                alice,
                bob,
            });
        }
        Ok(out)
    }
}

/// Emits `positions` independent realizations with `k` integer samples per
/// channel and party. Deterministic under `seed`.
pub fn synthesize_trace(
    model: &ChannelModel,
    positions: usize,
    k: usize,
    seed: u64,
) -> Result<RssTrace> {
    synthesize_trace_in(model, MetricSpace::default(), positions, k, seed)
}

pub fn synthesize_trace_in(
    model: &ChannelModel,
    space: MetricSpace,
    positions: usize,
    k: usize,
    seed: u64,
) -> Result<RssTrace> {
    if k == 0 {
        return Err(Error::InvalidParameter(
            "need at least one sample per channel".into(),
        ));
    }
    let sampler = model.sampler()?;
    let n = model.n();
    let mut rows = Vec::with_capacity(positions * n * k * 2);
    for pos in 0..positions {
        let mut rng = rng::substream(seed, rng::TRACE_STREAMS, pos as u64);
        let real = sampler.realization(&mut rng);
        for (party, obs) in [(Party::Alice, &real.x_alice), (Party::Bob, &real.x_bob)] {
            for ch in 0..n {
                let samples = synthesize_samples(obs[ch], k, space, &mut rng);
                rows.extend(
                    samples
                        .into_iter()
                        .enumerate()
                        .map(|(j, rss_dbm)| TraceRow {
                            position: pos as u32 + 1,
                            channel: ch as u32 + 1,
                            party,
                            sample: j as u32 + 1,
                            rss_dbm,
                        }),
                );
            }
        }
    }
    Ok(RssTrace { rows })
}

#[derive(Debug, Clone)]
pub struct FittedModel {
    pub model: ChannelModel,
    pub positions: usize,
    pub samples_per_channel: usize,
    /// Set when the position means carry no variation (Σ̂ = 0).
    pub degenerate: bool,
    pub warnings: Vec<String>,
}

/// Maximum-likelihood style fit from a trace.
///
/// Each position contributes the average of Alice's and Bob's mean vectors.
/// The covariance uses the unbiased `1/(N-1)` estimator over those vectors.
/// `noise_sigma` is the root mean square of all per-channel Alice-Bob mean
/// differences, taking their mean as zero.
pub fn fit_model(trace: &RssTrace) -> Result<FittedModel> {
    let positions = trace.positions()?;
    if positions.len() < 2 {
        return Err(Error::Data(format!(
            "fitting needs at least 2 positions, trace has {}",
            positions.len()
        )));
    }
    let n = positions[0].alice.len();
    let k = positions[0].alice[0].len();
    let count = positions.len();

    let mut vectors = Vec::with_capacity(count);
    let mut sq_diff = 0.0;
    for p in &positions {
        let a = p.alice_means();
        let b = p.bob_means();
        sq_diff += a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        vectors.push(DVector::from_iterator(
            n,
            a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)),
        ));
    }
    let noise_sigma = (sq_diff / (count * n) as f64).sqrt();
    let mean = vectors.iter().fold(DVector::zeros(n), |acc, v| acc + v) / count as f64;
    let mut cov = DMatrix::zeros(n, n);
    for v in &vectors {
        let d = v - &mean;
        cov += &d * d.transpose();
    }
    cov /= (count - 1) as f64;

    let mut warnings = Vec::new();
    let degenerate = cov.iter().all(|&x| x == 0.0);
    if degenerate {
        warnings.push("position means are constant; fitted covariance is zero".to_owned());
    }
    Ok(FittedModel {
        model: ChannelModel::new(mean, cov, noise_sigma)?,
        positions: count,
        samples_per_channel: k,
        degenerate,
        warnings,
    })
}

/// Returns `cov` unchanged when it is positive definite, otherwise adds
/// [`PD_RIDGE`] to the diagonal. The flag reports whether the ridge was used.
pub fn repair_pd(cov: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if cov.clone().cholesky().is_some() {
        return (cov.clone(), false);
    }
    let n = cov.nrows();
    (cov + DMatrix::identity(n, n) * PD_RIDGE, true)
}

/// Filliben's approximation to the medians of uniform order statistics.
pub fn filliben_positions(n: usize) -> Vec<f64> {
    let last = 0.5f64.powf(1.0 / n as f64);
    (1..=n)
        .map(|i| match i {
            1 => 1.0 - last,
            i if i == n => last,
            i => (i as f64 - 0.3175) / (n as f64 + 0.365),
        })
        .collect()
}

/// Probability plot correlation coefficient against the standard Normal.
pub fn normality_score(samples: &[f64]) -> Result<f64> {
    if samples.len() < 10 {
        return Err(Error::InvalidParameter(format!(
            "normality score needs at least 10 samples, got {}",
            samples.len()
        )));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let std_normal = NormalDist::standard();
    let quantiles: Vec<f64> = filliben_positions(sorted.len())
        .into_iter()
        .map(|m| std_normal.inverse_cdf(m))
        .collect();
    pearson(&sorted, &quantiles)
        .ok_or_else(|| Error::Data("constant samples have no probability-plot correlation".into()))
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Probability that every channel's Alice-Bob mean deviation stays within
/// its tolerance: `prod_i (2 Phi(t_i / sigma) - 1)`.
pub fn predict_success(tolerances: &[f64], noise_sigma: f64) -> f64 {
    if noise_sigma == 0.0 {
        return if tolerances.iter().all(|&t| t > 0.0) {
            1.0
        } else {
            0.0
        };
    }
    let phi = NormalDist::standard();
    tolerances
        .iter()
        .map(|&t| 2.0 * phi.cdf(t / noise_sigma) - 1.0)
        .product()
}

pub fn predict_success_uniform(tolerance: f64, noise_sigma: f64, n: usize) -> f64 {
    predict_success(&vec![tolerance; n], noise_sigma)
}

/// Draws from a Rayleigh distribution with scale `sigma` by inversion.
pub fn rayleigh(sigma: f64, rng: &mut Rng) -> f64 {
    let u: f64 = rng.random();
    sigma * (-2.0 * (1.0 - u).ln()).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sixteen(noise: f64) -> ChannelModel {
        ChannelModel::toeplitz(16, -70.0, 16.0, 0.7, noise).unwrap()
    }

    #[test]
    fn rejects_bad_models() {
        let mean = DVector::from_element(2, -70.0);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(ChannelModel::new(mean.clone(), asym, 0.5).is_err());
        let ok = DMatrix::identity(2, 2);
        assert!(ChannelModel::new(mean.clone(), ok.clone(), -0.1).is_err());
        assert!(ChannelModel::new(DVector::zeros(3), ok.clone(), 0.1).is_err());
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let m = ChannelModel::new(mean, indefinite, 0.1).unwrap();
        assert!(matches!(
            m.sampler(),
            Err(Error::NotPositiveSemiDefinite(_))
        ));
    }

    #[test]
    fn noiseless_parties_agree() {
        let r = sample_realization(&sixteen(0.0), 3).unwrap();
        assert_eq!(r.x_alice, r.x_bob);
        assert_eq!(r.x_alice, r.c);
    }

    #[test]
    fn zero_covariance_is_deterministic() {
        let m =
            ChannelModel::new(DVector::from_element(4, -70.0), DMatrix::zeros(4, 4), 0.0).unwrap();
        for seed in 0..5 {
            let r = sample_realization(&m, seed).unwrap();
            assert_eq!(r.c, DVector::from_element(4, -70.0));
            assert_eq!(r.x_eve, r.c);
        }
    }

    #[test]
    fn party_difference_has_noise_sigma() {
        let sampler = sixteen(0.503).sampler().unwrap();
        let mut rng = rng::stream(11, 0);
        let mut sq = 0.0;
        let mut count = 0usize;
        for _ in 0..100_000 / 16 {
            let r = sampler.realization(&mut rng);
            sq += (&r.x_alice - &r.x_bob).norm_squared();
            count += 16;
        }
        let sd = (sq / count as f64).sqrt();
        assert!((sd / 0.503 - 1.0).abs() < 0.01, "sd {sd}");
    }

    #[test]
    fn eve_is_decorrelated_and_parties_are_not() {
        let m = ChannelModel::toeplitz(1, -70.0, 9.0, 0.0, 0.05).unwrap();
        let sampler = m.sampler().unwrap();
        let mut rng = rng::stream(5, 0);
        let (mut c, mut eve, mut alice) = (vec![], vec![], vec![]);
        for _ in 0..100_000 {
            let r = sampler.realization(&mut rng);
            c.push(r.c[0]);
            eve.push(r.x_eve[0]);
            alice.push(r.x_alice[0]);
        }
        assert!(pearson(&c, &eve).unwrap().abs() < 0.02);
        assert!(pearson(&c, &alice).unwrap() > 0.999);
    }

    #[test]
    fn sample_synthesis_hits_rounded_mean() {
        let mut rng = rng::stream(1, 0);
        let space = MetricSpace::default();
        for obs in [-70.0, -71.43, -69.97, -55.5, -40.2, -104.6] {
            let s = synthesize_samples(obs, 16, space, &mut rng);
            let sum: i32 = s.iter().sum();
            let target = ((16.0 * obs).round() as i32).clamp(-104 * 16, -40 * 16);
            assert_eq!(sum, target, "obs {obs}");
            assert!(s.iter().all(|&v| (-104..=-40).contains(&v)));
        }
        let one = synthesize_samples(-71.6, 1, space, &mut rng);
        assert_eq!(one, vec![-72]);
    }

    #[test]
    fn trace_is_deterministic_and_round_trips() {
        let m = ChannelModel::toeplitz(3, -70.0, 4.0, 0.5, 0.5).unwrap();
        let a = synthesize_trace(&m, 5, 4, 9).unwrap();
        let b = synthesize_trace(&m, 5, 4, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 5 * 3 * 4 * 2);
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("position,channel,party,sample,rss_dbm\n1,1,alice,1,"));
        assert!(!text.contains('\r'));
        assert_eq!(RssTrace::read_csv(&buf[..]).unwrap(), a);
        let positions = a.positions().unwrap();
        assert_eq!(positions.len(), 5);
        for p in &positions {
            for m in p.alice_means() {
                assert_eq!((m * 4.0).fract(), 0.0);
            }
        }
    }

    #[test]
    fn empty_trace_is_header_only() {
        let m = ChannelModel::toeplitz(2, -70.0, 4.0, 0.5, 0.5).unwrap();
        let t = synthesize_trace(&m, 0, 16, 1).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "position,channel,party,sample,rss_dbm\n"
        );
    }

    #[test]
    fn malformed_traces_are_rejected() {
        let bad_header = "pos,channel,party,sample,rss_dbm\n";
        assert!(RssTrace::read_csv(bad_header.as_bytes()).is_err());
        let missing_bob = "position,channel,party,sample,rss_dbm\n1,1,alice,1,-70\n";
        let t = RssTrace::read_csv(missing_bob.as_bytes()).unwrap();
        assert!(t.positions().is_err());
        let ragged = "position,channel,party,sample,rss_dbm\n1,1,alice,1,-70\n1,1,bob,1,-70\n\
                      2,1,alice,1,-70\n2,1,alice,2,-70\n2,1,bob,1,-70\n2,1,bob,2,-70\n";
        let t = RssTrace::read_csv(ragged.as_bytes()).unwrap();
        assert!(t.positions().is_err());
    }

    fn constant_trace(positions: u32) -> RssTrace {
        let mut rows = vec![];
        for position in 1..=positions {
            for party in [Party::Alice, Party::Bob] {
                for channel in 1..=2 {
                    rows.push(TraceRow {
                        position,
                        channel,
                        party,
                        sample: 1,
                        rss_dbm: -60,
                    });
                }
            }
        }
        RssTrace { rows }
    }

    #[test]
    fn constant_trace_fits_zero_covariance() {
        let fit = fit_model(&constant_trace(5)).unwrap();
        assert!(fit.degenerate);
        assert!(!fit.warnings.is_empty());
        assert_eq!(fit.model.mean().as_slice(), &[-60.0, -60.0]);
        assert!(fit.model.cov().iter().all(|&x| x == 0.0));
        assert_eq!(fit.model.noise_sigma(), 0.0);
        assert!(fit_model(&constant_trace(1)).is_err());
    }

    #[test]
    fn two_point_variance() {
        let rows = [(1, -60), (2, -64)]
            .into_iter()
            .flat_map(|(position, rss_dbm)| {
                [Party::Alice, Party::Bob].map(|party| TraceRow {
                    position,
                    channel: 1,
                    party,
                    sample: 1,
                    rss_dbm,
                })
            })
            .collect();
        let fit = fit_model(&RssTrace { rows }).unwrap();
        // mean -62, deviations +-2, unbiased variance (4 + 4) / 1
        assert_eq!(fit.model.mean()[0], -62.0);
        assert_eq!(fit.model.cov()[(0, 0)], 8.0);
    }

    #[test]
    fn model_json_round_trip() {
        let m = sixteen(0.503);
        let back = ChannelModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert!(ChannelModel::from_json(
            r#"{"n":2,"mean":[1],"cov":[[1,0],[0,1]],"noise_sigma":0.1}"#
        )
        .is_err());
    }

    #[test]
    fn normality_scores() {
        let mut rng = rng::stream(2, 0);
        let normal: Vec<f64> = (0..4000).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert!(normality_score(&normal).unwrap() >= 0.99);

        let cauchy = rand_distr::Cauchy::new(0.0, 1.0).unwrap();
        let heavy: Vec<f64> = (0..4000).map(|_| cauchy.sample(&mut rng)).collect();
        assert!(normality_score(&heavy).unwrap() < 0.99);

        let linear: Vec<f64> = filliben_positions(50)
            .into_iter()
            .map(|m| 3.0 * NormalDist::standard().inverse_cdf(m) - 2.0)
            .collect();
        assert!((normality_score(&linear).unwrap() - 1.0).abs() < 1e-12);

        assert!(normality_score(&[1.0; 20]).is_err());
        assert!(normality_score(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn rayleigh_scores_below_normal() {
        let mut rng = rng::stream(4, 0);
        let normal: Vec<f64> = (0..4000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let skewed: Vec<f64> = (0..4000).map(|_| rayleigh(1.0, &mut rng)).collect();
        assert!(normality_score(&skewed).unwrap() < normality_score(&normal).unwrap());
    }

    #[test]
    fn success_prediction() {
        assert!((predict_success(&[1e9; 16], 0.503) - 1.0).abs() < 1e-12);
        let phi = NormalDist::standard();
        let t = 0.7 * phi.inverse_cdf(0.75);
        assert!((predict_success(&[t], 0.7) - 0.5).abs() < 1e-12);
        let p = predict_success_uniform(1.0, 0.503, 16);
        assert!((p - 0.4645).abs() < 1e-3, "{p}");
        assert_eq!(predict_success(&[1.0, 2.0], 0.0), 1.0);
    }

    #[test]
    fn success_prediction_is_monotone() {
        let mut last = 0.0;
        for i in 1..40 {
            let p = predict_success_uniform(i as f64 * 0.1, 0.5, 16);
            assert!(p >= last);
            last = p;
        }
        let mut last = 1.0;
        for i in 1..40 {
            let p = predict_success_uniform(1.0, i as f64 * 0.1, 16);
            assert!(p <= last);
            last = p;
        }
    }
}
