//! The three-phase Alice/Bob key generation protocol.
//!
//! 1. Sampling: Alice and Bob exchange `k` probe/reply pairs on each of the
//!    `n` channels and average the integer RSS of what they receive.
//! 2. Key generation: Alice quantizes her means, publishes tolerances and
//!    shift tokens; Bob applies the tokens to his own means.
//! 3. Verification: Bob sends `h(secret')`; Alice compares with `h(secret)`.
//!    On mismatch she raises tolerances and redoes key generation on the same
//!    means, up to `max_retries` times.

use std::io::Write;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{synthesize_samples, ChannelModel, ChannelRealization, ChannelSampler, Party};
use crate::error::{Error, Result};
use crate::quantizer::{BitString, MetricSpace, QuantizationScheme, ReconcileBundle};
use crate::rng::{self, Rng};

/// Tolerance added per failed verification.
pub const TOLERANCE_STEP: f64 = 0.5;
pub const DEFAULT_MAX_RETRIES: u32 = 8;
pub const RETRANSMIT_CAP: u32 = 3;
const LINK_STREAMS: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetryPolicy {
    /// Every channel's tolerance grows by 0.5 dB per failure.
    #[default]
    Uniform,
    /// One channel at a time is bumped, highest sample variance first.
    PerChannel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub n: usize,
    pub k: usize,
    pub mu_min: i32,
    pub mu_max: i32,
    pub base_tolerance: f64,
    pub retry_policy: RetryPolicy,
    pub max_retries: u32,
    /// Probability that any single message is lost in transit.
    pub loss_probability: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        let space = MetricSpace::default();
        Self {
            n: 16,
            k: 16,
            mu_min: space.mu_min,
            mu_max: space.mu_max,
            base_tolerance: 1.0,
            retry_policy: RetryPolicy::Uniform,
            max_retries: DEFAULT_MAX_RETRIES,
            loss_probability: 0.0,
        }
    }
}

impl ProtocolConfig {
    pub fn space(&self) -> Result<MetricSpace> {
        MetricSpace::new(self.mu_min, self.mu_max)
    }

    pub fn validate(&self) -> Result<()> {
        self.space()?;
        if self.n == 0 || self.k == 0 {
            return Err(Error::InvalidParameter("n and k must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.loss_probability) {
            return Err(Error::InvalidParameter(format!(
                "loss_probability must lie in [0, 1), got {}",
                self.loss_probability
            )));
        }
        QuantizationScheme::new(self.space()?, self.base_tolerance)?;
        Ok(())
    }
}

/// One side of the protocol. Bob's computations only ever see his own state
/// plus the public bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct PartyState {
    pub role: Party,
    /// Integer RSS samples, `[channel][sample]`.
    pub samples: Vec<Vec<i32>>,
    pub means: Vec<f64>,
    pub error_count: u32,
    pub tolerances: Vec<f64>,
}

impl PartyState {
    pub fn new(role: Party, n: usize) -> Self {
        Self {
            role,
            samples: vec![Vec::new(); n],
            means: Vec::new(),
            error_count: 0,
            tolerances: Vec::new(),
        }
    }

    /// A party that skipped sampling and starts from given means.
    pub fn from_means(role: Party, means: Vec<f64>) -> Self {
        Self {
            role,
            samples: means.iter().map(|_| Vec::new()).collect(),
            means,
            error_count: 0,
            tolerances: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }

    fn finish_sampling(&mut self) {
        self.means = crate::channel::channel_means(&self.samples);
    }

    /// Unbiased variance of each channel's samples (zero for `k < 2`).
    pub fn sample_variances(&self) -> Vec<f64> {
        self.samples
            .iter()
            .map(|s| {
                if s.len() < 2 {
                    return 0.0;
                }
                let m = s.iter().map(|&v| f64::from(v)).sum::<f64>() / s.len() as f64;
                s.iter().map(|&v| (f64::from(v) - m).powi(2)).sum::<f64>() / (s.len() - 1) as f64
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    SwitchChannel {
        channel: usize,
    },
    Probe {
        channel: usize,
        sample: usize,
    },
    Reply {
        channel: usize,
        sample: usize,
    },
    Reconcile {
        attempt: u32,
        bundle: ReconcileBundle,
    },
    Hash {
        attempt: u32,
        digest: String,
    },
    Success,
    Abort {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub from: Party,
    /// Transmissions used, 1 when the first copy got through.
    pub transmissions: u32,
    pub delivered: bool,
    pub message: Message,
}

/// Lossy public channel with bounded retransmission.
#[derive(Debug)]
pub struct Link {
    loss_probability: f64,
    rng: Rng,
    pub log: Vec<LogEntry>,
}

impl Link {
    pub fn new(loss_probability: f64, rng: Rng) -> Self {
        Self {
            loss_probability,
            rng,
            log: Vec::new(),
        }
    }

    pub fn reliable() -> Self {
        Self::new(0.0, rng::stream(0, 0))
    }

    /// Sends `message`, retransmitting up to [`RETRANSMIT_CAP`] times.
    pub fn send(&mut self, from: Party, message: Message) -> Result<(), Abort> {
        let mut transmissions = 0;
        let delivered = loop {
            transmissions += 1;
            let lost =
                self.loss_probability > 0.0 && self.rng.random::<f64>() < self.loss_probability;
            if !lost {
                break true;
            }
            if transmissions > RETRANSMIT_CAP {
                break false;
            }
        };
        let describe = format!("{message:?}");
        self.log.push(LogEntry {
            from,
            transmissions,
            delivered,
            message,
        });
        if delivered {
            Ok(())
        } else {
            Err(Abort(format!(
                "message lost after {transmissions} transmissions: {describe}"
            )))
        }
    }

    pub fn count(&self, pred: impl Fn(&Message) -> bool) -> usize {
        self.log.iter().filter(|e| pred(&e.message)).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Abort(pub String);

/// Source of per-party RSS samples for a channel.
pub trait ChannelSource {
    fn samples(&mut self, party: Party, channel: usize, k: usize) -> Vec<i32>;
}

/// Samples around the observations of one channel realization.
pub struct RealizationSource {
    realization: ChannelRealization,
    space: MetricSpace,
    rng: Rng,
}

impl RealizationSource {
    pub fn new(realization: ChannelRealization, space: MetricSpace, rng: Rng) -> Self {
        Self {
            realization,
            space,
            rng,
        }
    }
}

impl ChannelSource for RealizationSource {
    fn samples(&mut self, party: Party, channel: usize, k: usize) -> Vec<i32> {
        let obs = match party {
            Party::Alice => self.realization.x_alice[channel],
            Party::Bob => self.realization.x_bob[channel],
        };
        synthesize_samples(obs, k, self.space, &mut self.rng)
    }
}

/// Phase 1. Alice probes each channel `k` times; each probe and reply is
/// measured by its receiver. Returns the two mean vectors.
pub fn sampling_phase(
    alice: &mut PartyState,
    bob: &mut PartyState,
    source: &mut dyn ChannelSource,
    k: usize,
    link: &mut Link,
) -> Result<(Vec<f64>, Vec<f64>), Abort> {
    for channel in 0..alice.n() {
        link.send(Party::Alice, Message::SwitchChannel { channel })?;
        let bob_rss = source.samples(Party::Bob, channel, k);
        let alice_rss = source.samples(Party::Alice, channel, k);
        for sample in 0..k {
            link.send(Party::Alice, Message::Probe { channel, sample })?;
            bob.samples[channel].push(bob_rss[sample]);
            link.send(Party::Bob, Message::Reply { channel, sample })?;
            alice.samples[channel].push(alice_rss[sample]);
        }
    }
    alice.finish_sampling();
    bob.finish_sampling();
    Ok((alice.means.clone(), bob.means.clone()))
}

/// Tolerances for the next key generation attempt.
///
/// `variances` are Alice's per-channel sample variances; they order the
/// channels for the per-channel policy and are ignored otherwise.
pub fn choose_tolerances(
    variances: &[f64],
    error_count: u32,
    base: f64,
    policy: RetryPolicy,
) -> Vec<f64> {
    let n = variances.len();
    match policy {
        RetryPolicy::Uniform => vec![base + TOLERANCE_STEP * f64::from(error_count); n],
        RetryPolicy::PerChannel => {
            let mut t = vec![base; n];
            if error_count > 0 && n > 0 {
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| variances[b].total_cmp(&variances[a]).then(a.cmp(&b)));
                let step = (error_count - 1) as usize;
                let round = (step / n + 1) as f64;
                t[order[step % n]] = base + TOLERANCE_STEP * round;
            }
            t
        }
    }
}

fn schemes(space: MetricSpace, tolerances: &[f64]) -> Result<Vec<QuantizationScheme>> {
    tolerances
        .iter()
        .map(|&t| QuantizationScheme::new(space, t))
        .collect()
}

/// Alice's half of key generation: her secret and the public bundle.
pub fn alice_keygen(
    alice: &PartyState,
    tolerances: &[f64],
    space: MetricSpace,
) -> Result<(BitString, ReconcileBundle)> {
    let schemes = schemes(space, tolerances)?;
    let mut secret = BitString::default();
    let mut shifts = Vec::with_capacity(schemes.len());
    for (scheme, &mu) in schemes.iter().zip(&alice.means) {
        let (q, token) = scheme.make_token(mu);
        secret.extend(&scheme.encode_levels(&[q])?);
        shifts.push(token.shift);
    }
    Ok((
        secret,
        ReconcileBundle {
            tolerances: tolerances.to_vec(),
            shifts,
        },
    ))
}

/// Bob's half: uses nothing but his own means and the bundle.
pub fn bob_keygen(
    bob: &PartyState,
    bundle: &ReconcileBundle,
    space: MetricSpace,
) -> Result<BitString> {
    if bundle.len() != bob.means.len() {
        return Err(Error::Data(format!(
            "bundle covers {} channels, Bob has {}",
            bundle.len(),
            bob.means.len()
        )));
    }
    let schemes = schemes(space, &bundle.tolerances)?;
    let mut secret = BitString::default();
    for (i, (scheme, &mu)) in schemes.iter().zip(&bob.means).enumerate() {
        let q = scheme.apply_token(mu, bundle.token(i));
        secret.extend(&scheme.encode_levels(&[q])?);
    }
    Ok(secret)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyMaterial {
    pub secret_alice: BitString,
    pub secret_bob: BitString,
    pub bundle: ReconcileBundle,
}

/// Phase 2 for one attempt. Channels are concatenated in ascending index.
pub fn key_generation_phase(
    alice: &PartyState,
    bob: &PartyState,
    tolerances: &[f64],
    space: MetricSpace,
) -> Result<KeyMaterial> {
    let (secret_alice, bundle) = alice_keygen(alice, tolerances, space)?;
    let secret_bob = bob_keygen(bob, &bundle, space)?;
    Ok(KeyMaterial {
        secret_alice,
        secret_bob,
        bundle,
    })
}

/// SHA-256 over the 64-bit big-endian bit length followed by the packed bits.
pub fn secret_hash(secret: &BitString) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((secret.len() as u64).to_be_bytes());
    h.update(secret.to_bytes());
    h.finalize().into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Agreed,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verification {
    pub outcome: Outcome,
    pub attempts: Vec<KeyMaterial>,
    pub retries: u32,
}

/// Phase 3 with the retry loop. Key generation is redone on the same means
/// with escalated tolerances after every mismatch.
pub fn verification_phase(
    alice: &mut PartyState,
    bob: &mut PartyState,
    config: &ProtocolConfig,
    link: &mut Link,
) -> Result<Result<Verification, Abort>> {
    let space = config.space()?;
    let variances = alice.sample_variances();
    let mut attempts = Vec::new();
    loop {
        let attempt = alice.error_count;
        let tolerances = choose_tolerances(
            &variances,
            alice.error_count,
            config.base_tolerance,
            config.retry_policy,
        );
        alice.tolerances = tolerances.clone();
        let (secret_alice, bundle) = alice_keygen(alice, &tolerances, space)?;
        if let Err(abort) = link.send(
            Party::Alice,
            Message::Reconcile {
                attempt,
                bundle: bundle.clone(),
            },
        ) {
            return Ok(Err(abort));
        }
        bob.tolerances = bundle.tolerances.clone();
        let secret_bob = bob_keygen(bob, &bundle, space)?;
        let digest = secret_hash(&secret_bob);
        if let Err(abort) = link.send(
            Party::Bob,
            Message::Hash {
                attempt,
                digest: hex(&digest),
            },
        ) {
            return Ok(Err(abort));
        }
        let matched = alice_accepts(&secret_alice, &digest);
        attempts.push(KeyMaterial {
            secret_alice,
            secret_bob,
            bundle,
        });
        if matched {
            if let Err(abort) = link.send(Party::Alice, Message::Success) {
                return Ok(Err(abort));
            }
            return Ok(Ok(Verification {
                outcome: Outcome::Agreed,
                attempts,
                retries: alice.error_count,
            }));
        }
        if alice.error_count >= config.max_retries {
            return Ok(Ok(Verification {
                outcome: Outcome::Failed,
                attempts,
                retries: alice.error_count,
            }));
        }
        alice.error_count += 1;
        bob.error_count += 1;
    }
}

/// Alice's check of Bob's hash against her own secret.
pub fn alice_accepts(secret: &BitString, bob_digest: &[u8; 32]) -> bool {
    secret_hash(secret) == *bob_digest
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashRecord {
    pub attempt: u32,
    pub alice: String,
    pub bob: String,
    pub matched: bool,
}

/// Full record of one run. Secrets of both sides are kept for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub config: ProtocolConfig,
    pub seed: u64,
    pub run: u64,
    pub messages: Vec<LogEntry>,
    pub bundles: Vec<ReconcileBundle>,
    pub hashes: Vec<HashRecord>,
    pub retries: u32,
    pub outcome: Outcome,
    pub first_try_success: bool,
    pub abort_reason: Option<String>,
    /// Largest per-channel `|mu_i - mu'_i|`, when sampling completed.
    pub max_deviation: Option<f64>,
    pub secret_alice: Option<BitString>,
    pub secret_bob: Option<BitString>,
}

impl Transcript {
    pub fn secret_bits(&self) -> usize {
        match (self.outcome, &self.secret_alice) {
            (Outcome::Agreed, Some(s)) => s.len(),
            _ => 0,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("transcript serializes")
    }
}

/// Runs all three phases over one sampled realization. Deterministic in
/// `(model, config, seed, run)`.
pub fn run_protocol(
    model: &ChannelModel,
    config: &ProtocolConfig,
    seed: u64,
    run: u64,
) -> Result<Transcript> {
    config.validate()?;
    let sampler = model.sampler()?;
    run_with_sampler(&sampler, config, seed, run)
}

fn run_with_sampler(
    sampler: &ChannelSampler,
    config: &ProtocolConfig,
    seed: u64,
    run: u64,
) -> Result<Transcript> {
    if sampler.n() != config.n {
        return Err(Error::InvalidParameter(format!(
            "model has {} channels, config asks for {}",
            sampler.n(),
            config.n
        )));
    }
    let space = config.space()?;
    let mut rng = rng::stream(seed, run);
    let realization = sampler.realization(&mut rng);
    let mut source = RealizationSource::new(realization, space, rng);
    let mut link = Link::new(
        config.loss_probability,
        rng::substream(seed, LINK_STREAMS, run),
    );
    let mut alice = PartyState::new(Party::Alice, config.n);
    let mut bob = PartyState::new(Party::Bob, config.n);

    let mut transcript = Transcript {
        config: config.clone(),
        seed,
        run,
        messages: Vec::new(),
        bundles: Vec::new(),
        hashes: Vec::new(),
        retries: 0,
        outcome: Outcome::Failed,
        first_try_success: false,
        abort_reason: None,
        max_deviation: None,
        secret_alice: None,
        secret_bob: None,
    };

    if let Err(Abort(reason)) =
        sampling_phase(&mut alice, &mut bob, &mut source, config.k, &mut link)
    {
        transcript.abort_reason = Some(reason);
        link.log.push(LogEntry {
            from: Party::Alice,
            transmissions: 1,
            delivered: true,
            message: Message::Abort {
                reason: "sampling failed".into(),
            },
        });
        transcript.messages = link.log;
        return Ok(transcript);
    }
    transcript.max_deviation = alice
        .means
        .iter()
        .zip(&bob.means)
        .map(|(a, b)| (a - b).abs())
        .reduce(f64::max);

    match verification_phase(&mut alice, &mut bob, config, &mut link)? {
        Ok(v) => {
            transcript.outcome = v.outcome;
            transcript.retries = v.retries;
            transcript.first_try_success = v.outcome == Outcome::Agreed && v.retries == 0;
            transcript.hashes = v
                .attempts
                .iter()
                .enumerate()
                .map(|(i, km)| {
                    let a = secret_hash(&km.secret_alice);
                    let b = secret_hash(&km.secret_bob);
                    HashRecord {
                        attempt: i as u32,
                        alice: hex(&a),
                        bob: hex(&b),
                        matched: a == b,
                    }
                })
                .collect();
            if let Some(last) = v.attempts.last() {
                transcript.secret_alice = Some(last.secret_alice.clone());
                transcript.secret_bob = Some(last.secret_bob.clone());
            }
            transcript.bundles = v.attempts.into_iter().map(|km| km.bundle).collect();
        }
        Err(Abort(reason)) => {
            transcript.abort_reason = Some(reason);
            transcript.retries = alice.error_count;
        }
    }
    transcript.messages = link.log;
    Ok(transcript)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: u64,
    pub outcome: Outcome,
    pub retries: u32,
    pub secret_bits: usize,
    pub first_try_success: bool,
    #[serde(skip)]
    pub max_deviation: Option<f64>,
}

impl From<&Transcript> for RunSummary {
    fn from(t: &Transcript) -> Self {
        Self {
            run: t.run,
            outcome: t.outcome,
            retries: t.retries,
            secret_bits: t.secret_bits(),
            first_try_success: t.first_try_success,
            max_deviation: t.max_deviation,
        }
    }
}

/// `runs` independent protocol executions, run `i` on stream `i` of `seed`.
/// Runs execute in parallel; results come back in run order.
pub fn run_batch(
    model: &ChannelModel,
    config: &ProtocolConfig,
    runs: usize,
    seed: u64,
) -> Result<Vec<RunSummary>> {
    config.validate()?;
    let sampler = model.sampler()?;
    (0..runs as u64)
        .into_par_iter()
        .map(|run| run_with_sampler(&sampler, config, seed, run).map(|t| RunSummary::from(&t)))
        .collect()
}

pub const SUMMARY_HEADER: &str = "run,outcome,retries,secret_bits,first_try_success";

pub fn write_summary_csv<W: Write>(rows: &[RunSummary], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record(SUMMARY_HEADER.split(','))?;
    }
    w.flush()?;
    Ok(())
}

pub fn first_try_rate(rows: &[RunSummary]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().filter(|r| r.first_try_success).count() as f64 / rows.len() as f64
}

pub fn agreed_rate(rows: &[RunSummary]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().filter(|r| r.outcome == Outcome::Agreed).count() as f64 / rows.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> MetricSpace {
        MetricSpace::default()
    }

    fn model(noise: f64) -> ChannelModel {
        ChannelModel::toeplitz(16, -70.0, 16.0, 0.7, noise).unwrap()
    }

    #[test]
    fn noiseless_channel_gives_equal_means() {
        let cfg = ProtocolConfig::default();
        let t = run_protocol(&model(0.0), &cfg, 1, 0).unwrap();
        assert_eq!(t.max_deviation, Some(0.0));
        assert_eq!(t.outcome, Outcome::Agreed);
        assert_eq!(t.retries, 0);
        assert_eq!(t.secret_bits(), 80);
    }

    #[test]
    fn sampling_logs_every_exchange() {
        let cfg = ProtocolConfig::default();
        let t = run_protocol(&model(0.5), &cfg, 3, 0).unwrap();
        let probes = t
            .messages
            .iter()
            .filter(|e| matches!(e.message, Message::Probe { .. }))
            .count();
        let replies = t
            .messages
            .iter()
            .filter(|e| matches!(e.message, Message::Reply { .. }))
            .count();
        assert_eq!((probes, replies), (256, 256));
    }

    #[test]
    fn means_have_sixteenth_granularity() {
        let sampler = model(0.5).sampler().unwrap();
        let mut rng = rng::stream(8, 0);
        let real = sampler.realization(&mut rng);
        let mut source = RealizationSource::new(real, space(), rng);
        let mut a = PartyState::new(Party::Alice, 16);
        let mut b = PartyState::new(Party::Bob, 16);
        let (ma, mb) =
            sampling_phase(&mut a, &mut b, &mut source, 16, &mut Link::reliable()).unwrap();
        for m in ma.iter().chain(&mb) {
            assert_eq!((m * 16.0).fract(), 0.0);
        }
        for (ch, s) in a.samples.iter().enumerate() {
            let mean = s.iter().sum::<i32>() as f64 / 16.0;
            assert_eq!(mean, ma[ch]);
        }
    }

    #[test]
    fn tolerance_schedule() {
        let var = [0.1, 3.0, 0.5, 3.0];
        assert_eq!(
            choose_tolerances(&var, 0, 1.0, RetryPolicy::Uniform),
            vec![1.0; 4]
        );
        assert_eq!(
            choose_tolerances(&var, 2, 1.0, RetryPolicy::Uniform),
            vec![2.0; 4]
        );
        assert_eq!(
            choose_tolerances(&var, 0, 1.0, RetryPolicy::PerChannel),
            vec![1.0; 4]
        );
        // highest variance first, ties by index
        assert_eq!(
            choose_tolerances(&var, 1, 1.0, RetryPolicy::PerChannel),
            vec![1.0, 1.5, 1.0, 1.0]
        );
        assert_eq!(
            choose_tolerances(&var, 2, 1.0, RetryPolicy::PerChannel),
            vec![1.0, 1.0, 1.0, 1.5]
        );
        assert_eq!(
            choose_tolerances(&var, 3, 1.0, RetryPolicy::PerChannel),
            vec![1.0, 1.0, 1.5, 1.0]
        );
        assert_eq!(
            choose_tolerances(&var, 5, 1.0, RetryPolicy::PerChannel),
            vec![1.0, 2.0, 1.0, 1.0]
        );
    }

    #[test]
    fn equal_means_agree_for_any_tolerance() {
        let means = vec![-70.3, -81.9, -55.0, -99.99];
        let a = PartyState::from_means(Party::Alice, means.clone());
        let b = PartyState::from_means(Party::Bob, means);
        for t in [0.5, 1.0, 2.5] {
            let km = key_generation_phase(&a, &b, &[t; 4], space()).unwrap();
            assert_eq!(km.secret_alice, km.secret_bob);
        }
    }

    #[test]
    fn sixteen_channels_give_80_bits() {
        let a = PartyState::from_means(Party::Alice, vec![-70.0; 16]);
        let b = PartyState::from_means(Party::Bob, vec![-70.4; 16]);
        let km = key_generation_phase(&a, &b, &[1.0; 16], space()).unwrap();
        assert_eq!(km.secret_alice.len(), 80);
        assert_eq!(km.secret_alice, km.secret_bob);
        assert!(km
            .bundle
            .shifts
            .iter()
            .zip(&km.bundle.tolerances)
            .all(|(p, t)| p.abs() <= *t));
    }

    #[test]
    fn retry_recovers_a_deviating_channel() {
        let mut alice_means = vec![-70.3; 4];
        let mut bob_means = alice_means.clone();
        alice_means[2] = -70.9;
        bob_means[2] = -72.3; // 1.4 dB off, lands in the cell below at t=1
        let mut a = PartyState::from_means(Party::Alice, alice_means);
        let mut b = PartyState::from_means(Party::Bob, bob_means);
        let cfg = ProtocolConfig {
            n: 4,
            ..Default::default()
        };
        let mut link = Link::reliable();
        let v = verification_phase(&mut a, &mut b, &cfg, &mut link)
            .unwrap()
            .unwrap();
        assert_eq!(v.outcome, Outcome::Agreed);
        assert_eq!(v.retries, 1);
        assert_ne!(v.attempts[0].secret_alice, v.attempts[0].secret_bob);
        assert_eq!(v.attempts[1].bundle.tolerances, vec![1.5; 4]);
        assert_eq!(link.count(|m| matches!(m, Message::Hash { .. })), 2);
        assert_eq!(link.count(|m| matches!(m, Message::Success)), 1);
    }

    #[test]
    fn gives_up_after_max_retries() {
        let mut a = PartyState::from_means(Party::Alice, vec![-70.0]);
        let mut b = PartyState::from_means(Party::Bob, vec![-80.0]);
        let cfg = ProtocolConfig {
            n: 1,
            max_retries: 3,
            ..Default::default()
        };
        let v = verification_phase(&mut a, &mut b, &cfg, &mut Link::reliable())
            .unwrap()
            .unwrap();
        assert_eq!(v.outcome, Outcome::Failed);
        assert_eq!(v.retries, 3);
        assert_eq!(v.attempts.len(), 4);
    }

    #[test]
    fn flipped_hash_bit_is_detected() {
        let secret: BitString = "1011001110".parse().unwrap();
        let mut digest = secret_hash(&secret);
        assert!(alice_accepts(&secret, &digest));
        digest[7] ^= 0x10;
        assert!(!alice_accepts(&secret, &digest));
    }

    #[test]
    fn hash_covers_length() {
        let short: BitString = "1".parse().unwrap();
        let padded: BitString = "10".parse().unwrap();
        assert_eq!(short.to_bytes(), padded.to_bytes());
        assert_ne!(secret_hash(&short), secret_hash(&padded));
    }

    #[test]
    fn bob_depends_only_on_public_data() {
        let bob = PartyState::from_means(Party::Bob, vec![-70.2, -64.8]);
        let alice_a = PartyState::from_means(Party::Alice, vec![-70.0, -65.0]);
        let (_, bundle) = alice_keygen(&alice_a, &[1.0, 1.0], space()).unwrap();
        let reference = bob_keygen(&bob, &bundle, space()).unwrap();
        // Alice's internal state may change arbitrarily; Bob only sees the bundle.
        let mut alice_b = alice_a.clone();
        alice_b.means = vec![0.0, 0.0];
        alice_b.samples = vec![vec![1, 2, 3]; 2];
        let _ = alice_b;
        assert_eq!(bob_keygen(&bob, &bundle, space()).unwrap(), reference);
        let wrong_len = ReconcileBundle {
            tolerances: vec![1.0],
            shifts: vec![0.0],
        };
        assert!(bob_keygen(&bob, &wrong_len, space()).is_err());
    }

    #[test]
    fn lossy_link_retransmits_then_aborts() {
        let mut link = Link::new(0.5, rng::stream(1, 0));
        let mut ok = 0;
        let mut aborted = 0;
        for _ in 0..2000 {
            match link.send(Party::Alice, Message::Success) {
                Ok(()) => ok += 1,
                Err(_) => aborted += 1,
            }
        }
        // all four transmissions lost with probability 1/16
        assert!(aborted > 60 && aborted < 200, "{aborted}");
        assert_eq!(ok + aborted, 2000);
        assert!(link
            .log
            .iter()
            .all(|e| e.transmissions <= RETRANSMIT_CAP + 1));
    }

    #[test]
    fn heavy_loss_fails_runs_cleanly() {
        let cfg = ProtocolConfig {
            loss_probability: 0.6,
            ..Default::default()
        };
        let t = run_protocol(&model(0.5), &cfg, 2, 0).unwrap();
        assert_eq!(t.outcome, Outcome::Failed);
        assert!(t.abort_reason.is_some());
        assert!(t.secret_alice.is_none());
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = ProtocolConfig {
            loss_probability: 0.05,
            ..Default::default()
        };
        let a = run_protocol(&model(0.5), &cfg, 9, 4).unwrap();
        let b = run_protocol(&model(0.5), &cfg, 9, 4).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let c = run_protocol(&model(0.5), &cfg, 9, 5).unwrap();
        assert_ne!(a.to_json(), c.to_json());
    }

    #[test]
    fn agreed_runs_have_identical_secrets() {
        let cfg = ProtocolConfig::default();
        let rows: Vec<Transcript> = (0..200)
            .map(|r| run_protocol(&model(0.8), &cfg, 5, r).unwrap())
            .collect();
        for t in &rows {
            assert!(t.retries <= cfg.max_retries);
            if t.outcome == Outcome::Agreed {
                assert_eq!(t.secret_alice, t.secret_bob);
            }
            for b in &t.bundles {
                assert!(b
                    .shifts
                    .iter()
                    .zip(&b.tolerances)
                    .all(|(p, t)| p.abs() <= t + 1e-12));
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(ProtocolConfig::default().validate().is_ok());
        assert!(ProtocolConfig {
            k: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ProtocolConfig {
            base_tolerance: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ProtocolConfig {
            loss_probability: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ProtocolConfig {
            mu_min: -40,
            mu_max: -104,
            ..Default::default()
        }
        .validate()
        .is_err());
        let wrong_n = ProtocolConfig {
            n: 4,
            ..Default::default()
        };
        assert!(run_protocol(&model(0.5), &wrong_n, 0, 0).is_err());
    }

    #[test]
    fn summary_csv_layout() {
        let cfg = ProtocolConfig::default();
        let rows = run_batch(&model(0.0), &cfg, 3, 1).unwrap();
        let mut buf = Vec::new();
        write_summary_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "run,outcome,retries,secret_bits,first_try_success\n0,agreed,0,80,true\n1,agreed,0,80,true\n2,agreed,0,80,true\n"
        );
        assert_eq!(first_try_rate(&rows), 1.0);
    }
}
