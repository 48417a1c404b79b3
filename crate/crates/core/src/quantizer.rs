//! Equidistant multi-level RSS quantization with shift-token reconciliation.
//!
//! Alice quantizes her mean `mu` to the nearest level `q` and publishes the
//! shift `P = q - mu`. Bob quantizes `mu' + P`. Whenever `|mu - mu'| < t`
//! the shifted value lies strictly inside the cell of `q`, so both parties
//! obtain the same level. The shift itself is bounded by `t` and reveals only
//! the offset of `mu` inside its cell, not the level.

use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Integer dBm range an RSS register can report, with `dis(a, b) = |a - b|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSpace {
    pub mu_min: i32,
    pub mu_max: i32,
}

impl MetricSpace {
    pub fn new(mu_min: i32, mu_max: i32) -> Result<Self> {
        if mu_min >= mu_max {
            return Err(Error::InvalidParameter(format!(
                "metric space needs mu_min < mu_max, got [{mu_min}, {mu_max}]"
            )));
        }
        Ok(Self { mu_min, mu_max })
    }

    pub fn width(&self) -> f64 {
        f64::from(self.mu_max - self.mu_min)
    }

    pub fn dis(a: f64, b: f64) -> f64 {
        (a - b).abs()
    }
}

impl Default for MetricSpace {
    /// The CC2420 reporting range, -104 dBm to -40 dBm.
    fn default() -> Self {
        Self {
            mu_min: -104,
            mu_max: -40,
        }
    }
}

/// The level set `Q_t`: `K` levels spaced `d = 2t` apart, anchored at `mu_min`.
///
/// When the range is not a multiple of `d` the level count is rounded down
/// and the leftover sliver sits above the top level.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationScheme {
    space: MetricSpace,
    tolerance: f64,
    spacing: f64,
    levels: Vec<f64>,
    bits: usize,
}

// Slack for range/spacing ratios that are integers up to rounding.
const COUNT_EPS: f64 = 1e-9;

impl QuantizationScheme {
    pub fn new(space: MetricSpace, tolerance: f64) -> Result<Self> {
        if !tolerance.is_finite() || tolerance <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "tolerance must be positive and finite, got {tolerance}"
            )));
        }
        let spacing = 2.0 * tolerance;
        let count = (space.width() / spacing + COUNT_EPS).floor();
        if count < 2.0 {
            return Err(Error::InvalidParameter(format!(
                "tolerance {tolerance} dB leaves fewer than two levels in [{}, {}]",
                space.mu_min, space.mu_max
            )));
        }
        let count = count as usize;
        let base = f64::from(space.mu_min);
        let levels = (0..count).map(|i| base + i as f64 * spacing).collect();
        Ok(Self {
            space,
            tolerance,
            spacing,
            levels,
            bits: bits_for(count),
        })
    }

    pub fn space(&self) -> MetricSpace {
        self.space
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    /// Bits per encoded level, `ceil(log2 K)`.
    pub fn bits(&self) -> usize {
        self.bits
    }

    fn lowest(&self) -> f64 {
        self.levels[0]
    }

    fn highest(&self) -> f64 {
        self.levels[self.levels.len() - 1]
    }

    /// Clamps into the span covered by the levels. Every clamped value is
    /// within `t` of its level, which keeps published shifts bounded by `t`.
    fn clamp(&self, mu: f64) -> f64 {
        mu.clamp(self.lowest(), self.highest())
    }

    /// Index of the nearest level. Exact midpoints resolve to the lower level.
    pub fn level_index(&self, mu: f64) -> usize {
        let x = (self.clamp(mu) - self.lowest()) / self.spacing;
        let idx = (x - 0.5).ceil().max(0.0) as usize;
        idx.min(self.levels.len() - 1)
    }

    pub fn quantize(&self, mu: f64) -> f64 {
        self.levels[self.level_index(mu)]
    }

    /// Alice's side: the level of `mu` and the public shift towards it.
    pub fn make_token(&self, mu: f64) -> (f64, ReconcileToken) {
        let mu = self.clamp(mu);
        let q = self.quantize(mu);
        (q, ReconcileToken { shift: q - mu })
    }

    /// Bob's side: quantize his own mean after applying Alice's shift.
    pub fn apply_token(&self, mu_prime: f64, token: ReconcileToken) -> f64 {
        self.quantize(mu_prime + token.shift)
    }

    /// Index of `level` in the scheme, if it is one of the levels.
    pub fn index_of(&self, level: f64) -> Option<usize> {
        let x = (level - self.lowest()) / self.spacing;
        let idx = x.round();
        if idx < 0.0 || idx >= self.levels.len() as f64 {
            return None;
        }
        let idx = idx as usize;
        ((self.levels[idx] - level).abs() < 1e-9).then_some(idx)
    }

    /// Concatenates the `p`-bit big-endian codes of the level indices.
    pub fn encode_levels(&self, levels: &[f64]) -> Result<BitString> {
        let mut bits = BitString::with_capacity(levels.len() * self.bits);
        for &level in levels {
            let idx = self.index_of(level).ok_or(Error::UnknownLevel(level))?;
            bits.push_code(idx as u64, self.bits);
        }
        Ok(bits)
    }

    pub fn decode_levels(&self, bits: &BitString) -> Result<Vec<f64>> {
        if !bits.len().is_multiple_of(self.bits) {
            return Err(Error::Data(format!(
                "{} bits is not a multiple of the {}-bit code width",
                bits.len(),
                self.bits
            )));
        }
        bits.as_slice()
            .chunks(self.bits)
            .map(|chunk| {
                let idx = chunk
                    .iter()
                    .fold(0usize, |acc, &b| (acc << 1) | usize::from(b));
                self.levels
                    .get(idx)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("code {idx} has no level")))
            })
            .collect()
    }
}

fn bits_for(count: usize) -> usize {
    let mut bits = 0;
    while (1usize << bits) < count {
        bits += 1;
    }
    bits
}

/// The public shift `P = q - mu` for one channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconcileToken {
    pub shift: f64,
}

/// An ordered bit string. Secrets are built by concatenating level codes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct BitString(Vec<bool>);

impl BitString {
    pub fn with_capacity(n: usize) -> Self {
        Self(Vec::with_capacity(n))
    }

    pub fn push_code(&mut self, value: u64, width: usize) {
        for shift in (0..width).rev() {
            self.0.push((value >> shift) & 1 == 1);
        }
    }

    pub fn extend(&mut self, other: &BitString) {
        self.0.extend_from_slice(&other.0);
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    /// Packs MSB-first, zero-padding the final byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.0
            .chunks(8)
            .map(|chunk| {
                chunk
                    .iter()
                    .enumerate()
                    .fold(0u8, |acc, (i, &b)| acc | (u8::from(b) << (7 - i)))
            })
            .collect()
    }
}

impl From<Vec<bool>> for BitString {
    fn from(bits: Vec<bool>) -> Self {
        Self(bits)
    }
}

impl fmt::Display for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl std::str::FromStr for BitString {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Data(format!("invalid bit character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }
}

impl Serialize for BitString {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BitString {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// Formats a dB value with at least three fractional digits while keeping
/// the shortest round-trip representation when that needs more.
pub fn format_db(value: f64) -> String {
    let mut s = format!("{value}");
    if s.contains(['e', 'E']) {
        s = format!("{value:.12}");
        while s.ends_with('0') {
            s.pop();
        }
    }
    let frac = match s.find('.') {
        Some(dot) => s.len() - dot - 1,
        None => {
            s.push('.');
            0
        }
    };
    for _ in frac..3 {
        s.push('0');
    }
    s
}

/// A dB value that serializes as a JSON number with at least three
/// fractional digits. Only meaningful with `serde_json`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Db(pub f64);

impl Serialize for Db {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return serializer.serialize_f64(self.0);
        }
        let raw = serde_json::value::RawValue::from_string(format_db(self.0))
            .map_err(serde::ser::Error::custom)?;
        raw.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Db {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        f64::deserialize(deserializer).map(Db)
    }
}

fn ser_db_vec<S: Serializer>(
    values: &[f64],
    serializer: S,
) -> std::result::Result<S::Ok, S::Error> {
    serializer.collect_seq(values.iter().map(|&v| Db(v)))
}

/// Public reconciliation data Alice sends Bob: per-channel tolerances `t`
/// and shifts `p`, both in dB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconcileBundle {
    #[serde(rename = "t", serialize_with = "ser_db_vec")]
    pub tolerances: Vec<f64>,
    #[serde(rename = "p", serialize_with = "ser_db_vec")]
    pub shifts: Vec<f64>,
}

impl ReconcileBundle {
    pub fn len(&self) -> usize {
        self.shifts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shifts.is_empty()
    }

    pub fn token(&self, channel: usize) -> ReconcileToken {
        ReconcileToken {
            shift: self.shifts[channel],
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("bundle values are finite")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let bundle: Self = serde_json::from_str(s)?;
        if bundle.tolerances.len() != bundle.shifts.len() {
            return Err(Error::Data(format!(
                "bundle has {} tolerances but {} shifts",
                bundle.tolerances.len(),
                bundle.shifts.len()
            )));
        }
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q1() -> QuantizationScheme {
        QuantizationScheme::new(MetricSpace::default(), 1.0).unwrap()
    }

    #[test]
    fn scheme_arithmetic() {
        let s = q1();
        assert_eq!(s.level_count(), 32);
        assert_eq!(s.spacing(), 2.0);
        assert_eq!(s.bits(), 5);
        assert_eq!(s.levels()[0], -104.0);
        assert_eq!(s.levels()[1], -102.0);
        assert_eq!(*s.levels().last().unwrap(), -42.0);

        let s = QuantizationScheme::new(MetricSpace::default(), 16.0).unwrap();
        assert_eq!((s.level_count(), s.spacing(), s.bits()), (2, 32.0, 1));

        let s = QuantizationScheme::new(MetricSpace::default(), 0.5).unwrap();
        assert_eq!((s.level_count(), s.spacing(), s.bits()), (64, 1.0, 6));
    }

    #[test]
    fn rejects_bad_tolerances() {
        let space = MetricSpace::default();
        assert!(QuantizationScheme::new(space, 0.0).is_err());
        assert!(QuantizationScheme::new(space, -1.0).is_err());
        assert!(QuantizationScheme::new(space, f64::NAN).is_err());
        assert!(QuantizationScheme::new(space, 16.5).is_err());
        assert!(MetricSpace::new(-40, -104).is_err());
        assert!(MetricSpace::new(-40, -40).is_err());
    }

    #[test]
    fn non_integer_level_count_rounds_down() {
        // 64 / 3 = 21.33 -> 21 levels, the top sliver stays uncovered
        let s = QuantizationScheme::new(MetricSpace::default(), 1.5).unwrap();
        assert_eq!(s.level_count(), 21);
        assert_eq!(*s.levels().last().unwrap(), -104.0 + 20.0 * 3.0);
        assert_eq!(s.quantize(-40.0), -44.0);
    }

    #[test]
    fn worked_examples() {
        let s = q1();
        assert_eq!(s.quantize(-71.424), -72.0);
        assert_eq!(s.quantize(-70.9), -70.0);
        assert_eq!(s.quantize(-71.1), -72.0);
        assert_eq!(s.quantize(-72.0), -72.0);
    }

    #[test]
    fn midpoint_goes_to_lower_level() {
        let s = q1();
        assert_eq!(s.quantize(-71.0), -72.0);
        assert_eq!(s.quantize(-103.0), -104.0);
    }

    #[test]
    fn out_of_range_clamps() {
        let s = q1();
        assert_eq!(s.quantize(-200.0), -104.0);
        assert_eq!(s.quantize(0.0), -42.0);
        let (q, tok) = s.make_token(-30.0);
        assert_eq!(q, -42.0);
        assert_eq!(tok.shift, 0.0);
    }

    #[test]
    fn tokens() {
        let s = q1();
        let (q, tok) = s.make_token(-70.9);
        assert_eq!(q, -70.0);
        assert!((tok.shift - 0.9).abs() < 1e-12);

        let (q, tok) = s.make_token(-72.0);
        assert_eq!((q, tok.shift), (-72.0, 0.0));

        let (q, tok) = s.make_token(-71.424);
        assert_eq!(q, -72.0);
        assert!((tok.shift + 0.576).abs() < 1e-12);
    }

    #[test]
    fn apply_token_examples() {
        let s = q1();
        let (alice, tok) = s.make_token(-70.9);
        assert_eq!(s.apply_token(-71.1, tok), alice);
        // deviation 1.2 dB exceeds the tolerance
        assert_eq!(s.apply_token(-69.7, tok), -68.0);
    }

    #[test]
    fn encode_lengths_and_errors() {
        let s = q1();
        assert_eq!(s.encode_levels(&[-72.0]).unwrap().len(), 5);
        let sixteen = vec![-70.0; 16];
        assert_eq!(s.encode_levels(&sixteen).unwrap().len(), 80);
        assert!(matches!(
            s.encode_levels(&[-71.0]),
            Err(Error::UnknownLevel(_))
        ));
        assert!(s.encode_levels(&[-40.0]).is_err());
        let code = s.encode_levels(&[-104.0, -102.0, -42.0]).unwrap();
        assert_eq!(code.to_string(), "000000000111111");
    }

    #[test]
    fn bit_packing() {
        let bits: BitString = "101".parse().unwrap();
        assert_eq!(bits.to_bytes(), vec![0b1010_0000]);
        let bits: BitString = "111111111".parse().unwrap();
        assert_eq!(bits.to_bytes(), vec![0xff, 0x80]);
        assert!("10x".parse::<BitString>().is_err());
    }

    #[test]
    fn db_formatting() {
        assert_eq!(format_db(1.0), "1.000");
        assert_eq!(format_db(0.9), "0.900");
        assert_eq!(format_db(-0.576), "-0.576");
        assert_eq!(format_db(0.0625), "0.0625");
        assert_eq!(format_db(-0.0), "-0.000");
    }

    #[test]
    fn bundle_json_layout() {
        let bundle = ReconcileBundle {
            tolerances: vec![1.0, 1.5],
            shifts: vec![0.9, -0.0625],
        };
        let json = bundle.to_json();
        assert_eq!(json, r#"{"t":[1.000,1.500],"p":[0.900,-0.0625]}"#);
        assert_eq!(ReconcileBundle::from_json(&json).unwrap(), bundle);
        assert!(ReconcileBundle::from_json(r#"{"t":[1.0],"p":[]}"#).is_err());
    }

    proptest! {
        #[test]
        fn reconciliation_agrees_within_tolerance(
            t in prop::sample::select(vec![0.5, 1.0, 1.5, 2.0, 3.0]),
            mu in -104.0f64..-40.0,
            frac in -0.999f64..0.999,
        ) {
            let s = QuantizationScheme::new(MetricSpace::default(), t).unwrap();
            let mu_prime = mu + frac * t;
            let (q, tok) = s.make_token(mu);
            prop_assert_eq!(s.apply_token(mu_prime, tok), q);
            prop_assert!(tok.shift.abs() <= t + 1e-12);
        }

        #[test]
        fn decode_inverts_encode(idx in prop::collection::vec(0usize..32, 0..40)) {
            let s = q1();
            let levels: Vec<f64> = idx.iter().map(|&i| s.levels()[i]).collect();
            let bits = s.encode_levels(&levels).unwrap();
            prop_assert_eq!(s.decode_levels(&bits).unwrap(), levels);
        }

        #[test]
        fn at_most_one_level_within_tolerance(v in -104.0f64..-40.0, t in 0.3f64..8.0) {
            let s = QuantizationScheme::new(MetricSpace::default(), t).unwrap();
            let close = s.levels().iter().filter(|&&q| MetricSpace::dis(v, q) < t).count();
            prop_assert!(close <= 1);
        }

        #[test]
        fn smaller_tolerance_means_more_levels(t in 0.3f64..8.0) {
            let coarse = QuantizationScheme::new(MetricSpace::default(), t).unwrap();
            let fine = QuantizationScheme::new(MetricSpace::default(), t * 0.5).unwrap();
            prop_assert!(fine.level_count() > coarse.level_count());
            prop_assert!(fine.bits() > coarse.bits());
        }
    }
}
