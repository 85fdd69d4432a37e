use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// One input signal modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SignalKind {
    Ecg,
    Ppg,
    Abd,
    Thx,
}

impl SignalKind {
    /// Canonical order; token order in the epoch mixer follows it.
    pub const ALL: [SignalKind; 4] = [SignalKind::Ecg, SignalKind::Ppg, SignalKind::Abd, SignalKind::Thx];

    pub fn name(self) -> &'static str {
        match self {
            SignalKind::Ecg => "ECG",
            SignalKind::Ppg => "PPG",
            SignalKind::Abd => "ABD",
            SignalKind::Thx => "THX",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Cardiac signals are sampled densely, respiratory effort belts sparsely.
    pub fn is_cardiac(self) -> bool {
        matches!(self, SignalKind::Ecg | SignalKind::Ppg)
    }

    /// Samples per 30-second epoch in the full-size model.
    pub fn default_k(self) -> usize {
        if self.is_cardiac() {
            1024
        } else {
            256
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(|k| k.name()).join(", ")
    }
}

impl fmt::Display for SignalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SignalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown signal kind `{s}`; valid kinds: {}",
                    Self::valid_names()
                ))
            })
    }
}

impl Serialize for SignalKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for SignalKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Small set of signal kinds.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct KindSet(u8);

impl KindSet {
    pub const fn empty() -> Self {
        KindSet(0)
    }

    pub const fn all() -> Self {
        KindSet(0b1111)
    }

    pub fn contains(self, kind: SignalKind) -> bool {
        self.0 & (1 << kind.index()) != 0
    }

    pub fn insert(&mut self, kind: SignalKind) {
        self.0 |= 1 << kind.index();
    }

    pub fn remove(&mut self, kind: SignalKind) {
        self.0 &= !(1 << kind.index());
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset(self, other: KindSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = SignalKind> {
        SignalKind::ALL.into_iter().filter(move |k| self.contains(*k))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn from_bits(bits: u8) -> Self {
        KindSet(bits & 0b1111)
    }

    /// Parses a comma-separated list such as `ECG,THX`.
    pub fn parse_list(s: &str) -> Result<Self> {
        let set: KindSet = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        if set.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "empty modality list; valid kinds: {}",
                SignalKind::valid_names()
            )));
        }
        Ok(set)
    }
}

impl FromIterator<SignalKind> for KindSet {
    fn from_iter<I: IntoIterator<Item = SignalKind>>(iter: I) -> Self {
        let mut s = KindSet::empty();
        for k in iter {
            s.insert(k);
        }
        s
    }
}

impl fmt::Debug for KindSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl fmt::Display for KindSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(|k| k.name()).collect();
        f.write_str(&names.join(","))
    }
}

impl Serialize for KindSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for KindSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let kinds = Vec::<SignalKind>::deserialize(d)?;
        Ok(kinds.into_iter().collect())
    }
}

/// Architecture hyper-parameters. Defaults are the full-size model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub dropout: f64,
    pub encoder_kernel: usize,
    /// Samples per epoch for ECG and PPG.
    pub cardiac_k: usize,
    /// Samples per epoch for ABD and THX.
    pub respiratory_k: usize,
    pub cardiac_channels: Vec<usize>,
    pub respiratory_channels: Vec<usize>,
    pub mixer_layers: usize,
    pub mixer_hidden: usize,
    pub mixer_heads: usize,
    pub seq_blocks: usize,
    pub seq_kernel: usize,
    pub seq_dilations: Vec<usize>,
    pub classes: usize,
    /// Sleep epochs per recording (T).
    pub epochs: usize,
    pub norm_epsilon: f64,
    /// Add a learnable per-kind vector to each epoch-mixer token.
    pub modality_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 128,
            dropout: 0.1,
            encoder_kernel: 3,
            cardiac_k: 1024,
            respiratory_k: 256,
            cardiac_channels: vec![16, 16, 32, 32, 64, 64, 128, 128],
            respiratory_channels: vec![16, 32, 64, 64, 128, 128],
            mixer_layers: 2,
            mixer_hidden: 512,
            mixer_heads: 8,
            seq_blocks: 2,
            seq_kernel: 7,
            seq_dilations: vec![1, 2, 4, 8, 16, 32],
            classes: 4,
            epochs: 1200,
            norm_epsilon: 1e-5,
            modality_embeddings: true,
        }
    }
}

impl ModelConfig {
    /// The configuration used for end-to-end gradient checks (T=8, k=16, width 8).
    pub fn gradcheck_tiny() -> Self {
        ModelConfig {
            feature_dim: 8,
            dropout: 0.0,
            encoder_kernel: 3,
            cardiac_k: 16,
            respiratory_k: 16,
            cardiac_channels: vec![2, 4],
            respiratory_channels: vec![3, 4],
            mixer_layers: 1,
            mixer_hidden: 12,
            mixer_heads: 2,
            seq_blocks: 2,
            seq_kernel: 3,
            seq_dilations: vec![1, 2],
            classes: 4,
            epochs: 8,
            norm_epsilon: 1e-5,
            modality_embeddings: true,
        }
    }

    /// A desk-scale model for two-hour synthetic recordings.
    pub fn desk() -> Self {
        ModelConfig {
            feature_dim: 32,
            dropout: 0.1,
            encoder_kernel: 3,
            cardiac_k: 128,
            respiratory_k: 32,
            cardiac_channels: vec![4, 8, 8, 16, 16],
            respiratory_channels: vec![8, 16, 16],
            mixer_layers: 1,
            mixer_hidden: 64,
            mixer_heads: 4,
            seq_blocks: 2,
            seq_kernel: 7,
            seq_dilations: vec![1, 2, 4, 8],
            classes: 4,
            epochs: 240,
            norm_epsilon: 1e-5,
            modality_embeddings: true,
        }
    }

    pub fn k(&self, kind: SignalKind) -> usize {
        if kind.is_cardiac() {
            self.cardiac_k
        } else {
            self.respiratory_k
        }
    }

    pub fn channels(&self, kind: SignalKind) -> &[usize] {
        if kind.is_cardiac() {
            &self.cardiac_channels
        } else {
            &self.respiratory_channels
        }
    }

    /// Samples per recording for a kind (`k · T`).
    pub fn signal_len(&self, kind: SignalKind) -> usize {
        self.k(kind) * self.epochs
    }

    /// Width of the flattened per-epoch encoder output before the dense layer.
    pub fn pre_dense_width(&self, kind: SignalKind) -> usize {
        let layers = self.channels(kind).len();
        (self.k(kind) >> layers) * self.channels(kind).last().copied().unwrap_or(0)
    }

    /// Epochs on either side of `t` that can influence the logits at `t`.
    pub fn sequence_radius(&self) -> usize {
        self.seq_blocks
            * self
                .seq_dilations
                .iter()
                .map(|d| d * (self.seq_kernel - 1) / 2)
                .sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.classes != 4 {
            return fail(format!("classes must be 4, got {}", self.classes));
        }
        if self.feature_dim == 0 || self.mixer_heads == 0 || !self.feature_dim.is_multiple_of(self.mixer_heads) {
            return fail(format!(
                "feature_dim {} must be a positive multiple of mixer_heads {}",
                self.feature_dim, self.mixer_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.encoder_kernel.is_multiple_of(2) || self.seq_kernel.is_multiple_of(2) {
            return fail("kernel sizes must be odd".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.norm_epsilon <= 0.0 {
            return fail("norm_epsilon must be positive".into());
        }
        for (label, k, chans) in [
            ("cardiac", self.cardiac_k, &self.cardiac_channels),
            ("respiratory", self.respiratory_k, &self.respiratory_channels),
        ] {
            if k < 8 || !k.is_power_of_two() {
                return fail(format!("{label}_k must be a power of two >= 8, got {k}"));
            }
            let layers = (k / 4).trailing_zeros() as usize;
            if chans.len() != layers {
                return fail(format!(
                    "{label} encoder needs log2(k/4) = {layers} residual layers for k = {k}, got {}",
                    chans.len()
                ));
            }
            if chans.contains(&0) {
                return fail(format!("{label} channel counts must be positive"));
            }
        }
        if self.cardiac_channels.last() != self.respiratory_channels.last() {
            return fail("cardiac and respiratory encoders must end with the same channel count".into());
        }
        if self.mixer_layers == 0 || self.mixer_hidden == 0 {
            return fail("epoch mixer needs at least one layer and a hidden width".into());
        }
        if self.seq_blocks == 0 || self.seq_dilations.is_empty() || self.seq_dilations.contains(&0) {
            return fail("sequence mixer needs blocks and positive dilations".into());
        }
        let span = (self.seq_kernel - 1) * self.seq_dilations.iter().max().unwrap() + 1;
        if span > self.epochs {
            return fail(format!(
                "largest dilated kernel spans {span} epochs, more than T = {}",
                self.epochs
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_the_full_size_model() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.feature_dim, 128);
        assert_eq!(c.cardiac_channels, [16, 16, 32, 32, 64, 64, 128, 128]);
        assert_eq!(c.respiratory_channels, [16, 32, 64, 64, 128, 128]);
        assert_eq!(c.seq_dilations, [1, 2, 4, 8, 16, 32]);
        assert_eq!((c.mixer_layers, c.mixer_hidden, c.mixer_heads), (2, 512, 8));
        assert_eq!(c.epochs, 1200);
    }

    #[test]
    fn pre_dense_width_is_512_for_both_rates() {
        let c = ModelConfig::default();
        for kind in SignalKind::ALL {
            assert_eq!(c.pre_dense_width(kind), 512, "{kind}");
            assert_eq!(c.k(kind), kind.default_k());
        }
    }

    #[test]
    fn sequence_radius_is_378() {
        assert_eq!(ModelConfig::default().sequence_radius(), 378);
    }

    #[test]
    fn presets_validate() {
        ModelConfig::gradcheck_tiny().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
    }

    #[test]
    fn channel_count_must_match_rate() {
        let mut c = ModelConfig::default();
        c.respiratory_channels.pop();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let err = serde_json::from_str::<ModelConfig>(r#"{"feature_dimm": 3}"#);
        assert!(err.is_err());
        let ok: ModelConfig = serde_json::from_str(r#"{"feature_dim": 64, "mixer_heads": 4}"#).unwrap();
        assert_eq!(ok.feature_dim, 64);
        assert_eq!(ok.epochs, 1200);
    }

    #[test]
    fn kind_sets() {
        let s = KindSet::parse_list("ecg, THX").unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.contains(SignalKind::Ecg) && s.contains(SignalKind::Thx));
        assert_eq!(s.to_string(), "ECG,THX");
        assert!(KindSet::parse_list("EEG").is_err());
        assert!(KindSet::parse_list("").is_err());
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"["ECG","THX"]"#);
        assert_eq!(serde_json::from_str::<KindSet>(&json).unwrap(), s);
    }
}
