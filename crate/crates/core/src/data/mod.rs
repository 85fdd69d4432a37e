//! Recordings, stage labels, preprocessing, the on-disk container, manifests
//! and the synthetic PSG generator.

pub mod container;
pub mod manifest;
pub mod preprocess;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::{KindSet, ModelConfig, SignalKind};

pub use container::{read_container, write_container, ContainerRecording};
pub use manifest::{Manifest, ManifestEntry, Split};
pub use preprocess::{merge_stages, normalize, pad_truncate, preprocess, resample, resample_to_len};
pub use synth::{synth_generate, SynthConfig};

/// Seconds per sleep epoch.
pub const EPOCH_SECONDS: f64 = 30.0;

/// Five-stage AASM scoring as found in PSG annotations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AasmStage {
    Wake,
    N1,
    N2,
    N3,
    Rem,
}

impl AasmStage {
    pub const ALL: [AasmStage; 5] = [
        AasmStage::Wake,
        AasmStage::N1,
        AasmStage::N2,
        AasmStage::N3,
        AasmStage::Rem,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: i64) -> Result<Self> {
        usize::try_from(code)
            .ok()
            .and_then(|c| Self::ALL.get(c).copied())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown AASM stage code {code}")))
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Four-class target with an `Ignore` marker for unscored or padded epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SleepStage {
    Wake,
    Light,
    Deep,
    Rem,
    Ignore,
}

impl SleepStage {
    pub const CLASSES: [SleepStage; 4] = [SleepStage::Wake, SleepStage::Light, SleepStage::Deep, SleepStage::Rem];

    pub fn class_index(self) -> Option<usize> {
        match self {
            SleepStage::Ignore => None,
            s => Some(s as usize),
        }
    }

    /// Panics for indices above 3.
    pub fn from_class_index(i: usize) -> Self {
        Self::CLASSES[i]
    }

    /// Container label code: 0..=3 for classes, -1 for `Ignore`.
    pub fn code(self) -> i64 {
        self.class_index().map_or(-1, |i| i as i64)
    }

    pub fn from_code(code: i64) -> Result<Self> {
        match code {
            -1 => Ok(SleepStage::Ignore),
            0..=3 => Ok(Self::CLASSES[code as usize]),
            _ => Err(Error::InvalidArgument(format!("unknown stage code {code}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SleepStage::Wake => "Wake",
            SleepStage::Light => "Light",
            SleepStage::Deep => "Deep",
            SleepStage::Rem => "REM",
            SleepStage::Ignore => "Ignore",
        }
    }
}

impl fmt::Display for SleepStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub type GroupKeys = BTreeMap<String, String>;

/// One signal at its native sampling rate.
#[derive(Clone, Debug, PartialEq)]
pub struct RawChannel {
    pub rate_hz: f64,
    pub samples: Vec<f32>,
}

/// A recording as acquired: native-rate signals and AASM labels.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecording {
    pub id: String,
    pub channels: BTreeMap<SignalKind, RawChannel>,
    pub labels: Vec<AasmStage>,
    pub group_keys: GroupKeys,
}

impl RawRecording {
    pub fn kinds(&self) -> KindSet {
        self.channels.keys().copied().collect()
    }

    /// Each series must cover the labelled span to within one epoch.
    pub fn validate(&self) -> Result<()> {
        let epochs = self.labels.len() as f64;
        for (kind, ch) in &self.channels {
            if !(ch.rate_hz > 0.0 && ch.rate_hz.is_finite()) {
                return Err(Error::InvalidArgument(format!("{kind}: rate {} Hz", ch.rate_hz)));
            }
            let per_epoch = ch.rate_hz * EPOCH_SECONDS;
            let expected = epochs * per_epoch;
            if (ch.samples.len() as f64 - expected).abs() > per_epoch {
                return Err(shape_err!(
                    "{kind}: {} samples at {} Hz for {} labelled epochs",
                    ch.samples.len(),
                    ch.rate_hz,
                    self.labels.len()
                ));
            }
        }
        Ok(())
    }
}

/// Signals on the model grid (`k` samples per epoch, fixed `T`) with merged labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessedRecording {
    id: String,
    epochs: usize,
    signals: BTreeMap<SignalKind, Vec<f32>>,
    labels: Vec<SleepStage>,
    group_keys: GroupKeys,
}

impl PreprocessedRecording {
    pub fn new(
        id: impl Into<String>,
        epochs: usize,
        signals: BTreeMap<SignalKind, Vec<f32>>,
        labels: Vec<SleepStage>,
        group_keys: GroupKeys,
    ) -> Result<Self> {
        if epochs == 0 {
            return Err(shape_err!("recording with zero epochs"));
        }
        if labels.len() != epochs {
            return Err(shape_err!("{} labels for {epochs} epochs", labels.len()));
        }
        for (kind, s) in &signals {
            if s.is_empty() || s.len() % epochs != 0 {
                return Err(shape_err!(
                    "{kind}: {} samples is not a whole number per epoch for {epochs} epochs",
                    s.len()
                ));
            }
        }
        Ok(PreprocessedRecording {
            id: id.into(),
            epochs,
            signals,
            labels,
            group_keys,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn kinds(&self) -> KindSet {
        self.signals.keys().copied().collect()
    }

    pub fn signal(&self, kind: SignalKind) -> Option<&[f32]> {
        self.signals.get(&kind).map(Vec::as_slice)
    }

    pub fn signal_mut(&mut self, kind: SignalKind) -> Option<&mut Vec<f32>> {
        self.signals.get_mut(&kind)
    }

    pub fn signals(&self) -> impl Iterator<Item = (SignalKind, &[f32])> {
        self.signals.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Samples per epoch of a kind.
    pub fn k(&self, kind: SignalKind) -> Option<usize> {
        self.signal(kind).map(|s| s.len() / self.epochs)
    }

    pub fn labels(&self) -> &[SleepStage] {
        &self.labels
    }

    pub fn group_keys(&self) -> &GroupKeys {
        &self.group_keys
    }

    /// Drops every signal not in `keep`.
    pub fn retain(&mut self, keep: KindSet) {
        self.signals.retain(|k, _| keep.contains(*k));
    }

    /// Checks that every signal and the label sequence match the model grid.
    pub fn check_grid(&self, config: &ModelConfig) -> Result<()> {
        if self.epochs != config.epochs {
            return Err(shape_err!(
                "{}: {} epochs, expected {}",
                self.id,
                self.epochs,
                config.epochs
            ));
        }
        for (kind, s) in self.signals() {
            if s.len() != config.signal_len(kind) {
                return Err(shape_err!(
                    "{}: {kind} has {} samples, expected {} ({} per epoch)",
                    self.id,
                    s.len(),
                    config.signal_len(kind),
                    config.k(kind)
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_codes() {
        assert!(AasmStage::from_code(5).is_err());
        assert!(AasmStage::from_code(-1).is_err());
        assert_eq!(AasmStage::from_code(3).unwrap(), AasmStage::N3);
        for s in SleepStage::CLASSES.into_iter().chain([SleepStage::Ignore]) {
            assert_eq!(SleepStage::from_code(s.code()).unwrap(), s);
        }
        assert!(SleepStage::from_code(4).is_err());
        assert_eq!(SleepStage::Ignore.class_index(), None);
    }

    #[test]
    fn recording_rejects_inconsistent_lengths() {
        let mut sig = BTreeMap::new();
        sig.insert(SignalKind::Ecg, vec![0.0; 10]);
        assert!(PreprocessedRecording::new("x", 3, sig.clone(), vec![SleepStage::Wake; 3], GroupKeys::new()).is_err());
        assert!(PreprocessedRecording::new("x", 5, sig.clone(), vec![SleepStage::Wake; 4], GroupKeys::new()).is_err());
        assert!(PreprocessedRecording::new("x", 5, sig, vec![SleepStage::Wake; 5], GroupKeys::new()).is_ok());
    }
}
