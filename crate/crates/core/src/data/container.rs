//! Recording container: shared blob layout with a JSON header listing each
//! channel's kind, rate and length, followed by the concatenated channels in
//! header order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AasmStage, GroupKeys, PreprocessedRecording, RawChannel, RawRecording, SleepStage};
use crate::blob;
use crate::error::{Error, FormatError, Result};
use crate::model::SignalKind;

const MAGIC: &[u8; 8] = b"SLPFCON1";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ContainerRecording {
    Raw(RawRecording),
    Preprocessed(PreprocessedRecording),
}

impl ContainerRecording {
    pub fn id(&self) -> &str {
        match self {
            ContainerRecording::Raw(r) => &r.id,
            ContainerRecording::Preprocessed(r) => r.id(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ChannelMeta {
    kind: String,
    rate_hz: f64,
    length: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum LabelScheme {
    Aasm,
    Merged,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    id: String,
    epochs: usize,
    channels: Vec<ChannelMeta>,
    label_scheme: LabelScheme,
    label_codes: Vec<i64>,
    group_keys: GroupKeys,
}

pub fn encode(recording: &ContainerRecording) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut channels = Vec::new();
    let meta = match recording {
        ContainerRecording::Raw(r) => {
            for (kind, ch) in &r.channels {
                channels.push(ChannelMeta {
                    kind: kind.name().into(),
                    rate_hz: ch.rate_hz,
                    length: ch.samples.len(),
                });
                payload.extend_from_slice(&ch.samples);
            }
            Meta {
                id: r.id.clone(),
                epochs: r.labels.len(),
                channels,
                label_scheme: LabelScheme::Aasm,
                label_codes: r.labels.iter().map(|s| s.code() as i64).collect(),
                group_keys: r.group_keys.clone(),
            }
        }
        ContainerRecording::Preprocessed(r) => {
            for (kind, s) in r.signals() {
                let k = s.len() / r.epochs();
                channels.push(ChannelMeta {
                    kind: kind.name().into(),
                    rate_hz: k as f64 / super::EPOCH_SECONDS,
                    length: s.len(),
                });
                payload.extend_from_slice(s);
            }
            Meta {
                id: r.id().into(),
                epochs: r.epochs(),
                channels,
                label_scheme: LabelScheme::Merged,
                label_codes: r.labels().iter().map(|s| s.code()).collect(),
                group_keys: r.group_keys().clone(),
            }
        }
    };
    blob::encode(MAGIC, VERSION, &meta, &payload)
}

pub fn decode(bytes: &[u8]) -> Result<ContainerRecording> {
    let (meta, payload): (Meta, Vec<f32>) = blob::decode(MAGIC, VERSION, bytes)?;
    let declared: usize = meta.channels.iter().map(|c| c.length).sum();
    if declared != payload.len() {
        return Err(FormatError::TruncatedPayload {
            expected: declared * 4,
            actual: payload.len() * 4,
        }
        .into());
    }
    if meta.label_codes.len() != meta.epochs {
        return Err(FormatError::CorruptHeader(format!(
            "{} label codes for {} epochs",
            meta.label_codes.len(),
            meta.epochs
        ))
        .into());
    }
    let mut offset = 0;
    let mut series = BTreeMap::new();
    for ch in &meta.channels {
        let kind: SignalKind = ch.kind.parse().map_err(|_| FormatError::UnknownKind(ch.kind.clone()))?;
        let samples = payload[offset..offset + ch.length].to_vec();
        offset += ch.length;
        if series.insert(kind, (ch.rate_hz, samples)).is_some() {
            return Err(FormatError::CorruptHeader(format!("duplicate channel {kind}")).into());
        }
    }
    let corrupt = |e: Error| FormatError::CorruptHeader(e.to_string());
    Ok(match meta.label_scheme {
        LabelScheme::Aasm => {
            let labels = meta
                .label_codes
                .iter()
                .map(|&c| AasmStage::from_code(c))
                .collect::<Result<Vec<_>>>()
                .map_err(corrupt)?;
            let channels = series
                .into_iter()
                .map(|(k, (rate_hz, samples))| (k, RawChannel { rate_hz, samples }))
                .collect();
            ContainerRecording::Raw(RawRecording {
                id: meta.id,
                channels,
                labels,
                group_keys: meta.group_keys,
            })
        }
        LabelScheme::Merged => {
            let labels = meta
                .label_codes
                .iter()
                .map(|&c| SleepStage::from_code(c))
                .collect::<Result<Vec<_>>>()
                .map_err(corrupt)?;
            let signals = series.into_iter().map(|(k, (_, s))| (k, s)).collect();
            ContainerRecording::Preprocessed(
                PreprocessedRecording::new(meta.id, meta.epochs, signals, labels, meta.group_keys).map_err(corrupt)?,
            )
        }
    })
}

pub fn write_container(path: &Path, recording: &ContainerRecording) -> Result<()> {
    std::fs::write(path, encode(recording)).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<ContainerRecording> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::FormatBytes(source) => Error::Format {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

/// Reads a container that must already be on the model grid.
pub fn read_preprocessed(path: &Path) -> Result<PreprocessedRecording> {
    match read_container(path)? {
        ContainerRecording::Preprocessed(r) => Ok(r),
        ContainerRecording::Raw(r) => Err(Error::InvalidArgument(format!(
            "{}: recording `{}` is raw; run preprocess first",
            path.display(),
            r.id
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw() -> RawRecording {
        let mut channels = BTreeMap::new();
        channels.insert(
            SignalKind::Ecg,
            RawChannel {
                rate_hz: 2.0,
                samples: (0..180).map(|v| v as f32 * 0.25).collect(),
            },
        );
        channels.insert(
            SignalKind::Thx,
            RawChannel {
                rate_hz: 0.5,
                samples: vec![-1.5; 45],
            },
        );
        RawRecording {
            id: "r1".into(),
            channels,
            labels: vec![AasmStage::N1, AasmStage::Rem, AasmStage::N3],
            group_keys: [("age_band".to_string(), "40-60".to_string())].into(),
        }
    }

    #[test]
    fn raw_round_trip() {
        let r = ContainerRecording::Raw(raw());
        assert_eq!(decode(&encode(&r)).unwrap(), r);
    }

    #[test]
    fn header_length_mismatch_is_truncation() {
        let mut bytes = encode(&ContainerRecording::Raw(raw()));
        // Drop the tail: the envelope check catches it first.
        bytes.truncate(bytes.len() - 8);
        let err = decode(&bytes).unwrap_err();
        assert!(matches!(err.format_error(), Some(FormatError::TruncatedPayload { .. })));
    }

    fn rewrite_header(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
        let (mut value, payload) = blob::decode_value(MAGIC, VERSION, bytes).unwrap();
        edit(&mut value);
        blob::encode(MAGIC, VERSION, &value, &payload)
    }

    #[test]
    fn channel_length_mismatch_is_truncation() {
        let bytes = rewrite_header(&encode(&ContainerRecording::Raw(raw())), |v| {
            v["channels"][0]["length"] = serde_json::json!(500);
        });
        assert!(matches!(
            decode(&bytes).unwrap_err().format_error(),
            Some(FormatError::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn unknown_kind_is_rejected() {
        let bytes = rewrite_header(&encode(&ContainerRecording::Raw(raw())), |v| {
            v["channels"][1]["kind"] = serde_json::json!("EEG");
        });
        assert_eq!(
            decode(&bytes).unwrap_err().format_error(),
            Some(&FormatError::UnknownKind("EEG".into()))
        );
    }

    #[test]
    fn payload_tamper_is_checksum_error() {
        let mut bytes = encode(&ContainerRecording::Raw(raw()));
        let n = bytes.len();
        bytes[n - 2] ^= 0x40;
        assert!(matches!(
            decode(&bytes).unwrap_err().format_error(),
            Some(FormatError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn file_errors_carry_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.slpf");
        std::fs::write(&path, b"nonsense").unwrap();
        let err = read_container(&path).unwrap_err();
        assert!(err.to_string().contains("bad.slpf"));
        assert!(matches!(err.format_error(), Some(FormatError::BadMagic { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn preprocessed_round_trip_is_bit_exact(
            epochs in 1usize..6,
            bits in proptest::collection::vec(any::<u32>(), 48),
            kinds in 1u8..16,
            codes in proptest::collection::vec(-1i64..4, 6),
        ) {
            let mut signals = BTreeMap::new();
            for (i, kind) in SignalKind::ALL.into_iter().enumerate() {
                if kinds & (1 << i) != 0 {
                    let k = 2 + i;
                    let s: Vec<f32> = (0..k * epochs).map(|j| f32::from_bits(bits[(j + i) % bits.len()] & 0xff7f_ffff)).collect();
                    signals.insert(kind, s);
                }
            }
            let labels = codes[..epochs].iter().map(|&c| SleepStage::from_code(c).unwrap()).collect();
            let rec = ContainerRecording::Preprocessed(
                PreprocessedRecording::new("p", epochs, signals, labels, GroupKeys::new()).unwrap(),
            );
            let bytes = encode(&rec);
            let back = decode(&bytes).unwrap();
            // Compare through bytes so NaN payloads also count as equal.
            prop_assert_eq!(encode(&back), bytes);
        }
    }
}
