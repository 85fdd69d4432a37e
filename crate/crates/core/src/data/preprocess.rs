//! Resample → normalise → pad/truncate, plus the five-to-four stage merge.

use std::collections::BTreeMap;

use super::{AasmStage, PreprocessedRecording, RawRecording, SleepStage, EPOCH_SECONDS};
use crate::error::{shape_err, Error, Result};
use crate::model::{ModelConfig, SignalKind};

/// Endpoint-inclusive linear interpolation: output sample `i` reads input
/// position `i · (N_in − 1) / (N_out − 1)`.
pub fn resample_to_len(series: &[f32], n_out: usize) -> Result<Vec<f32>> {
    if series.is_empty() {
        return Err(Error::InvalidArgument("cannot resample an empty series".into()));
    }
    if n_out == 0 {
        return Ok(Vec::new());
    }
    if series.len() == n_out {
        return Ok(series.to_vec());
    }
    if series.len() == 1 {
        if n_out == 1 {
            return Ok(series.to_vec());
        }
        return Err(Error::InvalidArgument(format!(
            "cannot interpolate a single sample to {n_out} samples"
        )));
    }
    if n_out == 1 {
        return Ok(vec![series[0]]);
    }
    let step = (series.len() - 1) as f64 / (n_out - 1) as f64;
    let last = series.len() - 1;
    Ok((0..n_out)
        .map(|i| {
            let pos = i as f64 * step;
            let lo = (pos.floor() as usize).min(last);
            let hi = (lo + 1).min(last);
            let frac = pos - lo as f64;
            (series[lo] as f64 * (1.0 - frac) + series[hi] as f64 * frac) as f32
        })
        .collect())
}

/// Resamples a series recorded at `native_rate_hz` to `k` samples per 30-second
/// epoch; the epoch count is the series duration rounded to whole epochs.
pub fn resample(series: &[f32], native_rate_hz: f64, k: usize) -> Result<Vec<f32>> {
    if !(native_rate_hz > 0.0) {
        return Err(Error::InvalidArgument(format!("sampling rate {native_rate_hz} Hz")));
    }
    let epochs = (series.len() as f64 / (native_rate_hz * EPOCH_SECONDS))
        .round()
        .max(1.0) as usize;
    resample_to_len(series, k * epochs)
}

/// Z-score over the whole series with the population standard deviation;
/// a constant series maps to zeros.
pub fn normalize(series: &[f32]) -> Vec<f32> {
    if series.is_empty() {
        return Vec::new();
    }
    let n = series.len() as f64;
    let mean = series.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = series.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= f64::EPSILON * mean.abs().max(1.0) {
        return vec![0.0; series.len()];
    }
    series.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect()
}

pub fn merge_stages(stage: AasmStage) -> SleepStage {
    match stage {
        AasmStage::Wake => SleepStage::Wake,
        AasmStage::N1 | AasmStage::N2 => SleepStage::Light,
        AasmStage::N3 => SleepStage::Deep,
        AasmStage::Rem => SleepStage::Rem,
    }
}

/// Cuts or zero-pads every signal and the labels to exactly `config.epochs`
/// epochs, keeping the start. Padded epochs are labelled `Ignore`.
/// Signals must already hold `k` samples per epoch for `labels.len()` epochs.
pub fn pad_truncate(
    id: &str,
    signals: BTreeMap<SignalKind, Vec<f32>>,
    labels: Vec<SleepStage>,
    group_keys: super::GroupKeys,
    config: &ModelConfig,
) -> Result<PreprocessedRecording> {
    let epochs = labels.len();
    if epochs == 0 {
        return Err(shape_err!("{id}: zero-length recording"));
    }
    let t = config.epochs;
    let mut out = BTreeMap::new();
    for (kind, mut s) in signals {
        let k = config.k(kind);
        if s.len() != k * epochs {
            return Err(shape_err!(
                "{id}: {kind} has {} samples, expected {k}·{epochs}",
                s.len()
            ));
        }
        s.resize(k * t, 0.0);
        out.insert(kind, s);
    }
    let mut labels = labels;
    labels.resize(t, SleepStage::Ignore);
    PreprocessedRecording::new(id, t, out, labels, group_keys)
}

/// Full pipeline for one recording on the grid defined by `config`.
pub fn preprocess(raw: &RawRecording, config: &ModelConfig) -> Result<PreprocessedRecording> {
    raw.validate()?;
    let epochs = raw.labels.len();
    if epochs == 0 {
        return Err(shape_err!("{}: zero-length recording", raw.id));
    }
    let mut signals = BTreeMap::new();
    for (&kind, ch) in &raw.channels {
        let span = ((epochs as f64) * EPOCH_SECONDS * ch.rate_hz).round() as usize;
        let cropped = &ch.samples[..span.min(ch.samples.len())];
        let resampled = resample_to_len(cropped, config.k(kind) * epochs)?;
        signals.insert(kind, normalize(&resampled));
    }
    let labels = raw.labels.iter().copied().map(merge_stages).collect();
    pad_truncate(&raw.id, signals, labels, raw.group_keys.clone(), config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn resample_examples() {
        assert!(close(
            &resample_to_len(&[0.0, 2.0], 4).unwrap(),
            &[0.0, 2.0 / 3.0, 4.0 / 3.0, 2.0],
            1e-6
        ));
        let s: Vec<f32> = (0..64).map(|v| v as f32 * 0.5).collect();
        // 32 samples per 30 s is already 32 per epoch.
        assert_eq!(resample(&s, 32.0 / 30.0, 32).unwrap(), s);
        assert!(resample_to_len(&[1.0], 3).is_err());
        assert!(resample_to_len(&[], 3).is_err());
    }

    #[test]
    fn normalize_examples() {
        assert!(close(&normalize(&[1.0, 3.0]), &[-1.0, 1.0], 1e-7));
        assert_eq!(normalize(&[4.2; 5]), vec![0.0; 5]);
    }

    #[test]
    fn merge_is_total_and_surjective() {
        assert_eq!(merge_stages(AasmStage::N1), SleepStage::Light);
        assert_eq!(merge_stages(AasmStage::N2), SleepStage::Light);
        assert_eq!(merge_stages(AasmStage::Rem), SleepStage::Rem);
        let image: std::collections::BTreeSet<_> = AasmStage::ALL.into_iter().map(merge_stages).collect();
        assert_eq!(image.into_iter().collect::<Vec<_>>(), SleepStage::CLASSES.to_vec());
    }

    fn grid() -> ModelConfig {
        ModelConfig {
            epochs: 1200,
            cardiac_k: 4,
            respiratory_k: 2,
            ..ModelConfig::default()
        }
    }

    fn recording(epochs: usize) -> (BTreeMap<SignalKind, Vec<f32>>, Vec<SleepStage>) {
        let mut s = BTreeMap::new();
        s.insert(SignalKind::Ecg, (0..4 * epochs).map(|v| 1.0 + v as f32).collect());
        s.insert(SignalKind::Abd, (0..2 * epochs).map(|v| 1.0 + v as f32).collect());
        (s, vec![SleepStage::Deep; epochs])
    }

    #[test]
    fn pad_truncate_rules() {
        let c = grid();
        let (s, l) = recording(1300);
        let r = pad_truncate("a", s.clone(), l, Default::default(), &c).unwrap();
        assert_eq!(r.signal(SignalKind::Ecg).unwrap(), &s[&SignalKind::Ecg][..4 * 1200]);
        assert!(r.labels().iter().all(|&x| x == SleepStage::Deep));

        let (s, l) = recording(1000);
        let r = pad_truncate("b", s, l, Default::default(), &c).unwrap();
        let ecg = r.signal(SignalKind::Ecg).unwrap();
        assert_eq!(ecg.len(), 4800);
        assert!(ecg[4000..].iter().all(|&v| v == 0.0));
        assert!(ecg[..4000].iter().all(|&v| v != 0.0));
        assert!(r.labels()[1000..].iter().all(|&x| x == SleepStage::Ignore));
        assert!(r.labels()[..1000].iter().all(|&x| x == SleepStage::Deep));

        let (s, l) = recording(1200);
        let r = pad_truncate("c", s.clone(), l.clone(), Default::default(), &c).unwrap();
        assert_eq!(r.signal(SignalKind::Abd).unwrap(), s[&SignalKind::Abd].as_slice());
        assert_eq!(r.labels(), l.as_slice());

        assert!(pad_truncate("d", BTreeMap::new(), vec![], Default::default(), &c).is_err());
    }

    proptest! {
        #[test]
        fn resample_preserves_monotonicity(
            mut xs in proptest::collection::vec(-100.0f32..100.0, 2..50),
            n_out in 2usize..200,
        ) {
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let ys = resample_to_len(&xs, n_out).unwrap();
            prop_assert_eq!(ys.len(), n_out);
            prop_assert!(ys.windows(2).all(|w| w[0] <= w[1] + 1e-4));
            prop_assert_eq!(ys[0], xs[0]);
            prop_assert!((ys[n_out - 1] - xs[xs.len() - 1]).abs() < 1e-4);
        }

        #[test]
        fn normalize_is_idempotent(xs in proptest::collection::vec(-1e3f32..1e3, 2..200)) {
            let once = normalize(&xs);
            let twice = normalize(&once);
            prop_assert!(once.iter().zip(&twice).all(|(a, b)| (a - b).abs() < 1e-5));
            let n = once.len() as f64;
            let mean = once.iter().map(|&v| v as f64).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-5);
        }
    }
}
