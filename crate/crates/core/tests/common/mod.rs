#![allow(dead_code)]

use sleepfuse::data::{preprocess, synth_generate, PreprocessedRecording, SynthConfig};
use sleepfuse::model::ModelConfig;

/// `n` synthetic recordings on `model`'s grid, seeds `seed..seed + n`.
pub fn synth_recordings(model: &ModelConfig, n: u64, seed: u64) -> Vec<PreprocessedRecording> {
    (seed..seed + n)
        .map(|s| {
            let config = SynthConfig {
                duration_epochs: model.epochs,
                seed: s,
                ..SynthConfig::default()
            };
            preprocess(&synth_generate(&config).unwrap(), model).unwrap()
        })
        .collect()
}

/// max |a − b| / max |b|.
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

pub fn widen(xs: &[f32]) -> Vec<f64> {
    xs.iter().map(|&v| v as f64).collect()
}
