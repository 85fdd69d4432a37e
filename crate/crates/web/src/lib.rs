//! WebAssembly bindings for the static demo page in `www/`. Every function
//! takes plain numbers and returns JSON text so the page needs no glue beyond
//! the generated bindings.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use sleepfuse::data::{synth_generate, SynthConfig, EPOCH_SECONDS};
use sleepfuse::masking::{sample_mask, MaskingConfig};
use sleepfuse::model::{KindSet, SignalKind};
use sleepfuse::train::{lr_at, TrainConfig};

#[derive(Serialize)]
struct Channel {
    rate_hz: f64,
    samples: Vec<f32>,
}

#[derive(Serialize)]
struct SynthPreview {
    hypnogram: Vec<&'static str>,
    window_start_epoch: usize,
    channels: BTreeMap<&'static str, Channel>,
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data serialises")
}

fn js_err(e: sleepfuse::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Generates one recording and returns its whole hypnogram plus every channel
/// inside `[start_epoch, start_epoch + window_epochs)`.
#[wasm_bindgen]
pub fn synth_preview(seed: u32, duration_epochs: u32, start_epoch: u32, window_epochs: u32) -> Result<String, JsValue> {
    preview(seed, duration_epochs, start_epoch, window_epochs).map_err(js_err)
}

fn preview(seed: u32, duration_epochs: u32, start_epoch: u32, window_epochs: u32) -> sleepfuse::Result<String> {
    let config = SynthConfig {
        duration_epochs: duration_epochs.max(1) as usize,
        seed: seed as u64,
        ..SynthConfig::default()
    };
    let rec = synth_generate(&config)?;
    let start = (start_epoch as usize).min(config.duration_epochs - 1);
    let end = (start + window_epochs.max(1) as usize).min(config.duration_epochs);
    let channels = rec
        .channels
        .iter()
        .map(|(kind, ch)| {
            let per_epoch = ch.rate_hz * EPOCH_SECONDS;
            let a = ((start as f64 * per_epoch) as usize).min(ch.samples.len());
            let b = ((end as f64 * per_epoch) as usize).min(ch.samples.len());
            (
                kind.name(),
                Channel {
                    rate_hz: ch.rate_hz,
                    samples: ch.samples[a..b].to_vec(),
                },
            )
        })
        .collect();
    let hypnogram = rec
        .labels
        .iter()
        .map(|s| sleepfuse::data::merge_stages(*s).name())
        .collect();
    Ok(to_json(&SynthPreview {
        hypnogram,
        window_start_epoch: start,
        channels,
    }))
}

#[derive(Serialize)]
struct MaskingSummary {
    draws: u32,
    /// Fraction of draws keeping each kind, and the exact expectation.
    empirical_keep: BTreeMap<&'static str, f64>,
    expected_keep: BTreeMap<&'static str, f64>,
    /// Count of each kept set, keyed like "ECG,THX".
    kept_sets: BTreeMap<String, u32>,
}

/// Draws `draws` masks for the kinds in `available` (bits: ECG=1, PPG=2,
/// ABD=4, THX=8) with the given drop probabilities.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn masking_sample(
    available: u8,
    p_ecg: f64,
    p_ppg: f64,
    p_abd: f64,
    p_thx: f64,
    draws: u32,
    seed: u32,
) -> Result<String, JsValue> {
    let config = MaskingConfig {
        ecg: p_ecg,
        ppg: p_ppg,
        abd: p_abd,
        thx: p_thx,
        ..MaskingConfig::default()
    };
    config.validate().map_err(js_err)?;
    let available = KindSet::from_bits(available & 0x0f);
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let mut kept_counts = [0u32; 4];
    let mut kept_sets = BTreeMap::new();
    for _ in 0..draws {
        let m = sample_mask(available, &config, &mut rng).map_err(js_err)?;
        for k in m.kept().iter() {
            kept_counts[k.index()] += 1;
        }
        *kept_sets.entry(m.kept().to_string()).or_insert(0) += 1;
    }
    let kinds = || available.iter();
    Ok(to_json(&MaskingSummary {
        draws,
        empirical_keep: kinds()
            .map(|k| (k.name(), kept_counts[k.index()] as f64 / draws.max(1) as f64))
            .collect(),
        expected_keep: kinds()
            .map(|k| (k.name(), config.keep_probability(available, k)))
            .collect(),
        kept_sets,
    }))
}

/// Learning rate at `points` evenly spaced steps in `[0, steps]`.
#[wasm_bindgen]
pub fn lr_curve(max_lr: f64, warmup_steps: u32, half_life_steps: u32, steps: u32, points: u32) -> Vec<f64> {
    let config = TrainConfig {
        max_lr,
        warmup_steps: warmup_steps as u64,
        decay_half_life_steps: half_life_steps.max(1) as u64,
        ..TrainConfig::default()
    };
    let n = points.max(2) as u64;
    (0..n).map(|i| lr_at(i * steps as u64 / (n - 1), &config)).collect()
}

/// Names of the signal kinds in bit order.
#[wasm_bindgen]
pub fn signal_kinds() -> String {
    to_json(&SignalKind::ALL.iter().map(|k| k.name()).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preview_window_lengths() {
        let v: serde_json::Value = serde_json::from_str(&preview(3, 20, 4, 2).unwrap()).unwrap();
        assert_eq!(v["hypnogram"].as_array().unwrap().len(), 20);
        assert_eq!(v["window_start_epoch"], 4);
        assert_eq!(v["channels"]["ECG"]["samples"].as_array().unwrap().len(), 2 * 30 * 128);
        assert_eq!(v["channels"]["THX"]["samples"].as_array().unwrap().len(), 2 * 30 * 10);
    }

    #[test]
    fn masking_summary_keeps_single_kind() {
        let v: serde_json::Value =
            serde_json::from_str(&masking_sample(1, 0.5, 0.1, 0.7, 0.7, 500, 1).unwrap()).unwrap();
        assert_eq!(v["empirical_keep"]["ECG"], 1.0);
        assert_eq!(v["kept_sets"]["ECG"], 500);
    }

    #[test]
    fn lr_curve_endpoints() {
        let c = lr_curve(1e-3, 2000, 6000, 4000, 3);
        assert_eq!(c, vec![0.0, 1e-3, 1e-3 * 0.5f64.powf(2000.0 / 6000.0)]);
    }
}
