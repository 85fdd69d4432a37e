//! Synthetic PSG: a semi-Markov hypnogram drives stage-dependent heart rate,
//! heart-rate variability, respiratory rate and respiratory-rate variability.
//!
//! Beat and breath times are generated sequentially; ECG is a sum of QRS and
//! T-wave Gaussians at each beat, PPG a broad delayed pulse at the same beats,
//! ABD/THX a breath-phase sinusoid. Every waveform gets Gaussian noise.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{AasmStage, ContainerRecording, GroupKeys, Manifest, RawChannel, RawRecording, Split, EPOCH_SECONDS};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SignalKind};

/// Per-stage values in AASM order: Wake, N1, N2, N3, REM.
pub type PerStage = [f64; 5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Jump-chain transition probabilities; row = current stage.
    pub transition: [[f64; 5]; 5],
    /// Mean of the geometric dwell time, in epochs (≥ 1).
    pub mean_dwell: PerStage,
    pub heart_rate_bpm: PerStage,
    /// Standard deviation of each beat interval as a fraction of its mean.
    pub beat_interval_cv: PerStage,
    pub breath_rate_bpm: PerStage,
    /// Standard deviation of each breath interval as a fraction of its mean.
    pub breath_interval_cv: PerStage,
    pub ppg_amplitude: PerStage,
    pub breath_amplitude: PerStage,
    pub ecg_noise: f64,
    pub ppg_noise: f64,
    pub breath_noise: f64,
    /// Between-subject standard deviation of the heart-rate offset.
    pub subject_heart_rate_sd: f64,
    pub subject_breath_rate_sd: f64,
    pub ecg_rate_hz: f64,
    pub ppg_rate_hz: f64,
    pub breath_rate_hz: f64,
    pub duration_epochs: usize,
    /// Set per recording by the caller; not part of configuration files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            transition: [
                [0.0, 0.7, 0.2, 0.0, 0.1],
                [0.2, 0.0, 0.7, 0.0, 0.1],
                [0.1, 0.15, 0.0, 0.45, 0.3],
                [0.1, 0.05, 0.85, 0.0, 0.0],
                [0.25, 0.25, 0.5, 0.0, 0.0],
            ],
            mean_dwell: [10.0, 4.0, 20.0, 15.0, 15.0],
            heart_rate_bpm: [80.0, 68.0, 62.0, 55.0, 72.0],
            beat_interval_cv: [0.08, 0.05, 0.04, 0.015, 0.09],
            breath_rate_bpm: [18.0, 15.0, 14.0, 12.0, 17.0],
            breath_interval_cv: [0.25, 0.12, 0.08, 0.03, 0.3],
            ppg_amplitude: [0.6, 0.9, 1.0, 1.3, 0.8],
            breath_amplitude: [1.4, 1.0, 1.0, 1.2, 0.6],
            ecg_noise: 0.1,
            ppg_noise: 0.1,
            breath_noise: 0.15,
            subject_heart_rate_sd: 4.0,
            subject_breath_rate_sd: 1.0,
            ecg_rate_hz: 128.0,
            ppg_rate_hz: 64.0,
            breath_rate_hz: 10.0,
            duration_epochs: 240,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.transition.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "transition row {} ({:?}) must be probabilities summing to 1, sums to {sum}",
                    i,
                    AasmStage::ALL[i]
                )));
            }
        }
        let positive = [
            ("mean_dwell", &self.mean_dwell),
            ("heart_rate_bpm", &self.heart_rate_bpm),
            ("breath_rate_bpm", &self.breath_rate_bpm),
        ];
        for (name, values) in positive {
            if values.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::Config(format!("{name} must be positive, got {values:?}")));
            }
        }
        if self.mean_dwell.iter().any(|&d| d < 1.0) {
            return Err(Error::Config("mean_dwell must be at least one epoch".into()));
        }
        let non_negative = [
            self.ecg_noise,
            self.ppg_noise,
            self.breath_noise,
            self.subject_heart_rate_sd,
            self.subject_breath_rate_sd,
        ];
        if non_negative
            .iter()
            .chain(self.beat_interval_cv.iter())
            .chain(self.breath_interval_cv.iter())
            .any(|&v| !(v >= 0.0))
        {
            return Err(Error::Config(
                "noise levels and variabilities must be non-negative".into(),
            ));
        }
        for (name, r) in [
            ("ecg", self.ecg_rate_hz),
            ("ppg", self.ppg_rate_hz),
            ("breath", self.breath_rate_hz),
        ] {
            if !(r > 0.0) {
                return Err(Error::Config(format!("{name}_rate_hz must be positive")));
            }
        }
        if self.duration_epochs == 0 {
            return Err(Error::Config("duration_epochs must be positive".into()));
        }
        Ok(())
    }

    /// Long-run fraction of epochs in each stage: jump-chain stationary
    /// distribution weighted by mean dwell.
    pub fn stage_occupancy(&self) -> PerStage {
        let mut pi = [0.2; 5];
        for _ in 0..10_000 {
            let mut next = [0.0; 5];
            for (i, row) in self.transition.iter().enumerate() {
                for (j, p) in row.iter().enumerate() {
                    next[j] += pi[i] * p;
                }
            }
            // Lazy step keeps periodic chains convergent without changing the fixed point.
            for j in 0..5 {
                pi[j] = 0.5 * (pi[j] + next[j]);
            }
        }
        let mut occ = [0.0; 5];
        for j in 0..5 {
            occ[j] = pi[j] * self.mean_dwell[j];
        }
        let total: f64 = occ.iter().sum();
        occ.map(|v| v / total)
    }
}

/// Semi-Markov walk starting in Wake.
pub fn hypnogram(config: &SynthConfig, epochs: usize, rng: &mut impl Rng) -> Vec<AasmStage> {
    let mut out = Vec::with_capacity(epochs);
    let mut stage = 0usize;
    while out.len() < epochs {
        let dwell = Geometric::new(1.0 / config.mean_dwell[stage])
            .expect("validated dwell")
            .sample(rng) as usize
            + 1;
        out.extend(std::iter::repeat_n(
            AasmStage::ALL[stage],
            dwell.min(epochs - out.len()),
        ));
        let u: f64 = rng.gen();
        let row = &config.transition[stage];
        let mut acc = 0.0;
        let mut next = 4;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                next = j;
                break;
            }
        }
        stage = next;
    }
    out
}

fn stage_at(labels: &[AasmStage], t: f64) -> usize {
    let e = ((t / EPOCH_SECONDS) as usize).min(labels.len() - 1);
    labels[e].index()
}

/// Successive event times where each interval is drawn from the stage active at its start.
fn event_times(labels: &[AasmStage], rate_bpm: impl Fn(usize) -> f64, cv: &PerStage, rng: &mut impl Rng) -> Vec<f64> {
    let end = labels.len() as f64 * EPOCH_SECONDS;
    let mut t = rng.gen::<f64>() * 60.0 / rate_bpm(labels[0].index());
    let mut out = Vec::new();
    while t < end {
        out.push(t);
        let s = stage_at(labels, t);
        let mean = 60.0 / rate_bpm(s);
        let z: f64 = rng.sample(StandardNormal);
        t += (mean * (1.0 + cv[s] * z)).max(0.25 * mean);
    }
    out
}

fn add_gaussian(out: &mut [f32], rate: f64, centre: f64, sigma: f64, amp: f64) {
    let lo = ((centre - 4.0 * sigma) * rate).floor().max(0.0) as usize;
    let hi = (((centre + 4.0 * sigma) * rate).ceil() as usize + 1).min(out.len());
    for (i, v) in out.iter_mut().enumerate().take(hi).skip(lo) {
        let d = (i as f64 / rate - centre) / sigma;
        *v += (amp * (-0.5 * d * d).exp()) as f32;
    }
}

fn add_noise(out: &mut [f32], sd: f64, rng: &mut impl Rng) {
    if sd > 0.0 {
        let n = Normal::new(0.0, sd).expect("non-negative sd");
        for v in out {
            *v += n.sample(rng) as f32;
        }
    }
}

/// Breath phase (in cycles) at time `t`, linear between breath onsets.
fn breath_phase(onsets: &[f64], t: f64) -> f64 {
    match onsets.partition_point(|&o| o <= t) {
        0 => {
            let period = onsets.get(1).map_or(4.0, |b| b - onsets[0]);
            (t - onsets[0]) / period
        }
        i if i == onsets.len() => {
            let n = onsets.len();
            let period = if n > 1 { onsets[n - 1] - onsets[n - 2] } else { 4.0 };
            (n - 1) as f64 + (t - onsets[n - 1]) / period
        }
        i => (i - 1) as f64 + (t - onsets[i - 1]) / (onsets[i] - onsets[i - 1]),
    }
}

const AGE_BANDS: [&str; 3] = ["18-39", "40-59", "60+"];

/// One recording with ground-truth AASM labels; deterministic in `config.seed`.
pub fn synth_generate(config: &SynthConfig) -> Result<RawRecording> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let epochs = config.duration_epochs;
    let labels = hypnogram(config, epochs, &mut rng);
    let band = rng.gen_range(0..AGE_BANDS.len());
    // Older subjects: lower variability, slightly higher resting rate.
    let age_hr = [-2.0, 0.0, 3.0][band];
    let age_var = [1.15, 1.0, 0.8][band];
    let hr_offset = config.subject_heart_rate_sd * rng.sample::<f64, _>(StandardNormal) + age_hr;
    let br_offset = config.subject_breath_rate_sd * rng.sample::<f64, _>(StandardNormal);
    let hr = |s: usize| (config.heart_rate_bpm[s] + hr_offset).max(30.0);
    let br = |s: usize| (config.breath_rate_bpm[s] + br_offset).max(4.0);
    let beat_cv = config.beat_interval_cv.map(|v| v * age_var);

    let duration = epochs as f64 * EPOCH_SECONDS;
    let breaths = event_times(&labels, br, &config.breath_interval_cv, &mut rng);
    let beats = event_times(&labels, hr, &beat_cv, &mut rng);

    let len = |rate: f64| (duration * rate).round() as usize;
    let respiration = |rate: f64, lag: f64, gain: f64| -> Vec<f32> {
        (0..len(rate))
            .map(|i| {
                let t = i as f64 / rate;
                let s = stage_at(&labels, t);
                let phase = breath_phase(&breaths, t - lag);
                (gain * config.breath_amplitude[s] * (2.0 * std::f64::consts::PI * phase).sin()) as f32
            })
            .collect()
    };
    let mut abd = respiration(config.breath_rate_hz, 0.0, 1.0);
    let mut thx = respiration(config.breath_rate_hz, 0.15, 0.8);

    let ecg_rate = config.ecg_rate_hz;
    let mut ecg = vec![0.0f32; len(ecg_rate)];
    for &b in &beats {
        // Respiration modulates R amplitude.
        let edr = 1.0 + 0.1 * (2.0 * std::f64::consts::PI * breath_phase(&breaths, b)).sin();
        add_gaussian(&mut ecg, ecg_rate, b, 0.012, edr);
        add_gaussian(&mut ecg, ecg_rate, b + 0.25, 0.05, 0.3);
    }
    // Baseline wander from breathing.
    for (i, v) in ecg.iter_mut().enumerate() {
        let t = i as f64 / ecg_rate;
        *v += (0.1 * (2.0 * std::f64::consts::PI * breath_phase(&breaths, t)).sin()) as f32;
    }

    let ppg_rate = config.ppg_rate_hz;
    let mut ppg = vec![0.0f32; len(ppg_rate)];
    for &b in &beats {
        let s = stage_at(&labels, b);
        add_gaussian(&mut ppg, ppg_rate, b + 0.2, 0.12, config.ppg_amplitude[s]);
    }

    add_noise(&mut ecg, config.ecg_noise, &mut rng);
    add_noise(&mut ppg, config.ppg_noise, &mut rng);
    add_noise(&mut abd, config.breath_noise, &mut rng);
    add_noise(&mut thx, config.breath_noise, &mut rng);

    let mut channels = BTreeMap::new();
    channels.insert(
        SignalKind::Ecg,
        RawChannel {
            rate_hz: ecg_rate,
            samples: ecg,
        },
    );
    channels.insert(
        SignalKind::Ppg,
        RawChannel {
            rate_hz: ppg_rate,
            samples: ppg,
        },
    );
    channels.insert(
        SignalKind::Abd,
        RawChannel {
            rate_hz: config.breath_rate_hz,
            samples: abd,
        },
    );
    channels.insert(
        SignalKind::Thx,
        RawChannel {
            rate_hz: config.breath_rate_hz,
            samples: thx,
        },
    );
    let mut group_keys = GroupKeys::new();
    group_keys.insert("age_band".into(), AGE_BANDS[band].into());
    Ok(RawRecording {
        id: format!("synth-{:06}", config.seed),
        channels,
        labels,
        group_keys,
    })
}

/// Recording counts per split for [`write_dataset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

/// Generates `train + validation + test` recordings with seeds `config.seed + i`,
/// writes one container each into `dir` plus `manifest.json`, and returns the
/// manifest path. With a model config the containers hold preprocessed data.
pub fn write_dataset(
    config: &SynthConfig,
    sizes: SplitSizes,
    dir: &Path,
    preprocess_for: Option<&ModelConfig>,
) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::new(dir);
    let splits = std::iter::repeat_n(Split::Train, sizes.train)
        .chain(std::iter::repeat_n(Split::Validation, sizes.validation))
        .chain(std::iter::repeat_n(Split::Test, sizes.test));
    for (i, split) in splits.enumerate() {
        let c = SynthConfig {
            seed: config.seed.wrapping_add(i as u64),
            ..config.clone()
        };
        let raw = synth_generate(&c)?;
        let name = format!("{}.slpf", raw.id);
        let keys = raw.group_keys.clone();
        let rec = match preprocess_for {
            Some(m) => ContainerRecording::Preprocessed(super::preprocess(&raw, m)?),
            None => ContainerRecording::Raw(raw),
        };
        super::write_container(&dir.join(&name), &rec)?;
        manifest.push(name, split, keys);
    }
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let c = SynthConfig {
            duration_epochs: 20,
            seed: 7,
            ..Default::default()
        };
        let a = synth_generate(&c).unwrap();
        assert_eq!(a, synth_generate(&c).unwrap());
        assert_ne!(a, synth_generate(&SynthConfig { seed: 8, ..c }).unwrap());
        a.validate().unwrap();
        assert_eq!(a.labels[0], AasmStage::Wake);
    }

    #[test]
    fn invalid_matrix_is_rejected() {
        let mut c = SynthConfig::default();
        c.transition[2] = [0.5, 0.5, 0.5, 0.0, 0.0];
        assert!(matches!(synth_generate(&c), Err(Error::Config(_))));
        let mut c = SynthConfig::default();
        c.breath_rate_bpm[4] = 0.0;
        assert!(c.validate().is_err());
    }

    /// Occupancy oracle by direct linear solve of the jump chain's balance equations.
    fn occupancy_by_elimination(c: &SynthConfig) -> [f64; 5] {
        // Solve πᵀ(P − I) = 0 with Σπ = 1 via Gaussian elimination on a 5×6 system.
        let mut a = [[0.0f64; 6]; 5];
        for j in 0..4 {
            for i in 0..5 {
                a[j][i] = c.transition[i][j] - if i == j { 1.0 } else { 0.0 };
            }
        }
        a[4] = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        for col in 0..5 {
            let pivot = (col..5)
                .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
                .unwrap();
            a.swap(col, pivot);
            for r in 0..5 {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for k in col..6 {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
        let pi: Vec<f64> = (0..5).map(|i| a[i][5] / a[i][i]).collect();
        let w: Vec<f64> = (0..5).map(|i| pi[i] * c.mean_dwell[i]).collect();
        let s: f64 = w.iter().sum();
        [w[0] / s, w[1] / s, w[2] / s, w[3] / s, w[4] / s]
    }

    #[test]
    fn occupancy_matches_balance_equations() {
        let c = SynthConfig::default();
        let fast = c.stage_occupancy();
        let exact = occupancy_by_elimination(&c);
        for i in 0..5 {
            assert!((fast[i] - exact[i]).abs() < 1e-9, "{fast:?} vs {exact:?}");
        }
    }

    #[test]
    fn stage_marginals_match_stationary_distribution() {
        let c = SynthConfig::default();
        let expected = occupancy_by_elimination(&c);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // Batch means over long independent stretches give an honest σ despite autocorrelation.
        let batches = 100;
        let per_batch = 4000;
        let mut fractions = vec![[0.0; 5]; batches];
        for f in &mut fractions {
            for s in hypnogram(&c, per_batch, &mut rng) {
                f[s.index()] += 1.0 / per_batch as f64;
            }
        }
        for stage in 0..5 {
            let mean = fractions.iter().map(|f| f[stage]).sum::<f64>() / batches as f64;
            let var = fractions.iter().map(|f| (f[stage] - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
            let sigma = (var / batches as f64).sqrt();
            // The Wake start biases each batch by at most one dwell; allow for it.
            let bias = c.mean_dwell[0] / per_batch as f64;
            assert!(
                (mean - expected[stage]).abs() <= 3.0 * sigma + bias,
                "stage {stage}: {mean} vs {} (σ {sigma})",
                expected[stage]
            );
        }
    }

    /// Breath onsets recovered from the noisy THX waveform by hysteresis zero crossings.
    fn measured_intervals(rec: &RawRecording) -> BTreeMap<AasmStage, Vec<f64>> {
        let ch = &rec.channels[&SignalKind::Thx];
        let mut armed = false;
        let mut last: Option<f64> = None;
        let mut out: BTreeMap<AasmStage, Vec<f64>> = BTreeMap::new();
        for (i, &v) in ch.samples.iter().enumerate() {
            let t = i as f64 / ch.rate_hz;
            if v < -0.25 {
                armed = true;
            } else if armed && v > 0.25 {
                armed = false;
                if let Some(prev) = last {
                    let a = rec.labels[(prev / EPOCH_SECONDS) as usize];
                    let b = rec.labels[((t / EPOCH_SECONDS) as usize).min(rec.labels.len() - 1)];
                    if a == b {
                        out.entry(a).or_default().push(t - prev);
                    }
                }
                last = Some(t);
            }
        }
        out
    }

    #[test]
    fn rem_breathing_is_more_irregular_than_deep() {
        let mut rem = Vec::new();
        let mut deep = Vec::new();
        for seed in 0..6 {
            let rec = synth_generate(&SynthConfig {
                seed,
                ..Default::default()
            })
            .unwrap();
            let m = measured_intervals(&rec);
            rem.extend(m.get(&AasmStage::Rem).cloned().unwrap_or_default());
            deep.extend(m.get(&AasmStage::N3).cloned().unwrap_or_default());
        }
        let sd = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
        };
        assert!(
            rem.len() > 50 && deep.len() > 50,
            "{} REM, {} deep intervals",
            rem.len(),
            deep.len()
        );
        assert!(sd(&rem) > sd(&deep), "REM sd {} vs deep sd {}", sd(&rem), sd(&deep));
    }
}
