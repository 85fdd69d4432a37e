//! Stochastic modality masking, inversion augmentation and batch collation.
//!
//! A batch always carries every signal kind. Rows whose recording lacks a kind,
//! or whose mask dropped it, hold zeros and are excluded from that recording's
//! epoch-mixer attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PreprocessedRecording, SleepStage};
use crate::error::{shape_err, Error, Result};
use crate::model::{KindSet, ModelConfig, ModelInput, SignalKind, SignalRows};
use crate::tensor::{Scalar, Tensor};

/// Per-kind probability of dropping an available signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    pub ecg: f64,
    pub ppg: f64,
    pub abd: f64,
    pub thx: f64,
    /// Resamples after an all-dropped draw before falling back to all available.
    pub max_retries: u32,
    /// Probability of inverting each signal independently during training.
    pub invert_probability: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            ecg: 0.5,
            ppg: 0.1,
            abd: 0.7,
            thx: 0.7,
            max_retries: 8,
            invert_probability: 0.5,
        }
    }
}

impl MaskingConfig {
    /// No masking and no augmentation.
    pub fn disabled() -> Self {
        MaskingConfig {
            ecg: 0.0,
            ppg: 0.0,
            abd: 0.0,
            thx: 0.0,
            max_retries: 0,
            invert_probability: 0.0,
        }
    }

    pub fn drop_probability(&self, kind: SignalKind) -> f64 {
        match kind {
            SignalKind::Ecg => self.ecg,
            SignalKind::Ppg => self.ppg,
            SignalKind::Abd => self.abd,
            SignalKind::Thx => self.thx,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("ecg", self.ecg),
            ("ppg", self.ppg),
            ("abd", self.abd),
            ("thx", self.thx),
            ("invert_probability", self.invert_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "masking probability {name} = {p} is outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Exact probability that `kind` is kept given `available`, accounting for
    /// the retry-then-fallback rule.
    pub fn keep_probability(&self, available: KindSet, kind: SignalKind) -> f64 {
        if !available.contains(kind) {
            return 0.0;
        }
        let all_dropped: f64 = available.iter().map(|k| self.drop_probability(k)).product();
        let kept_once = 1.0 - self.drop_probability(kind);
        // Each attempt keeps `kind` with kept_once; attempts repeat while all are dropped.
        let attempts = self.max_retries as i32 + 1;
        let mut p = 0.0;
        for i in 0..attempts {
            p += all_dropped.powi(i) * kept_once;
        }
        p + all_dropped.powi(attempts)
    }
}

/// Which kinds a recording has and which a training step keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityMask {
    available: KindSet,
    kept: KindSet,
}

impl ModalityMask {
    pub fn new(available: KindSet, kept: KindSet) -> Result<Self> {
        if kept.is_empty() {
            return Err(Error::InvalidArgument("modality mask keeps nothing".into()));
        }
        if !kept.is_subset(available) {
            return Err(Error::InvalidArgument(format!(
                "kept {kept} is not a subset of available {available}"
            )));
        }
        Ok(ModalityMask { available, kept })
    }

    /// Keeps everything available.
    pub fn all(available: KindSet) -> Result<Self> {
        Self::new(available, available)
    }

    pub fn available(&self) -> KindSet {
        self.available
    }

    pub fn kept(&self) -> KindSet {
        self.kept
    }
}

/// Drops each available kind independently; an all-dropped draw is retried up
/// to `max_retries` times, then everything available is kept.
pub fn sample_mask(available: KindSet, config: &MaskingConfig, rng: &mut impl Rng) -> Result<ModalityMask> {
    if available.is_empty() {
        return Err(Error::InvalidArgument("no available modality to mask".into()));
    }
    for _ in 0..=config.max_retries {
        let kept: KindSet = available
            .iter()
            .filter(|&k| !rng.gen_bool(config.drop_probability(k)))
            .collect();
        if !kept.is_empty() {
            return ModalityMask::new(available, kept);
        }
    }
    ModalityMask::all(available)
}

/// Negates `x` in place when `invert` is set.
pub fn invert_with(x: &mut [f32], invert: bool) {
    if invert {
        for v in x {
            *v = -*v;
        }
    }
}

/// Flips a coin and negates `x` with probability `p`; returns whether it did.
pub fn augment_invert(x: &mut [f32], p: f64, rng: &mut impl Rng) -> bool {
    let flip = rng.gen_bool(p);
    invert_with(x, flip);
    flip
}

/// Fixed-shape training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub masks: Vec<ModalityMask>,
    /// Per kind in [`SignalKind::ALL`] order: `[B, k·T]`, zero outside kept rows.
    pub samples: Vec<Tensor<f32>>,
    /// `[B·T]`, row-major over recordings.
    pub labels: Vec<SleepStage>,
    pub epochs: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Whether row `b` feeds `kind` to the model.
    pub fn presence(&self, kind: SignalKind) -> Vec<bool> {
        self.masks.iter().map(|m| m.kept().contains(kind)).collect()
    }

    pub fn samples(&self, kind: SignalKind) -> &Tensor<f32> {
        &self.samples[kind.index()]
    }

    pub fn samples_mut(&mut self, kind: SignalKind) -> &mut Tensor<f32> {
        &mut self.samples[kind.index()]
    }

    /// Network input: every kind is a token; rows outside a kind's kept set are
    /// neither encoded nor attended to.
    pub fn model_input<F: Scalar>(&self, config: &ModelConfig) -> Result<ModelInput<F>> {
        if self.epochs != config.epochs {
            return Err(shape_err!(
                "batch has T = {}, model expects {}",
                self.epochs,
                config.epochs
            ));
        }
        let mut signals = Vec::new();
        for kind in SignalKind::ALL {
            let rows: Vec<usize> = (0..self.len())
                .filter(|&b| self.masks[b].kept().contains(kind))
                .collect();
            if rows.is_empty() {
                continue;
            }
            let src = self.samples(kind);
            let width = src.shape()[1];
            if width != config.signal_len(kind) {
                return Err(shape_err!(
                    "{kind}: {width} samples per row, model expects {}",
                    config.signal_len(kind)
                ));
            }
            let mut values = Vec::with_capacity(rows.len() * width);
            for &b in &rows {
                values.extend(
                    src.values()[b * width..(b + 1) * width]
                        .iter()
                        .map(|&v| F::lit(v as f64)),
                );
            }
            signals.push(SignalRows {
                kind,
                samples: Tensor::new(vec![rows.len(), width], values)?,
                rows,
            });
        }
        Ok(ModelInput {
            batch: self.len(),
            token_kinds: SignalKind::ALL.to_vec(),
            kept: self.masks.iter().map(|m| m.kept()).collect(),
            signals,
        })
    }
}

/// Pads and stacks recordings; each mask must describe its recording's kinds.
pub fn collate(recordings: &[PreprocessedRecording], masks: &[ModalityMask]) -> Result<Batch> {
    let Some(first) = recordings.first() else {
        return Err(Error::InvalidArgument("cannot collate an empty batch".into()));
    };
    if masks.len() != recordings.len() {
        return Err(shape_err!("{} masks for {} recordings", masks.len(), recordings.len()));
    }
    let t = first.epochs();
    let b = recordings.len();
    let mut widths = [None; 4];
    for (rec, mask) in recordings.iter().zip(masks) {
        if rec.epochs() != t {
            return Err(shape_err!(
                "recording {} has {} epochs, batch has {t}",
                rec.id(),
                rec.epochs()
            ));
        }
        if !mask.available().is_subset(rec.kinds()) {
            return Err(Error::MissingSignal {
                requested: mask.available().to_string(),
                available: format!("{} in recording {}", rec.kinds(), rec.id()),
            });
        }
        for (kind, s) in rec.signals() {
            match widths[kind.index()] {
                None => widths[kind.index()] = Some(s.len()),
                Some(w) if w != s.len() => {
                    return Err(shape_err!("{kind} length {} in {} differs from {w}", s.len(), rec.id()))
                }
                _ => {}
            }
        }
    }
    let samples = SignalKind::ALL
        .into_iter()
        .map(|kind| {
            let width = widths[kind.index()].unwrap_or(0);
            let mut values = vec![0.0f32; b * width];
            for (row, (rec, mask)) in recordings.iter().zip(masks).enumerate() {
                if mask.kept().contains(kind) {
                    let s = rec.signal(kind).expect("kept kinds are present");
                    values[row * width..(row + 1) * width].copy_from_slice(s);
                }
            }
            Tensor::new(vec![b, width], values)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        ids: recordings.iter().map(|r| r.id().to_string()).collect(),
        masks: masks.to_vec(),
        samples,
        labels: recordings.iter().flat_map(|r| r.labels().iter().copied()).collect(),
        epochs: t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::random_recording;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(kinds: &[SignalKind]) -> KindSet {
        kinds.iter().copied().collect()
    }

    #[test]
    fn single_kind_always_kept() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = MaskingConfig::default();
        let ecg = set(&[SignalKind::Ecg]);
        for _ in 0..10_000 {
            assert_eq!(sample_mask(ecg, &c, &mut rng).unwrap().kept(), ecg);
        }
    }

    #[test]
    fn same_seed_same_mask() {
        let c = MaskingConfig::default();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| sample_mask(KindSet::all(), &c, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
    }

    #[test]
    fn keep_probability_accounts_for_fallback() {
        let c = MaskingConfig::default();
        let a = set(&[SignalKind::Ecg, SignalKind::Ppg]);
        // Exhaustive enumeration over one attempt, then the geometric tail.
        let q: f64 = 0.5 * 0.1;
        let once = 0.9;
        let direct: f64 = (0..9).map(|i| q.powi(i) * once).sum::<f64>() + q.powi(9);
        assert!((c.keep_probability(a, SignalKind::Ppg) - direct).abs() < 1e-15);
        assert_eq!(c.keep_probability(set(&[SignalKind::Ecg]), SignalKind::Ecg), 1.0);
        assert_eq!(c.keep_probability(a, SignalKind::Abd), 0.0);
    }

    #[test]
    fn inversion_is_an_involution() {
        let x = vec![1.0, -2.5, 0.0, 3.0];
        let mut y = x.clone();
        invert_with(&mut y, true);
        assert_eq!(y, vec![-1.0, 2.5, 0.0, -3.0]);
        invert_with(&mut y, true);
        assert_eq!(y, x);
        let mut z = vec![0.0f32; 4];
        augment_invert(&mut z, 0.5, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn collate_pads_and_excludes() {
        let config = ModelConfig::gradcheck_tiny();
        let a = random_recording(&config, set(&[SignalKind::Ecg, SignalKind::Ppg]), 1);
        let b = random_recording(&config, set(&[SignalKind::Ecg, SignalKind::Ppg, SignalKind::Thx]), 2);
        let masks = [
            ModalityMask::all(a.kinds()).unwrap(),
            ModalityMask::new(b.kinds(), set(&[SignalKind::Thx])).unwrap(),
        ];
        let batch = collate(&[a.clone(), b], &masks).unwrap();
        let ecg = batch.samples(SignalKind::Ecg);
        let w = ecg.shape()[1];
        assert_eq!(&ecg.values()[..w], a.signal(SignalKind::Ecg).unwrap());
        assert!(ecg.values()[w..].iter().all(|&v| v == 0.0));
        assert!(batch.samples(SignalKind::Abd).values().iter().all(|&v| v == 0.0));
        assert_eq!(batch.presence(SignalKind::Ppg), vec![true, false]);
        assert_eq!(batch.presence(SignalKind::Thx), vec![false, true]);
        assert_eq!(batch.labels.len(), 2 * config.epochs);
        let input: ModelInput<f32> = batch.model_input(&config).unwrap();
        assert_eq!(input.kept[1], set(&[SignalKind::Thx]));
    }

    #[test]
    fn collate_rejects_absent_kinds() {
        let config = ModelConfig::gradcheck_tiny();
        let a = random_recording(&config, set(&[SignalKind::Ecg]), 1);
        let m = ModalityMask::all(set(&[SignalKind::Ecg, SignalKind::Abd])).unwrap();
        assert!(matches!(collate(&[a], &[m]), Err(Error::MissingSignal { .. })));
    }

    proptest! {
        #[test]
        fn kept_is_never_empty(
            bits in 1u8..16,
            probs in proptest::array::uniform4(0.0f64..=1.0),
            retries in 0u32..4,
            seed in any::<u64>(),
        ) {
            let c = MaskingConfig { ecg: probs[0], ppg: probs[1], abd: probs[2], thx: probs[3], max_retries: retries, ..Default::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = sample_mask(KindSet::from_bits(bits), &c, &mut rng).unwrap();
            prop_assert!(!m.kept().is_empty());
            prop_assert!(m.kept().is_subset(m.available()));
        }
    }
}
