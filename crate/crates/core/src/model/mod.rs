//! The three-stage network: signal encoders, epoch mixer, sequence mixer.

mod config;
pub mod encoder;
pub mod epoch_mixer;
mod params;
pub mod sequence_mixer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{KindSet, ModelConfig, SignalKind};
pub use params::{check_layout, init_params, layout, Bound, Init, Params};

use crate::data::{PreprocessedRecording, SleepStage};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{dropout_mask, AttentionMask, Scalar, Tape, Tensor, Var};

/// Dropout state for one forward pass. Evaluation passes carry no RNG.
pub struct ForwardCtx {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, seed: u64) -> Self {
        ForwardCtx {
            rate,
            rng: (rate > 0.0).then(|| ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn dropout<F: Scalar>(&mut self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        match &mut self.rng {
            Some(rng) => {
                let mask = dropout_mask(tape.value(x).len(), self.rate, rng);
                tape.dropout(x, mask)
            }
            None => Ok(x),
        }
    }
}

/// Samples of one kind for the subset of batch rows that carry it.
#[derive(Clone, Debug)]
pub struct SignalRows<F> {
    pub kind: SignalKind,
    /// Batch rows, ascending.
    pub rows: Vec<usize>,
    /// `[rows.len(), k·T]`.
    pub samples: Tensor<F>,
}

/// Network input for `batch` recordings. The epoch mixer sees one token per
/// entry of `token_kinds` (plus CLS); a token is attended to only where the
/// recording's `kept` set contains its kind.
#[derive(Clone, Debug)]
pub struct ModelInput<F> {
    pub batch: usize,
    pub token_kinds: Vec<SignalKind>,
    pub kept: Vec<KindSet>,
    pub signals: Vec<SignalRows<F>>,
}

impl<F: Scalar> ModelInput<F> {
    /// Single recording restricted to `subset`: no padding, no masking.
    pub fn single(recording: &PreprocessedRecording, subset: KindSet) -> Result<Self> {
        if subset.is_empty() {
            return Err(Error::InvalidArgument("empty modality subset".into()));
        }
        let mut signals = Vec::new();
        for kind in subset.iter() {
            let samples = recording.signal(kind).ok_or_else(|| Error::MissingSignal {
                requested: kind.to_string(),
                available: recording.kinds().to_string(),
            })?;
            signals.push(SignalRows {
                kind,
                rows: vec![0],
                samples: Tensor::new(
                    vec![1, samples.len()],
                    samples.iter().map(|&v| F::lit(v as f64)).collect(),
                )?,
            });
        }
        Ok(ModelInput {
            batch: 1,
            token_kinds: subset.iter().collect(),
            kept: vec![subset],
            signals,
        })
    }
}

/// Runs the full network; returns logits `[B, T, classes]`.
pub fn forward<F: Scalar>(
    tape: &mut Tape<F>,
    p: &Bound,
    config: &ModelConfig,
    ctx: &mut ForwardCtx,
    input: &ModelInput<F>,
) -> Result<Var> {
    let b = input.batch;
    let t = config.epochs;
    let d = config.feature_dim;
    if input.kept.len() != b {
        return Err(shape_err!("{} kept sets for batch of {b}", input.kept.len()));
    }
    if input.token_kinds.is_empty() {
        return Err(Error::InvalidArgument("no token kinds".into()));
    }
    for (row, kept) in input.kept.iter().enumerate() {
        if kept.is_empty() {
            return Err(Error::InvalidArgument(format!("recording {row} keeps no modality")));
        }
    }

    let mut feats = Vec::with_capacity(input.token_kinds.len());
    for &kind in &input.token_kinds {
        let z = match input.signals.iter().find(|s| s.kind == kind && !s.rows.is_empty()) {
            Some(sig) => {
                let r = sig.rows.len();
                let len = config.signal_len(kind);
                let x = tape.constant(sig.samples.clone().reshape(vec![r, 1, len]).map_err(|_| {
                    shape_err!(
                        "{kind} samples {:?}, expected [{r}, {len}] (k = {}, T = {t})",
                        sig.samples.shape(),
                        config.k(kind)
                    )
                })?);
                let z = encoder::encode(tape, p, config, ctx, kind, x)?;
                tape.release(x);
                let z = if r == b { z } else { tape.scatter_rows(z, &sig.rows, b)? };
                tape.reshape(z, &[b * t, d])?
            }
            None => tape.constant(Tensor::zeros(&[b * t, d])),
        };
        let z = if config.modality_embeddings {
            tape.add_bias(z, p.var(&format!("epoch_mixer.embedding.{kind}"))?)?
        } else {
            z
        };
        feats.push(z);
    }
    let tokens = tape.stack_tokens(p.var("epoch_mixer.cls")?, &feats)?;

    let dense = input
        .kept
        .iter()
        .all(|k| input.token_kinds.iter().all(|&kind| k.contains(kind)));
    let masks = if dense {
        None
    } else {
        let per_recording: Vec<AttentionMask> = input
            .kept
            .iter()
            .map(|k| {
                let present: Vec<bool> = std::iter::once(true)
                    .chain(input.token_kinds.iter().map(|&kind| k.contains(kind)))
                    .collect();
                AttentionMask::from_key_presence(&present)
            })
            .collect::<Result<_>>()?;
        Some(
            per_recording
                .iter()
                .flat_map(|m| std::iter::repeat_n(m.clone(), t))
                .collect::<Vec<_>>(),
        )
    };
    let fused = epoch_mixer::mix(tape, p, config, ctx, tokens, masks.as_deref())?;
    let z = tape.reshape(fused, &[b, t, d])?;
    sequence_mixer::mix(tape, p, config, ctx, z)
}

/// Summed cross-entropy of logits `[B, T, C]` against stage labels; `Ignore`
/// epochs contribute nothing.
pub fn loss<F: Scalar>(tape: &mut Tape<F>, logits: Var, labels: &[SleepStage]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    let rows = s.iter().take(s.len().saturating_sub(1)).product::<usize>();
    let classes = *s.last().unwrap_or(&0);
    let flat = tape.reshape(logits, &[rows, classes])?;
    let targets: Vec<Option<usize>> = labels.iter().map(|l| l.class_index()).collect();
    tape.softmax_cross_entropy(flat, &targets)
}

/// Numerically stable softmax over each row of `[rows, classes]` logits.
pub fn softmax_rows<F: Scalar>(logits: &[F], classes: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / denom) as f32));
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// A configured network with its parameters.
#[derive(Clone, Debug)]
pub struct Model<F: Scalar = f32> {
    pub config: ModelConfig,
    pub params: Params<F>,
}

/// Per-epoch class probabilities and the resulting hypnogram.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub stages: Vec<SleepStage>,
    /// `[T, 4]` row-major.
    pub probabilities: Tensor<f32>,
}

impl<F: Scalar> Model<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Params<F>) -> Result<Self> {
        config.validate()?;
        check_layout(&config, &params)?;
        Ok(Model { config, params })
    }

    /// Encodes one signal of length `k·T` into its `[T, d]` feature sequence.
    pub fn encode_signal(&self, kind: SignalKind, samples: &[F]) -> Result<Tensor<F>> {
        let len = self.config.signal_len(kind);
        if samples.len() != len {
            return Err(shape_err!("{kind} signal of length {}, expected {len}", samples.len()));
        }
        let mut tape = Tape::inference();
        let p = self.params.bind(&mut tape);
        let x = tape.constant(Tensor::new(vec![1, 1, len], samples.to_vec())?);
        let z = encoder::encode(&mut tape, &p, &self.config, &mut ForwardCtx::eval(), kind, x)?;
        tape.tensor(z)
            .reshape(vec![self.config.epochs, self.config.feature_dim])
    }

    /// Fuses one epoch's feature vectors (any order, no repeated kinds) into one vector.
    /// With `mask`, only the listed kinds are attended to; the rest are present but masked.
    pub fn mix_epoch(&self, features: &[(SignalKind, Vec<F>)], mask: Option<KindSet>) -> Result<Vec<F>> {
        if features.is_empty() {
            return Err(Error::InvalidArgument("epoch mixer needs at least one feature".into()));
        }
        let d = self.config.feature_dim;
        let mut seen = KindSet::empty();
        let mut tape = Tape::inference();
        let p = self.params.bind(&mut tape);
        let mut feats = Vec::new();
        for (kind, f) in features {
            if f.len() != d || seen.contains(*kind) {
                return Err(shape_err!(
                    "feature for {kind}: width {} (expected {d}) or repeated",
                    f.len()
                ));
            }
            seen.insert(*kind);
            let v = tape.constant(Tensor::new(vec![1, d], f.clone())?);
            let v = if self.config.modality_embeddings {
                tape.add_bias(v, p.var(&format!("epoch_mixer.embedding.{kind}"))?)?
            } else {
                v
            };
            feats.push(v);
        }
        let tokens = tape.stack_tokens(p.var("epoch_mixer.cls")?, &feats)?;
        let masks = match mask {
            None => None,
            Some(keep) => {
                if !features.iter().any(|(k, _)| keep.contains(*k)) {
                    return Err(Error::InvalidArgument("mask keeps no feature".into()));
                }
                let present: Vec<bool> = std::iter::once(true)
                    .chain(features.iter().map(|(k, _)| keep.contains(*k)))
                    .collect();
                Some(vec![AttentionMask::from_key_presence(&present)?])
            }
        };
        let out = epoch_mixer::mix(
            &mut tape,
            &p,
            &self.config,
            &mut ForwardCtx::eval(),
            tokens,
            masks.as_deref(),
        )?;
        Ok(tape.value(out).to_vec())
    }

    /// Sequence mixer on a `[T, d]` feature sequence; returns `[T, classes]` logits.
    pub fn mix_sequence(&self, z: &Tensor<F>) -> Result<Tensor<F>> {
        let (t, d) = (self.config.epochs, self.config.feature_dim);
        if z.shape() != [t, d] {
            return Err(shape_err!("sequence mixer expects [{t}, {d}], got {:?}", z.shape()));
        }
        let mut tape = Tape::inference();
        let p = self.params.bind(&mut tape);
        let x = tape.constant(z.clone().reshape(vec![1, t, d])?);
        let y = sequence_mixer::mix(&mut tape, &p, &self.config, &mut ForwardCtx::eval(), x)?;
        tape.tensor(y).reshape(vec![t, self.config.classes])
    }

    /// Logits `[B, T, classes]` for an arbitrary input, dropout off.
    pub fn logits(&self, input: &ModelInput<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::inference();
        let p = self.params.bind(&mut tape);
        let y = forward(&mut tape, &p, &self.config, &mut ForwardCtx::eval(), input)?;
        Ok(tape.tensor(y))
    }

    /// Stages a recording from the signals in `subset` only.
    pub fn predict(&self, recording: &PreprocessedRecording, subset: KindSet) -> Result<Prediction> {
        if recording.epochs() != self.config.epochs {
            return Err(shape_err!(
                "recording has {} epochs, model expects {}",
                recording.epochs(),
                self.config.epochs
            ));
        }
        let input = ModelInput::single(recording, subset)?;
        let logits = self.logits(&input)?;
        let c = self.config.classes;
        let probs = softmax_rows(logits.values(), c);
        let stages = probs
            .chunks(c)
            .map(|row| SleepStage::from_class_index(argmax(row)))
            .collect();
        Ok(Prediction {
            stages,
            probabilities: Tensor::new(vec![self.config.epochs, c], probs)?,
        })
    }
}

/// Random recording on the model's grid (used by gradient checks and tests).
pub fn random_recording(config: &ModelConfig, kinds: KindSet, seed: u64) -> PreprocessedRecording {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signals = kinds
        .iter()
        .map(|k| {
            (
                k,
                (0..config.signal_len(k)).map(|_| rng.gen_range(-2.0f32..2.0)).collect(),
            )
        })
        .collect();
    let labels = (0..config.epochs)
        .map(|_| {
            if rng.gen_bool(0.1) {
                SleepStage::Ignore
            } else {
                SleepStage::from_class_index(rng.gen_range(0..4))
            }
        })
        .collect();
    PreprocessedRecording::new(
        format!("random-{seed}"),
        config.epochs,
        signals,
        labels,
        Default::default(),
    )
    .expect("consistent random recording")
}

/// End-to-end finite-difference case on the tiny configuration: a batch of two
/// recordings with different kept modality sets, dropout off.
pub(crate) fn gradcheck_case(fault: Option<crate::tensor::OpKind>) -> crate::gradcheck::Case {
    Box::new(move |rng: &mut ChaCha8Rng| {
        let config = ModelConfig::gradcheck_tiny();
        let params: Params<f64> = init_params(&config, rng.gen())?;
        let names: Vec<String> = params.names().map(String::from).collect();
        let inputs: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
        let a = random_recording(&config, KindSet::all(), rng.gen());
        let b = random_recording(&config, KindSet::all(), rng.gen());
        let kept = [KindSet::all(), [SignalKind::Ppg, SignalKind::Thx].into_iter().collect()];
        let batch = crate::masking::collate(
            &[a, b],
            &kept
                .iter()
                .map(|&k| crate::masking::ModalityMask::new(KindSet::all(), k).expect("valid mask"))
                .collect::<Vec<_>>(),
        )?;
        let input: ModelInput<f64> = batch.model_input(&config)?;
        let labels = batch.labels.clone();
        crate::gradcheck::max_relative_error(
            &inputs,
            move |tape, vars| {
                let p = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
                let logits = forward(tape, &p, &config, &mut ForwardCtx::eval(), &input)?;
                loss(tape, logits, &labels)
            },
            rng.gen(),
            fault,
        )
    })
}
