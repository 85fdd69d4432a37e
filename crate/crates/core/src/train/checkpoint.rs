//! Checkpoint file: configs and loop state in the JSON header, then the
//! parameters, both Adam moments and (if any) the best parameters so far as
//! concatenated f32 payload sections.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamState, EarlyStopping, TrainConfig};
use crate::blob;
use crate::error::{Error, FormatError, Result};
use crate::masking::MaskingConfig;
use crate::model::{check_layout, layout, ModelConfig, Params};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SLPFCKPT";
pub const VERSION: u32 = 1;

/// Loop state needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Optimizer steps taken; drives the learning-rate schedule.
    pub step: u64,
    /// Completed passes over the training set.
    pub epoch: usize,
    pub adam: AdamState<f32>,
    pub early: EarlyStopping,
    pub best_params: Option<Params<f32>>,
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub masking: MaskingConfig,
    pub seed: u64,
    pub params: Params<f32>,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    train: TrainConfig,
    masking: MaskingConfig,
    seed: u64,
    step: u64,
    epoch: usize,
    adam_t: u64,
    early: EarlyStopping,
    rng: RngState,
    has_best: bool,
    parameter_count: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let rng = &self.state.rng;
        let meta = Meta {
            model: self.model.clone(),
            train: self.train.clone(),
            masking: self.masking.clone(),
            seed: self.seed,
            step: self.state.step,
            epoch: self.state.epoch,
            adam_t: self.state.adam.t,
            early: self.state.early.clone(),
            rng: RngState {
                seed: hex::encode(rng.get_seed()),
                stream: rng.get_stream(),
                word_pos: rng.get_word_pos().to_string(),
            },
            has_best: self.state.best_params.is_some(),
            parameter_count: self.params.count(),
        };
        let mut payload = Vec::with_capacity(self.params.count() * 4);
        let sections = [
            Some(&self.params),
            Some(&self.state.adam.m),
            Some(&self.state.adam.v),
            self.state.best_params.as_ref(),
        ];
        for p in sections.into_iter().flatten() {
            for (_, t) in p.iter() {
                payload.extend_from_slice(t.values());
            }
        }
        blob::encode(MAGIC, VERSION, &meta, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, payload): (Meta, Vec<f32>) = blob::decode(MAGIC, VERSION, bytes)?;
        meta.model.validate()?;
        let shapes = layout(&meta.model);
        let n: usize = shapes.iter().map(|(_, s, _)| s.iter().product::<usize>()).sum();
        let sections = if meta.has_best { 4 } else { 3 };
        if n != meta.parameter_count || payload.len() != sections * n {
            return Err(FormatError::TruncatedPayload {
                expected: sections * n * 4,
                actual: payload.len() * 4,
            }
            .into());
        }
        let mut chunks = payload.chunks_exact(n);
        let mut section = || -> Result<Params<f32>> {
            let values = chunks.next().expect("section count checked");
            let mut params = Params::default();
            let mut offset = 0;
            for (name, shape, _) in &shapes {
                let len: usize = shape.iter().product();
                params.insert(
                    name.clone(),
                    Tensor::new(shape.clone(), values[offset..offset + len].to_vec())?,
                );
                offset += len;
            }
            Ok(params)
        };
        let params = section()?.with_requires_grad();
        let m = section()?;
        let v = section()?;
        let best_params = if meta.has_best {
            Some(section()?.with_requires_grad())
        } else {
            None
        };
        check_layout(&meta.model, &params)?;

        let corrupt = |what: &str| Error::FormatBytes(FormatError::CorruptHeader(format!("rng {what}")));
        let seed: [u8; 32] = hex::decode(&meta.rng.seed)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| corrupt("seed"))?;
        let word_pos: u128 = meta.rng.word_pos.parse().map_err(|_| corrupt("word position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(meta.rng.stream);
        rng.set_word_pos(word_pos);

        Ok(Checkpoint {
            model: meta.model,
            train: meta.train,
            masking: meta.masking,
            seed: meta.seed,
            params,
            state: TrainState {
                step: meta.step,
                epoch: meta.epoch,
                adam: AdamState { t: meta.adam_t, m, v },
                early: meta.early,
                best_params,
                rng,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::FormatBytes(source) => Error::Format {
                path: path.to_path_buf(),
                source,
            },
            other => other,
        })
    }

    /// The weights to use for inference: the best parameters if tracked, else the current ones.
    pub fn inference_params(&self) -> &Params<f32> {
        self.state.best_params.as_ref().unwrap_or(&self.params)
    }
}
