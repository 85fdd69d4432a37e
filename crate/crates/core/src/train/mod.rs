//! Optimisation: warm-up/decay schedule, AdamW, gradient accumulation over
//! micro-batches, early stopping on validation loss and resumable checkpoints.

mod checkpoint;
mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, TrainState, VERSION as CHECKPOINT_VERSION};
pub use optim::{adamw_step, lr_at, AdamState, AdamW};

use crate::data::container::read_preprocessed;
use crate::data::PreprocessedRecording;
use crate::error::{Error, Result};
use crate::masking::{augment_invert, collate, sample_mask, Batch, MaskingConfig};
use crate::model::{forward, init_params, loss, ForwardCtx, ModelConfig, ModelInput, Params};
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub warmup_steps: u64,
    pub decay_half_life_steps: u64,
    pub weight_decay: f64,
    /// Recordings per optimizer step.
    pub effective_batch: usize,
    /// Recordings per forward/backward pass; divides `effective_batch`.
    pub micro_batch: usize,
    pub patience_epochs: usize,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_lr: 1e-3,
            warmup_steps: 2000,
            decay_half_life_steps: 6000,
            weight_decay: 1e-2,
            effective_batch: 16,
            micro_batch: 4,
            patience_epochs: 5,
            max_epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.micro_batch == 0 || self.effective_batch == 0 {
            return fail("batch sizes must be positive".into());
        }
        if self.micro_batch > self.effective_batch || !self.effective_batch.is_multiple_of(self.micro_batch) {
            return fail(format!(
                "micro_batch {} must divide effective_batch {}",
                self.micro_batch, self.effective_batch
            ));
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return fail(format!("max_lr {} must be positive", self.max_lr));
        }
        if self.decay_half_life_steps == 0 {
            return fail("decay_half_life_steps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.adam_epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("adam_epsilon must be positive and weight_decay non-negative".into());
        }
        if self.patience_epochs == 0 || self.max_epochs == 0 {
            return fail("patience_epochs and max_epochs must be positive".into());
        }
        Ok(())
    }
}

/// Patience counter on validation loss; strictly lower is an improvement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    /// 1-based epoch that produced `best`.
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Worse,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, val_loss: f64) -> Verdict {
        if self.best.is_none_or(|b| val_loss < b) {
            self.best = Some(val_loss);
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            Verdict::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Worse
            }
        }
    }
}

/// Indexed access to preprocessed recordings.
pub trait RecordingSource: Sync {
    fn len(&self) -> usize;
    fn load(&self, index: usize) -> Result<PreprocessedRecording>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl RecordingSource for [PreprocessedRecording] {
    fn len(&self) -> usize {
        <[PreprocessedRecording]>::len(self)
    }

    fn load(&self, index: usize) -> Result<PreprocessedRecording> {
        Ok(self[index].clone())
    }
}

impl RecordingSource for Vec<PreprocessedRecording> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn load(&self, index: usize) -> Result<PreprocessedRecording> {
        Ok(self[index].clone())
    }
}

/// Container files read on demand.
#[derive(Clone, Debug)]
pub struct ContainerFiles(pub Vec<PathBuf>);

impl RecordingSource for ContainerFiles {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn load(&self, index: usize) -> Result<PreprocessedRecording> {
        read_preprocessed(&self.0[index])
    }
}

/// Summed loss of a batch and the gradient of `scale · loss` for each parameter.
pub fn batch_gradients(
    params: &Params<f32>,
    config: &ModelConfig,
    batch: &Batch,
    scale: f32,
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let input: ModelInput<f32> = batch.model_input(config)?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let mut ctx = match dropout_seed {
        Some(seed) => ForwardCtx::train(config.dropout, seed),
        None => ForwardCtx::eval(),
    };
    let logits = forward(&mut tape, &p, config, &mut ctx, &input)?;
    let l = loss(&mut tape, logits, &batch.labels)?;
    let value = tape.value(l)[0] as f64;
    let scaled = tape.scale(l, scale);
    tape.backward(scaled)?;
    Ok((value, p.grads(&tape)))
}

/// Mean over recordings of the summed per-epoch loss, all available signals,
/// no masking, augmentation or dropout.
pub fn validation_loss(params: &Params<f32>, config: &ModelConfig, source: &dyn RecordingSource) -> Result<f64> {
    if source.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    let mut total = 0.0;
    for i in 0..source.len() {
        let rec = source.load(i)?;
        rec.check_grid(config)?;
        let input: ModelInput<f32> = ModelInput::single(&rec, rec.kinds())?;
        let mut tape = Tape::inference();
        let p = params.bind(&mut tape);
        let logits = forward(&mut tape, &p, config, &mut ForwardCtx::eval(), &input)?;
        let l = loss(&mut tape, logits, rec.labels())?;
        total += tape.value(l)[0] as f64;
    }
    let mean = total / source.len() as f64;
    if !mean.is_finite() {
        return Err(Error::NonFinite(format!("validation loss is {mean}; training aborted")));
    }
    Ok(mean)
}

/// One line of the training log. Step records have no `val_loss`; the record
/// closing an epoch carries the epoch's mean training loss and the validation loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub epoch: usize,
    pub val_loss: Option<f64>,
}

/// How the loop obtains its starting point.
#[derive(Clone, Debug)]
pub enum Start {
    /// Parameters initialised from the run seed.
    Fresh,
    /// Weights from another run; optionally keep its step counter so the
    /// learning-rate schedule continues instead of warming up again.
    InitFrom {
        checkpoint: Box<Checkpoint>,
        resume_schedule: bool,
    },
    /// Continue an interrupted run exactly.
    Resume(Box<Checkpoint>),
}

/// Everything that defines a run apart from the data.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub masking: MaskingConfig,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub best_params: Params<f32>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub steps: u64,
    pub stopped_early: bool,
    pub log: Vec<LogRecord>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Draws a training batch: per-signal inversion, then a fresh modality mask.
fn draw_batch(
    source: &dyn RecordingSource,
    indices: &[usize],
    config: &ModelConfig,
    masking: &MaskingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let mut recs = Vec::with_capacity(indices.len());
    let mut masks = Vec::with_capacity(indices.len());
    for &i in indices {
        let mut rec = source.load(i)?;
        rec.check_grid(config)?;
        for kind in rec.kinds().iter() {
            let s = rec.signal_mut(kind).expect("listed kind");
            augment_invert(s, masking.invert_probability, rng);
        }
        masks.push(sample_mask(rec.kinds(), masking, rng)?);
        recs.push(rec);
    }
    collate(&recs, &masks)
}

/// Runs epochs until patience runs out or `max_epochs` is reached and returns
/// the best weights. With `out_dir`, appends to the JSONL log and writes
/// `last.ckpt` every epoch and `best.ckpt` on every improvement.
pub fn train_loop(
    spec: &RunSpec,
    train: &dyn RecordingSource,
    validation: &dyn RecordingSource,
    start: Start,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    spec.model.validate()?;
    spec.train.validate()?;
    spec.masking.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let (mut params, mut state) = match start {
        Start::Fresh => {
            let params: Params<f32> = init_params(&spec.model, spec.seed)?;
            let state = fresh_state(&params, spec);
            (params, state)
        }
        Start::InitFrom {
            checkpoint,
            resume_schedule,
        } => {
            if checkpoint.model != spec.model {
                return Err(Error::Config(
                    "--init-from checkpoint has a different model configuration".into(),
                ));
            }
            let params = checkpoint.inference_params().clone();
            let mut state = fresh_state(&params, spec);
            if resume_schedule {
                state.step = checkpoint.state.step;
            }
            (params, state)
        }
        Start::Resume(checkpoint) => {
            let c = *checkpoint;
            // The epoch budget may change between sessions; nothing else may.
            let same_train = TrainConfig {
                max_epochs: spec.train.max_epochs,
                ..c.train.clone()
            } == spec.train;
            if c.model != spec.model || !same_train || c.masking != spec.masking || c.seed != spec.seed {
                return Err(Error::Config(
                    "resumed checkpoint was written by a different run configuration".into(),
                ));
            }
            (c.params, c.state)
        }
    };

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(state.epoch > 0)
                .write(true)
                .truncate(state.epoch == 0)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, std::io::BufWriter::new(file)))
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut emit = |record: LogRecord, log: &mut Vec<LogRecord>| -> Result<()> {
        if let Some((path, w)) = &mut log_file {
            let line = serde_json::to_string(&record)?;
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path.as_path(), e))?;
        }
        log.push(record);
        Ok(())
    };

    let opt = AdamW::from(&spec.train);
    let mut stopped_early = state.early.bad_epochs >= state.early.patience && state.epoch > 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    while !stopped_early && state.epoch < spec.train.max_epochs {
        let epoch = state.epoch + 1;
        order.sort_unstable();
        order.shuffle(&mut state.rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(spec.train.effective_batch) {
            let scale = 1.0 / chunk.len() as f32;
            let mut grads: Option<Vec<Vec<f32>>> = None;
            let mut step_loss = 0.0;
            for micro in chunk.chunks(spec.train.micro_batch) {
                let batch = draw_batch(train, micro, &spec.model, &spec.masking, &mut state.rng)?;
                let seed = state.rng.gen();
                let (l, g) = batch_gradients(&params, &spec.model, &batch, scale, Some(seed))?;
                step_loss += l;
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(g) {
                            for (x, y) in a.iter_mut().zip(g) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            state.step += 1;
            let lr = lr_at(state.step, &spec.train);
            adamw_step(&mut params, &grads.expect("non-empty chunk"), &mut state.adam, lr, opt)?;
            let train_loss = step_loss / chunk.len() as f64;
            if !train_loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss {train_loss} at step {}",
                    state.step
                )));
            }
            epoch_loss += step_loss;
            emit(
                LogRecord {
                    step: state.step,
                    lr,
                    train_loss,
                    epoch,
                    val_loss: None,
                },
                &mut log,
            )?;
        }
        let val_loss = validation_loss(&params, &spec.model, validation)?;
        state.epoch = epoch;
        let verdict = state.early.update(epoch, val_loss);
        if verdict == Verdict::Improved {
            state.best_params = Some(params.clone());
        }
        stopped_early = verdict == Verdict::Stop;
        emit(
            LogRecord {
                step: state.step,
                lr: lr_at(state.step, &spec.train),
                train_loss: epoch_loss / train.len() as f64,
                epoch,
                val_loss: Some(val_loss),
            },
            &mut log,
        )?;
        log::info!(
            "epoch {epoch}: train {:.4}, validation {val_loss:.4}{}",
            epoch_loss / train.len() as f64,
            if verdict == Verdict::Improved { " (best)" } else { "" }
        );
        if let Some(dir) = out_dir {
            let checkpoint = Checkpoint {
                model: spec.model.clone(),
                train: spec.train.clone(),
                masking: spec.masking.clone(),
                seed: spec.seed,
                params: params.clone(),
                state: state.clone(),
            };
            checkpoint.save(&dir.join(LAST_CHECKPOINT))?;
            if verdict == Verdict::Improved {
                checkpoint.save(&dir.join(BEST_CHECKPOINT))?;
            }
        }
    }
    let best_params = state.best_params.clone().unwrap_or(params);
    Ok(TrainOutcome {
        best_params,
        best_val_loss: state.early.best.unwrap_or(f64::NAN),
        best_epoch: state.early.best_epoch,
        epochs_run: state.epoch,
        steps: state.step,
        stopped_early,
        log,
    })
}

fn fresh_state(params: &Params<f32>, spec: &RunSpec) -> TrainState {
    TrainState {
        step: 0,
        epoch: 0,
        adam: AdamState::new(params),
        early: EarlyStopping::new(spec.train.patience_epochs),
        best_params: None,
        // Distinct stream from parameter initialisation, which uses the same seed.
        rng: {
            let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
            r.set_stream(1);
            r
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_arithmetic() {
        let mut e = EarlyStopping::new(5);
        let verdicts: Vec<Verdict> = (1..=6).map(|epoch| e.update(epoch, epoch as f64)).collect();
        assert_eq!(verdicts[0], Verdict::Improved);
        assert!(verdicts[1..5].iter().all(|&v| v == Verdict::Worse));
        assert_eq!(verdicts[5], Verdict::Stop);
        assert_eq!(e.best_epoch, 1);
    }

    #[test]
    fn equal_loss_is_not_an_improvement() {
        let mut e = EarlyStopping::new(2);
        e.update(1, 0.5);
        assert_eq!(e.update(2, 0.5), Verdict::Worse);
    }

    #[test]
    fn config_rejects_indivisible_batches() {
        let c = TrainConfig {
            micro_batch: 3,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
