//! The epoch loop: seeded shuffling, padded+masked batches, Adam updates,
//! plateau scheduling, early stopping, and best-checkpoint restoration.

use std::time::Instant;

use crate::audio::MelSpectrogram;
use crate::model::{
    decide_detection, decide_severity, forward, Checkpoint, Modality, Model, Task,
};
use crate::rng::{derive_seed, SeedStream};
use crate::tensor::{Mode, Tape, TensorId};
use crate::text::{TokenSequence, PAD_ID};
use crate::training::{
    adam_step, bce_loss, cce_loss, Action, LossKind, OptimizerState, TrainConfig, TrainController,
    TrainLog, TrainLogRow,
};
use crate::{CoreError, Result};

/// One training example: cached features, the keyword tokens (for
/// speech-text models), and the class label.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: String,
    pub mel: MelSpectrogram,
    pub tokens: Option<TokenSequence>,
    pub label: usize,
}

/// Result of a training run. The model passed to [`train_model`] is left
/// restored to the best-validation epoch, which this checkpoint snapshots.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

fn check_labels(items: &[TrainItem], task: Task) -> Result<()> {
    let n = task.n_classes();
    for item in items {
        if item.label >= n {
            return Err(CoreError::InvalidArgument(format!(
                "item {} has label {} outside 0..{n}",
                item.id, item.label
            )));
        }
    }
    Ok(())
}

/// Pad an item's features/tokens to the batch-wide lengths. Mel padding is
/// zero rows; token padding is the reserved pad id. Both are masked out by
/// the forward pass.
fn padded_views(
    item: &TrainItem,
    max_frames: usize,
    max_tokens: usize,
    modality: Modality,
) -> Result<(MelSpectrogram, usize, Option<Vec<usize>>)> {
    let mel = if item.mel.n_frames() == max_frames {
        item.mel.clone()
    } else {
        let mut values = item.mel.values().to_vec();
        values.resize(max_frames * item.mel.n_mels(), 0.0);
        MelSpectrogram::new(max_frames, item.mel.n_mels(), values)?
    };
    let tokens = match modality {
        Modality::Speech => None,
        Modality::SpeechText => {
            let seq = item.tokens.as_ref().ok_or_else(|| {
                CoreError::InvalidArgument(format!(
                    "item {} lacks tokens for a speech-text model",
                    item.id
                ))
            })?;
            let mut t = seq.tokens().to_vec();
            t.resize(max_tokens, PAD_ID);
            Some(t)
        }
    };
    Ok((mel, item.mel.n_frames(), tokens))
}

fn item_loss(
    tape: &mut Tape,
    scores: TensorId,
    loss: LossKind,
    label: usize,
) -> Result<TensorId> {
    match loss {
        LossKind::Bce => bce_loss(tape, scores, label as f64),
        LossKind::Cce => cce_loss(tape, scores, label),
    }
}

fn decide(task: Task, scores: &[f64]) -> usize {
    match task {
        Task::Detection => decide_detection(scores[0]),
        Task::Severity => decide_severity(scores),
    }
}

/// Forward items in eval mode, returning (mean loss, accuracy).
pub fn evaluate(model: &Model, items: &[TrainItem], loss: LossKind) -> Result<(f64, f64)> {
    let task = model.config().task;
    let modality = model.config().modality;
    let mut rng = SeedStream::new(0); // eval mode draws nothing
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    for chunk in items.chunks(32) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape)?;
        for item in chunk {
            let (mel, valid, tokens) =
                padded_views(item, item.mel.n_frames(), item.tokens.as_ref().map_or(0, |t| t.len()), modality)?;
            let out = forward(
                model,
                &mut tape,
                &bound,
                &mel,
                valid,
                tokens.as_deref(),
                Mode::Eval,
                &mut rng,
            )?;
            let l = item_loss(&mut tape, out.scores, loss, item.label)?;
            total_loss += tape.value(l).item();
            if decide(task, tape.data(out.scores)) == item.label {
                correct += 1;
            }
        }
    }
    let n = items.len() as f64;
    Ok((total_loss / n, correct as f64 / n))
}

/// Classify one utterance in eval mode: `(decision, scores)`.
pub fn predict(model: &Model, mel: &MelSpectrogram, tokens: Option<&[usize]>) -> Result<(usize, Vec<f64>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let mut rng = SeedStream::new(0);
    let out = forward(
        model,
        &mut tape,
        &bound,
        mel,
        mel.n_frames(),
        tokens,
        Mode::Eval,
        &mut rng,
    )?;
    let scores = tape.data(out.scores).to_vec();
    Ok((decide(model.config().task, &scores), scores))
}

/// Train until early stopping or `max_epochs`, returning the best
/// checkpoint by validation loss and the per-epoch log. Fully
/// deterministic for a given seed: shuffling, dropout, and updates all
/// draw from streams derived from `config.seed`.
pub fn train_model(
    model: &mut Model,
    train: &[TrainItem],
    val: &[TrainItem],
    config: &TrainConfig,
    digest: [u8; 32],
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(CoreError::InvalidArgument(
            "training needs non-empty train and validation sets".into(),
        ));
    }
    let task = model.config().task;
    let modality = model.config().modality;
    if config.loss != LossKind::for_task(task) {
        return Err(CoreError::InvalidArgument(format!(
            "loss {:?} does not fit task {task:?}",
            config.loss
        )));
    }
    check_labels(train, task)?;
    check_labels(val, task)?;

    let mut shuffle_rng = SeedStream::new(derive_seed(config.seed, "shuffle"));
    let mut dropout_rng = SeedStream::new(derive_seed(config.seed, "dropout"));
    let mut optimizer = OptimizerState::new(model);
    let mut controller = TrainController::new(
        config.lr,
        config.plateau_patience,
        config.plateau_factor,
        config.early_stop_patience,
        config.min_delta,
    );
    let mut log = TrainLog::default();
    let mut best: Option<(Checkpoint, usize, f64)> = None;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        shuffle_rng.shuffle(&mut order);

        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let max_frames = chunk
                .iter()
                .map(|&i| train[i].mel.n_frames())
                .max()
                .unwrap();
            let max_tokens = chunk
                .iter()
                .map(|&i| train[i].tokens.as_ref().map_or(0, |t| t.len()))
                .max()
                .unwrap();

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape)?;
            let mut losses = Vec::with_capacity(chunk.len());
            let mut stats_updates = Vec::new();
            for &i in chunk {
                let item = &train[i];
                let (mel, valid, tokens) = padded_views(item, max_frames, max_tokens, modality)?;
                let out = forward(
                    model,
                    &mut tape,
                    &bound,
                    &mel,
                    valid,
                    tokens.as_deref(),
                    Mode::Train,
                    &mut dropout_rng,
                )?;
                stats_updates.extend(out.stats_updates);
                losses.push(item_loss(&mut tape, out.scores, config.loss, item.label)?);
            }
            let stacked = tape.concat(&losses, 0)?;
            let batch_loss = tape.mean_all(stacked)?;
            let loss_value = tape.value(batch_loss).item();
            if !loss_value.is_finite() {
                return Err(CoreError::Diverged {
                    epoch,
                    details: format!("batch loss {loss_value}"),
                });
            }
            epoch_loss += loss_value * chunk.len() as f64;

            let grads = tape.backward(batch_loss)?;
            adam_step(model, &grads.into_named(), &mut optimizer, controller.lr())?;
            model.update_running_stats(&stats_updates)?;
        }
        let train_loss = epoch_loss / train.len() as f64;
        let (val_loss, val_acc) = evaluate(model, val, config.loss)?;
        if !val_loss.is_finite() {
            return Err(CoreError::Diverged {
                epoch,
                details: format!("validation loss {val_loss}"),
            });
        }

        let (improved, action) = controller.observe(epoch, val_loss);
        if improved {
            best = Some((Checkpoint::of(model, digest), epoch, val_loss));
        }
        log.push(TrainLogRow {
            epoch,
            train_loss,
            val_loss,
            val_acc,
            lr: controller.lr(),
            seconds: started.elapsed().as_secs_f64(),
        });
        if action == Action::Stop {
            break;
        }
    }

    let (checkpoint, best_epoch, best_val_loss) =
        best.expect("at least one epoch ran, so a best checkpoint exists");
    // leave the caller's model at the best-validation weights
    for (name, tensor) in &checkpoint.tensors {
        if model.param(name).is_some() {
            model.apply_update(name, tensor.data().to_vec())?;
        } else {
            model.set_buffer(name, tensor.data().to_vec())?;
        }
    }

    Ok(TrainOutcome {
        checkpoint,
        log,
        best_epoch,
        best_val_loss,
    })
}
