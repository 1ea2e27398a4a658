//! Classification heads and full forward passes.

use crate::audio::MelSpectrogram;
use crate::model::layers::{dense, gru_cell};
use crate::model::{
    cross_attention, speech_encode, text_encode, Bound, FusionOutput, Modality, Model, Task,
};
use crate::rng::SeedStream;
use crate::tensor::{BatchStats, Mode, Tape, Tensor, TensorId};
use crate::{CoreError, Result};

/// Scores and intermediates of one forward pass.
pub struct ForwardOutput {
    /// `[1, 1]` sigmoid probability (detection) or `[1, 4]` softmax
    /// probabilities (severity).
    pub scores: TensorId,
    /// Pre-activation logits feeding the head.
    pub logits: TensorId,
    /// Present for speech-text forwards.
    pub fusion: Option<FusionOutput>,
    /// Train-mode batchnorm statistics for the running-average update.
    pub stats_updates: Vec<(String, BatchStats)>,
}

/// Run the classification stack on fused context rows: GRU over the rows,
/// then dense 128 -> dense 32 -> task head. Returns `(scores, logits)`.
pub fn classify(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    context: TensorId,
    mask: &[bool],
) -> Result<(TensorId, TensorId)> {
    let len = tape.shape(context)[0];
    if mask.len() != len {
        return Err(CoreError::ShapeMismatch {
            op: "classify",
            details: format!("mask length {} vs {len} context rows", mask.len()),
        });
    }
    let h = model.config().gru_hidden;
    let gru = bound.gru("clf.gru");
    let zero = Tensor::zeros(vec![1, h]);
    let mut state = tape.constant(&zero);
    for t in 0..len {
        if mask[t] {
            let x = tape.row(context, t)?;
            state = gru_cell(tape, x, state, gru)?;
        }
    }
    head_stack(model, tape, bound, state)
}

fn head_stack(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    features: TensorId,
) -> Result<(TensorId, TensorId)> {
    let d1 = dense(tape, features, bound.dense("clf.dense1"))?;
    let d1 = tape.relu(d1)?;
    let d2 = dense(tape, d1, bound.dense("clf.dense2"))?;
    let d2 = tape.relu(d2)?;
    let logits = dense(tape, d2, bound.dense("clf.head"))?;
    let scores = match model.config().task {
        Task::Detection => tape.sigmoid(logits)?,
        Task::Severity => tape.masked_softmax(logits, None, 1)?,
    };
    Ok((scores, logits))
}

/// Full forward pass for either modality.
///
/// `valid_frames` marks how many leading mel frames are real (the rest is
/// batch padding); `tokens` must be present exactly when the model is
/// speech-text. Pad tokens use the reserved id 26.
#[allow(clippy::too_many_arguments)]
pub fn forward(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    mel: &MelSpectrogram,
    valid_frames: usize,
    tokens: Option<&[usize]>,
    mode: Mode,
    rng: &mut SeedStream,
) -> Result<ForwardOutput> {
    let speech = speech_encode(model, tape, bound, mel, valid_frames, mode, rng)?;
    match (model.config().modality, tokens) {
        (Modality::Speech, None) => {
            let (scores, logits) = head_stack(model, tape, bound, speech.final_state)?;
            Ok(ForwardOutput {
                scores,
                logits,
                fusion: None,
                stats_updates: speech.stats_updates,
            })
        }
        (Modality::SpeechText, Some(tokens)) => {
            let text = text_encode(model, tape, bound, tokens)?;
            let fusion = cross_attention(tape, bound, &text, &speech)?;
            let (scores, logits) = classify(model, tape, bound, fusion.context, &text.mask)?;
            Ok(ForwardOutput {
                scores,
                logits,
                fusion: Some(fusion),
                stats_updates: speech.stats_updates,
            })
        }
        (Modality::Speech, Some(_)) => Err(CoreError::InvalidArgument(
            "speech-only model given text tokens".into(),
        )),
        (Modality::SpeechText, None) => Err(CoreError::InvalidArgument(
            "speech-text model needs text tokens".into(),
        )),
    }
}

/// Detection decision at threshold 0.5. An exact tie resolves to healthy,
/// matching the lowest-class-index tie rule used everywhere else.
pub fn decide_detection(prob: f64) -> usize {
    usize::from(prob > 0.5)
}

/// Severity decision: argmax with ties broken by the lowest class index.
pub fn decide_severity(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}
