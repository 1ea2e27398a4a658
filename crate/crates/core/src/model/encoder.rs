//! Speech and text encoders.

use crate::audio::MelSpectrogram;
use crate::model::layers::{bigru_encode, dense};
use crate::model::{Bound, Modality, Model};
use crate::rng::SeedStream;
use crate::tensor::{BatchStats, Mode, Padding, Tape, Tensor, TensorId};
use crate::text::PAD_ID;
use crate::{CoreError, Result};

/// Speech-side encoding: per-frame states for attention plus the final
/// Bi-GRU state used by the speech-only head.
pub struct EncodedSpeech {
    /// `[L_s, d]` states (only for speech-text models).
    pub states: Option<TensorId>,
    /// `[1, 2H]` final Bi-GRU state.
    pub final_state: TensorId,
    /// Valid (non-padding) downsampled frames.
    pub mask: Vec<bool>,
    /// Batch statistics from train-mode batchnorm layers.
    pub stats_updates: Vec<(String, BatchStats)>,
}

/// Text-side encoding: per-character states and a pooled summary, both in
/// the shared fusion dimension.
pub struct EncodedText {
    /// `[L_t, d]` states.
    pub states: TensorId,
    /// `[1, d]` projection of the final Bi-GRU state (same projection as
    /// the per-position states, so it is a deterministic function of them).
    pub pooled: TensorId,
    /// Valid (non-padding) token positions.
    pub mask: Vec<bool>,
}

/// Run the conv stack and stacked Bi-GRUs over a mel matrix.
///
/// The mel input is treated as a one-channel image (time on the first
/// axis). Each conv layer applies trailing-edge same padding, relu,
/// batchnorm, and dropout, halving time per its stride; the frequency axis
/// is then collapsed by mean pooling and two stacked Bi-GRUs produce the
/// sequence states. `valid_frames` marks how many leading mel frames are
/// real; everything after is batch padding.
pub fn speech_encode(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    mel: &MelSpectrogram,
    valid_frames: usize,
    mode: Mode,
    rng: &mut SeedStream,
) -> Result<EncodedSpeech> {
    let config = model.config();
    if mel.n_mels() != config.n_mels {
        return Err(CoreError::ShapeMismatch {
            op: "speech_encode",
            details: format!("{} mel bands, model wants {}", mel.n_mels(), config.n_mels),
        });
    }
    if valid_frames == 0 || valid_frames > mel.n_frames() {
        return Err(CoreError::InvalidArgument(format!(
            "valid_frames {valid_frames} outside 1..={}",
            mel.n_frames()
        )));
    }

    let input = Tensor::new(
        vec![1, mel.n_frames(), mel.n_mels()],
        mel.values().to_vec(),
    )?;
    let mut x = tape.constant(&input);
    let mut valid = valid_frames;
    let mut stats_updates = Vec::new();

    for (i, layer) in config.conv_layers.iter().enumerate() {
        let n = i + 1;
        let kernel = bound.id(&format!("speech_enc.conv{n}.kernel"));
        let bias = bound.id(&format!("speech_enc.conv{n}.bias"));
        let gamma = bound.id(&format!("speech_enc.bn{n}.gamma"));
        let beta = bound.id(&format!("speech_enc.bn{n}.beta"));

        let conv = tape.conv2d(x, kernel, layer.stride, Padding::Same)?;
        let biased = tape.bias_add(conv, bias, 0)?;
        let activated = tape.relu(biased)?;
        valid = valid.div_ceil(layer.stride.0);
        let (normed, stats) = tape.batchnorm(
            activated,
            gamma,
            beta,
            model.buffer(&format!("speech_enc.bn{n}.running_mean")).data(),
            model.buffer(&format!("speech_enc.bn{n}.running_var")).data(),
            config.bn_eps,
            mode,
            Some(valid),
        )?;
        if let Some(s) = stats {
            stats_updates.push((format!("speech_enc.bn{n}"), s));
        }
        x = tape.dropout(normed, config.dropout_rate, mode, rng)?;
    }

    // collapse frequency: [C, L, F] -> [C, L] -> [L, C]
    let pooled = tape.mean_axis(x, 2)?;
    let sequence = tape.transpose(pooled)?;
    let len = tape.shape(sequence)[0];
    let mask: Vec<bool> = (0..len).map(|t| t < valid).collect();

    let h = config.gru_hidden;
    let (states1, _) = bigru_encode(tape, sequence, &mask, bound.bigru("speech_enc.bigru1"), h)?;
    let (states2, final_state) =
        bigru_encode(tape, states1, &mask, bound.bigru("speech_enc.bigru2"), h)?;

    let states = match config.modality {
        Modality::Speech => None,
        Modality::SpeechText => Some(dense(tape, states2, bound.dense("speech_enc.proj"))?),
    };

    Ok(EncodedSpeech {
        states,
        final_state,
        mask,
        stats_updates,
    })
}

/// Embed a (possibly padded) token sequence and encode it with a Bi-GRU.
/// Pad positions (id 26) are masked out of the recurrence and excluded
/// from the final-state computation. The text path has no dropout.
pub fn text_encode(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    tokens: &[usize],
) -> Result<EncodedText> {
    if tokens.is_empty() {
        return Err(CoreError::InvalidArgument("empty token sequence".into()));
    }
    let mask: Vec<bool> = tokens.iter().map(|&t| t != PAD_ID).collect();
    if !mask[0] {
        return Err(CoreError::InvalidArgument(
            "token sequences must be left-aligned (pad is trailing)".into(),
        ));
    }

    let table = bound.id("text_enc.embedding");
    let embedded = tape.embedding(table, tokens)?;
    let h = model.config().gru_hidden;
    let (states, final_state) =
        bigru_encode(tape, embedded, &mask, bound.bigru("text_enc.bigru"), h)?;
    let proj = bound.dense("text_enc.proj");
    let states = dense(tape, states, proj)?;
    let pooled = dense(tape, final_state, proj)?;
    Ok(EncodedText {
        states,
        pooled,
        mask,
    })
}
