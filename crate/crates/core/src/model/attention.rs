//! Scaled dot-product cross-attention between text queries and speech
//! keys/values.

use crate::model::{Bound, EncodedSpeech, EncodedText};
use crate::tensor::{Tape, TensorId};
use crate::{CoreError, Result};

/// Fused representation: one context row per text position, plus the
/// attention map for inspection.
pub struct FusionOutput {
    /// `[L_t, d]` context matrix.
    pub context: TensorId,
    /// `[L_t, L_s]` attention weights; rows sum to 1, masked speech frames
    /// get exactly zero weight.
    pub attention_weights: TensorId,
}

/// `context = softmax(Q K^T / sqrt(d)) V` with queries from the text
/// states and keys/values from the speech states. Masked speech frames are
/// excluded by the softmax mask.
pub fn cross_attention(
    tape: &mut Tape,
    bound: &Bound,
    text: &EncodedText,
    speech: &EncodedSpeech,
) -> Result<FusionOutput> {
    let speech_states = speech.states.ok_or_else(|| {
        CoreError::InvalidArgument("cross_attention requires projected speech states".into())
    })?;
    let d_text = tape.shape(text.states)[1];
    let d_speech = tape.shape(speech_states)[1];
    if d_text != d_speech {
        return Err(CoreError::ShapeMismatch {
            op: "cross_attention",
            details: format!("query dim {d_text} vs key dim {d_speech}"),
        });
    }
    if !speech.mask.iter().any(|&m| m) {
        return Err(CoreError::InvalidArgument(
            "cross_attention: every speech frame is masked".into(),
        ));
    }

    let q = tape.matmul(text.states, bound.id("attn.w_q"))?;
    let k = tape.matmul(speech_states, bound.id("attn.w_k"))?;
    let v = tape.matmul(speech_states, bound.id("attn.w_v"))?;

    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.mul_scalar(scores, 1.0 / (d_text as f64).sqrt())?;
    let weights = tape.masked_softmax(scaled, Some(&speech.mask), 1)?;
    let context = tape.matmul(weights, v)?;

    Ok(FusionOutput {
        context,
        attention_weights: weights,
    })
}
