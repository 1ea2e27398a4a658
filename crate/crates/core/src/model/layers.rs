//! Tape-level building blocks: dense layers and gated recurrent units.

use crate::tensor::{Tape, TensorId};
use crate::{CoreError, Result};

#[derive(Debug, Clone, Copy)]
pub struct DenseIds {
    pub weight: TensorId,
    pub bias: TensorId,
}

/// `x . W + b` for a row-major `[n, d_in]` input.
pub fn dense(tape: &mut Tape, x: TensorId, ids: DenseIds) -> Result<TensorId> {
    let h = tape.matmul(x, ids.weight)?;
    tape.bias_add(h, ids.bias, 1)
}

/// Packed GRU parameters. `w`/`b` hold the input projections of the update,
/// reset, and candidate gates side by side (`[d_in, 3H]`, `[3H]`); `u_zr`
/// holds the recurrent projections of update and reset (`[H, 2H]`); the
/// candidate recurrence `u_h` stays separate because it multiplies the
/// reset-gated state.
#[derive(Debug, Clone, Copy)]
pub struct GruParamIds {
    pub w: TensorId,
    pub b: TensorId,
    pub u_zr: TensorId,
    pub u_h: TensorId,
}

#[derive(Debug, Clone, Copy)]
pub struct BiGruIds {
    pub fwd: GruParamIds,
    pub bwd: GruParamIds,
}

/// One GRU step:
/// `z = sigmoid(W_z x + U_z h + b_z)`,
/// `r = sigmoid(W_r x + U_r h + b_r)`,
/// `hc = tanh(W_h x + U_h (r . h) + b_h)`,
/// `h' = (1 - z) . h + z . hc`.
///
/// `x` is `[1, d_in]`, `h` is `[1, H]`.
pub fn gru_cell(tape: &mut Tape, x: TensorId, h: TensorId, params: GruParamIds) -> Result<TensorId> {
    let hidden = tape.shape(h)[1];
    let xw = tape.matmul(x, params.w)?;
    let xw = tape.bias_add(xw, params.b, 1)?;
    let hu = tape.matmul(h, params.u_zr)?;

    let z_in = {
        let a = tape.slice(xw, 1, 0, hidden)?;
        let b = tape.slice(hu, 1, 0, hidden)?;
        tape.add(a, b)?
    };
    let z = tape.sigmoid(z_in)?;

    let r_in = {
        let a = tape.slice(xw, 1, hidden, hidden)?;
        let b = tape.slice(hu, 1, hidden, hidden)?;
        tape.add(a, b)?
    };
    let r = tape.sigmoid(r_in)?;

    let rh = tape.mul(r, h)?;
    let cand_in = {
        let a = tape.slice(xw, 1, 2 * hidden, hidden)?;
        let b = tape.matmul(rh, params.u_h)?;
        tape.add(a, b)?
    };
    let candidate = tape.tanh(cand_in)?;

    // h' = (1 - z) . h + z . candidate
    let one_minus_z = {
        let neg = tape.mul_scalar(z, -1.0)?;
        tape.add_scalar(neg, 1.0)?
    };
    let keep = tape.mul(one_minus_z, h)?;
    let take = tape.mul(z, candidate)?;
    tape.add(keep, take)
}

/// Bidirectional GRU over a `[L, d_in]` sequence.
///
/// Masked steps carry the hidden state through unchanged in both
/// directions, so trailing padding never perturbs the states at valid
/// positions. Returns per-step `[L, 2H]` states (forward and backward
/// halves concatenated) and the final `[1, 2H]` state: forward at the last
/// step beside backward at the first step, which by pass-through equal the
/// states at the last/first unmasked steps.
pub fn bigru_encode(
    tape: &mut Tape,
    sequence: TensorId,
    mask: &[bool],
    params: BiGruIds,
    hidden: usize,
) -> Result<(TensorId, TensorId)> {
    let len = tape.shape(sequence)[0];
    if mask.len() != len {
        return Err(CoreError::ShapeMismatch {
            op: "bigru_encode",
            details: format!("mask length {} vs sequence length {len}", mask.len()),
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(CoreError::InvalidArgument(
            "bigru_encode: sequence has no unmasked steps".into(),
        ));
    }

    let zero = crate::tensor::Tensor::zeros(vec![1, hidden]);
    let run =
        |tape: &mut Tape, dir: GruParamIds, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<TensorId>> {
            let mut h = tape.constant(&zero);
            let mut states = vec![h; len];
            for t in order {
                if mask[t] {
                    let x = tape.row(sequence, t)?;
                    h = gru_cell(tape, x, h, dir)?;
                }
                states[t] = h;
            }
            Ok(states)
        };

    let fwd = run(tape, params.fwd, &mut (0..len))?;
    let bwd = run(tape, params.bwd, &mut (0..len).rev())?;

    let rows: Vec<TensorId> = fwd
        .iter()
        .zip(&bwd)
        .map(|(&f, &b)| tape.concat(&[f, b], 1))
        .collect::<Result<_>>()?;
    let states = if rows.len() == 1 {
        rows[0]
    } else {
        tape.concat(&rows, 0)?
    };
    let final_state = tape.concat(&[fwd[len - 1], bwd[0]], 1)?;
    Ok((states, final_state))
}
