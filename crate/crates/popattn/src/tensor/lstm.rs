//! Single-layer LSTM built from tape ops, so backpropagation through time
//! falls out of the ordinary reverse sweep. Gates are packed (input, forget,
//! candidate, output) into one weight block per source.

use rand_chacha::ChaCha8Rng;

use super::params::{glorot_uniform, zeros_tensor, ParamId, ParamSet};
use super::tape::{Tape, TensorId};
use super::Scalar;
use crate::error::{Error, Result};

/// Parameter ids of one LSTM layer inside a `ParamSet`.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

/// Tape positions of the staged LSTM weights.
#[derive(Debug, Clone, Copy)]
pub struct BoundLstm {
    pub w_ih: TensorId,
    pub w_hh: TensorId,
    pub bias: TensorId,
}

/// Register LSTM weights: [4h, d_in] input block, [4h, h] recurrent block,
/// [4h] bias (zero-initialized like every bias).
pub fn lstm_params<E: Scalar>(
    params: &mut ParamSet<E>,
    prefix: &str,
    input_dim: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LstmParams> {
    let w_ih = params.add(
        format!("{prefix}.w_ih"),
        glorot_uniform(4 * hidden, input_dim, rng),
    )?;
    let w_hh = params.add(
        format!("{prefix}.w_hh"),
        glorot_uniform(4 * hidden, hidden, rng),
    )?;
    let bias = params.add(format!("{prefix}.bias"), zeros_tensor(vec![4 * hidden]))?;
    Ok(LstmParams { w_ih, w_hh, bias })
}

impl LstmParams {
    pub fn bind<E: Scalar>(&self, tape: &mut Tape<E>, params: &ParamSet<E>) -> BoundLstm {
        BoundLstm {
            w_ih: tape.param(params, self.w_ih),
            w_hh: tape.param(params, self.w_hh),
            bias: tape.param(params, self.bias),
        }
    }
}

/// Run the layer over a [T, d_in] input. Initial hidden and cell states are
/// zero. Returns all T hidden states stacked as [T, h].
pub fn lstm_forward<E: Scalar>(
    tape: &mut Tape<E>,
    bound: &BoundLstm,
    input: TensorId,
) -> Result<TensorId> {
    let in_shape = tape.shape(input).to_vec();
    if in_shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "lstm_forward",
            lhs: in_shape,
            rhs: vec![],
        });
    }
    let steps = in_shape[0];
    let w_hh_shape = tape.shape(bound.w_hh).to_vec();
    let hidden = w_hh_shape[1];
    if steps == 0 {
        return Err(Error::invalid("lstm_forward: empty input sequence"));
    }

    let mut h = tape.constant_vec(vec![hidden], vec![E::ZERO; hidden])?;
    let mut c = tape.constant_vec(vec![hidden], vec![E::ZERO; hidden])?;
    let mut states = Vec::with_capacity(steps);

    for t in 0..steps {
        let x_row = tape.slice_rows(input, t, 1)?;
        let x_t = tape.reshape(x_row, vec![in_shape[1]])?;
        let from_x = tape.matvec(bound.w_ih, x_t)?;
        let from_h = tape.matvec(bound.w_hh, h)?;
        let summed = tape.add(from_x, from_h)?;
        let pre = tape.add(summed, bound.bias)?;

        let i_pre = tape.slice_rows(pre, 0, hidden)?;
        let f_pre = tape.slice_rows(pre, hidden, hidden)?;
        let g_pre = tape.slice_rows(pre, 2 * hidden, hidden)?;
        let o_pre = tape.slice_rows(pre, 3 * hidden, hidden)?;
        let i_gate = tape.sigmoid(i_pre);
        let f_gate = tape.sigmoid(f_pre);
        let g_cand = tape.tanh(g_pre);
        let o_gate = tape.sigmoid(o_pre);

        let keep = tape.mul(f_gate, c)?;
        let write = tape.mul(i_gate, g_cand)?;
        c = tape.add(keep, write)?;
        let c_act = tape.tanh(c);
        h = tape.mul(o_gate, c_act)?;
        states.push(h);
    }

    tape.stack_rows(&states)
}
