//! LSTM and bidirectional LSTM built from tape primitives.
//!
//! Gate layout along the `4H` axis is input, forget, candidate, output.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{glorot, Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Registers `w_ih: [D, 4H]`, `w_hh: [H, 4H]` and `bias: [4H]` (forget
/// slice set to 1).
pub fn init_lstm<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, input_dim: usize, hidden: usize, rng: &mut R) {
    let g = 4 * hidden;
    store.insert(format!("{prefix}.w_ih"), glorot([input_dim, g], input_dim, g, rng));
    store.insert(format!("{prefix}.w_hh"), glorot([hidden, g], hidden, g, rng));
    let mut bias = Tensor::zeros([g]);
    bias.data_mut()[hidden..2 * hidden].fill(1.0);
    store.insert(format!("{prefix}.bias"), bias);
}

pub fn init_bilstm<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, input_dim: usize, hidden: usize, rng: &mut R) {
    init_lstm(store, &format!("{prefix}.fwd"), input_dim, hidden, rng);
    init_lstm(store, &format!("{prefix}.bwd"), input_dim, hidden, rng);
}

/// Runs the recurrence over `seq: [T, D]` from zero initial states and
/// returns every hidden state, `[T, H]`.
pub fn lstm_forward(tape: &mut Tape, bound: &Bound, prefix: &str, seq: Var) -> Result<Var> {
    let w_ih = bound.var(prefix, "w_ih")?;
    let w_hh = bound.var(prefix, "w_hh")?;
    let bias = bound.var(prefix, "bias")?;
    let t_len = match *tape.shape(seq) {
        [t, _] => t,
        ref s => return Err(Error::dim("lstm", "input rank", 2, s.len())),
    };
    let hidden = tape.shape(w_hh)[0];
    if tape.shape(w_hh)[1] != 4 * hidden {
        return Err(Error::dim("lstm", "recurrent weight gate axis", 4 * hidden, tape.shape(w_hh)[1]));
    }
    // Input contributions for all steps at once.
    let projected = tape.dense(seq, w_ih, bias)?;
    if tape.shape(projected)[1] != 4 * hidden {
        return Err(Error::dim("lstm", "input weight gate axis", 4 * hidden, tape.shape(projected)[1]));
    }

    let mut states = Vec::with_capacity(t_len);
    let mut carry: Option<(Var, Var)> = None;
    for t in 0..t_len {
        let x_t = tape.slice(projected, 0, t, 1)?;
        let z = match carry {
            Some((h, _)) => {
                let rec = tape.matmul(h, w_hh)?;
                tape.add(x_t, rec)?
            }
            None => x_t,
        };
        let gate = |tape: &mut Tape, k: usize| tape.slice(z, 1, k * hidden, hidden);
        let i_pre = gate(tape, 0)?;
        let f_pre = gate(tape, 1)?;
        let g_pre = gate(tape, 2)?;
        let o_pre = gate(tape, 3)?;
        let i = tape.sigmoid(i_pre);
        let g = tape.tanh(g_pre);
        let o = tape.sigmoid(o_pre);
        let ig = tape.mul(i, g)?;
        let c = match carry {
            Some((_, c_prev)) => {
                let f = tape.sigmoid(f_pre);
                let fc = tape.mul(f, c_prev)?;
                tape.add(fc, ig)?
            }
            None => ig,
        };
        let c_act = tape.tanh(c);
        let h = tape.mul(o, c_act)?;
        states.push(h);
        carry = Some((h, c));
    }
    tape.concat(&states, 0)
}

/// Rows of `x: [T, ...]` in reverse order.
pub fn reverse_time(tape: &mut Tape, x: Var) -> Result<Var> {
    let t = tape.shape(x)[0];
    let rows = (0..t)
        .rev()
        .map(|i| tape.slice(x, 0, i, 1))
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&rows, 0)
}

/// Forward LSTM over `1..T` and a second LSTM over `T..1`, realigned to
/// time and concatenated on the feature axis: `[T, 2H]`.
pub fn bilstm(tape: &mut Tape, bound: &Bound, fwd: &str, bwd: &str, seq: Var) -> Result<Var> {
    let forward = lstm_forward(tape, bound, fwd, seq)?;
    let reversed = reverse_time(tape, seq)?;
    let backward = lstm_forward(tape, bound, bwd, reversed)?;
    let aligned = reverse_time(tape, backward)?;
    tape.concat(&[forward, aligned], 1)
}
