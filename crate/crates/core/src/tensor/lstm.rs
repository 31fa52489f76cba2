use super::{Scalar, Tape, Var};
use crate::error::{Error, Result};

/// One LSTM cell update.
///
/// `x` is `[e]` or `[B, e]`; `h`, `c` are `[d]` or `[B, d]`; `w` is
/// `[(e + d), 4d]` with gate blocks ordered input, forget, candidate, output;
/// `b` is `[4d]`. Returns `(h', c')`.
pub fn lstm_step<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    h: Var,
    c: Var,
    w: Var,
    b: Var,
) -> Result<(Var, Var)> {
    let d = tape.value(h).last_dim();
    if tape.value(w).shape().get(1) != Some(&(4 * d)) {
        return Err(Error::shape(
            "lstm_step",
            format!("weights {:?} for hidden size {d}", tape.value(w).shape()),
        ));
    }
    if tape.value(c).shape() != tape.value(h).shape() {
        return Err(Error::shape(
            "lstm_step",
            "hidden and cell state shapes differ",
        ));
    }
    let xh = tape.concat_cols(&[x, h])?;
    let z = tape.linear(xh, w, b)?;
    let zi = tape.slice_cols(z, 0, d)?;
    let zf = tape.slice_cols(z, d, 2 * d)?;
    let zg = tape.slice_cols(z, 2 * d, 3 * d)?;
    let zo = tape.slice_cols(z, 3 * d, 4 * d)?;
    let i = tape.sigmoid(zi)?;
    let f = tape.sigmoid(zf)?;
    let g = tape.tanh(zg)?;
    let o = tape.sigmoid(zo)?;
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next)?;
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}
