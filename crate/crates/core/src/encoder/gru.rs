//! Gated recurrent unit composed from tape primitives.
//!
//! Gate layout along the `3h` axis is `[z | r | candidate]`:
//!
//! ```text
//! z  = σ(x W_z + h U_z + b_z)
//! r  = σ(x W_r + h U_r + b_r)
//! ĥ  = tanh(x W_h + (r ⊙ h) U_h + b_h)
//! h' = h + z ⊙ (ĥ − h)
//! ```

use rand::Rng;

use crate::autodiff::{ParamId, ParamRegistry, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    /// `in × 3h`
    pub w: ParamId,
    /// `h × 2h`, recurrent weights of the two gates.
    pub u_zr: ParamId,
    /// `h × h`, recurrent weights of the candidate.
    pub u_h: ParamId,
    /// `1 × 3h`
    pub b: ParamId,
    pub hidden: usize,
}

impl GruParams {
    pub fn init<R: Rng>(
        reg: &mut ParamRegistry,
        prefix: &str,
        input: usize,
        hidden: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(GruParams {
            w: reg.add_uniform(&format!("{prefix}.w"), &[input, 3 * hidden], scale, rng)?,
            u_zr: reg.add_uniform(&format!("{prefix}.u_zr"), &[hidden, 2 * hidden], scale, rng)?,
            u_h: reg.add_uniform(&format!("{prefix}.u_h"), &[hidden, hidden], scale, rng)?,
            b: reg.add(&format!("{prefix}.b"), Tensor::zeros(&[1, 3 * hidden]))?,
            hidden,
        })
    }
}

/// Runs the GRU over the rows of `inputs` (`T × in`) from a zero state,
/// forwards or in reverse. Returns one `1 × h` state per input row, aligned
/// with the input positions.
pub fn run(tape: &mut Tape, reg: &ParamRegistry, p: &GruParams, inputs: Var, reverse: bool) -> Result<Vec<Var>> {
    let steps = tape.value(inputs).rows();
    let h = p.hidden;
    let w = tape.param(reg, p.w);
    let u_zr = tape.param(reg, p.u_zr);
    let u_h = tape.param(reg, p.u_h);
    let b = tape.param(reg, p.b);

    let proj = tape.matmul(inputs, w)?;
    let proj = tape.add_row(proj, b)?;

    let mut state = tape.constant(Tensor::zeros(&[1, h]));
    let mut states = vec![state; steps];
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        let x = tape.row(proj, t)?;
        let x_zr = tape.slice_cols(x, 0, 2 * h)?;
        let x_h = tape.slice_cols(x, 2 * h, h)?;
        let rec = tape.matmul(state, u_zr)?;
        let gates = tape.add(x_zr, rec)?;
        let gates = tape.sigmoid(gates);
        let z = tape.slice_cols(gates, 0, h)?;
        let r = tape.slice_cols(gates, h, h)?;
        let reset = tape.mul(r, state)?;
        let cand = tape.matmul(reset, u_h)?;
        let cand = tape.add(x_h, cand)?;
        let cand = tape.tanh(cand);
        let delta = tape.sub(cand, state)?;
        let step = tape.mul(z, delta)?;
        state = tape.add(state, step)?;
        states[t] = state;
    }
    Ok(states)
}

/// Final states of a forward and a backward pass, concatenated (`1 × 2h`).
pub fn bidirectional_final(
    tape: &mut Tape,
    reg: &ParamRegistry,
    fwd: &GruParams,
    bwd: &GruParams,
    inputs: Var,
) -> Result<Var> {
    let f = run(tape, reg, fwd, inputs, false)?;
    let b = run(tape, reg, bwd, inputs, true)?;
    let last = f[f.len() - 1];
    tape.concat_cols(&[last, b[0]])
}
