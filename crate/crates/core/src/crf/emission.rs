//! Label-chain potentials from encoded utterances and the attended context.

use rand::Rng;

use super::potentials::PotentialTable;
use crate::autodiff::{ParamId, ParamRegistry, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct EmissionParams {
    /// `|Y| × d`, one embedding per act.
    pub act_emb: ParamId,
    /// `2d × h`
    pub we: ParamId,
    /// `1 × h`
    pub be: ParamId,
    /// `h × |Y|`
    pub wy: ParamId,
    /// `|Y| × |Y|`, row = previous label.
    pub trans: ParamId,
    pub start: Option<ParamId>,
    pub stop: Option<ParamId>,
}

impl EmissionParams {
    pub fn init<R: Rng>(
        reg: &mut ParamRegistry,
        d: usize,
        hidden: usize,
        labels: usize,
        start_stop: bool,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let boundary = |reg: &mut ParamRegistry, name: &str| -> Result<Option<ParamId>> {
            if start_stop {
                Ok(Some(reg.add(name, Tensor::zeros(&[1, labels]))?))
            } else {
                Ok(None)
            }
        };
        Ok(EmissionParams {
            act_emb: reg.add_uniform("crf.act_emb", &[labels, d], scale, rng)?,
            we: reg.add_uniform("crf.we", &[2 * d, hidden], scale, rng)?,
            be: reg.add("crf.be", Tensor::zeros(&[1, hidden]))?,
            wy: reg.add_uniform("crf.wy", &[hidden, labels], scale, rng)?,
            trans: reg.add("crf.trans", Tensor::zeros(&[labels, labels]))?,
            start: boundary(reg, "crf.start")?,
            stop: boundary(reg, "crf.stop")?,
        })
    }
}

/// Tape handles of a chain's potentials.
#[derive(Debug, Clone, Copy)]
pub struct PotentialVars {
    /// `n × |Y|`
    pub unary: Var,
    pub transition: Var,
    pub start: Option<Var>,
    pub stop: Option<Var>,
}

impl PotentialVars {
    pub fn table(&self, tape: &Tape) -> Result<PotentialTable> {
        let boundary = |v: Option<Var>| v.map(|v| tape.value(v).data().to_vec());
        PotentialTable::with_boundaries(
            tape.value(self.unary).clone(),
            tape.value(self.transition).clone(),
            boundary(self.start),
            boundary(self.stop),
        )
    }

    /// log Z of the chain, recorded on the tape.
    pub fn log_partition(&self, tape: &mut Tape) -> Result<Var> {
        tape.log_partition(self.unary, self.transition, self.start, self.stop)
    }

    /// Unnormalised score of `labels`, recorded on the tape.
    pub fn score(&self, tape: &mut Tape, labels: &[usize]) -> Result<Var> {
        tape.chain_score(self.unary, self.transition, self.start, self.stop, labels)
    }
}

/// `unary_i(y) = u_iᵀ E_a(y) + w_yᵀ tanh(W_e [u_i ; c] + b_e)` for every row
/// of `finals` (`n × d`), with `context` (`1 × d`) shared by all rows.
pub fn compute_potentials(
    tape: &mut Tape,
    reg: &ParamRegistry,
    p: &EmissionParams,
    finals: Var,
    context: Var,
) -> Result<PotentialVars> {
    let n = tape.value(finals).rows();
    let act_emb = tape.param(reg, p.act_emb);
    let we = tape.param(reg, p.we);
    let be = tape.param(reg, p.be);
    let wy = tape.param(reg, p.wy);

    let act_t = tape.transpose(act_emb);
    let dot = tape.matmul(finals, act_t)?;
    let ones = tape.constant(Tensor::filled(&[n, 1], 1.0));
    let ctx = tape.matmul(ones, context)?;
    let joined = tape.concat_cols(&[finals, ctx])?;
    let hidden = tape.matmul(joined, we)?;
    let hidden = tape.add_row(hidden, be)?;
    let hidden = tape.tanh(hidden);
    let mlp = tape.matmul(hidden, wy)?;
    let unary = tape.add(dot, mlp)?;
    Ok(PotentialVars {
        unary,
        transition: tape.param(reg, p.trans),
        start: p.start.map(|s| tape.param(reg, s)),
        stop: p.stop.map(|s| tape.param(reg, s)),
    })
}
