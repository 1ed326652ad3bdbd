//! Structured selection attention: a binary chain CRF over "is utterance `i`
//! selected", whose marginals weight the utterance vectors into one context.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamRegistry, Tape, Tensor, Var};
use crate::error::Result;

/// Node marginals and log Z of a chain CRF, composed from differentiable tape
/// ops so gradients flow back through the forward-backward recursions.
///
/// `unary` is `n × L`, `pairwise` is `L × L`. Returns (`n × L` marginals,
/// `1 × 1` log Z).
pub fn chain_marginals(tape: &mut Tape, unary: Var, pairwise: Var) -> Result<(Var, Var)> {
    let (n, l) = {
        let u = tape.value(unary);
        (u.rows(), u.cols())
    };
    let mut alpha = Vec::with_capacity(n);
    alpha.push(tape.row(unary, 0)?);
    for t in 1..n {
        let prev = tape.transpose(alpha[t - 1]);
        let scores = tape.add_col(pairwise, prev)?;
        let reduced = tape.log_sum_exp(scores, 0)?;
        let u = tape.row(unary, t)?;
        alpha.push(tape.add(reduced, u)?);
    }
    let mut beta = vec![tape.constant(Tensor::zeros(&[1, l])); n];
    for t in (0..n.saturating_sub(1)).rev() {
        let u = tape.row(unary, t + 1)?;
        let ahead = tape.add(u, beta[t + 1])?;
        let scores = tape.add_row(pairwise, ahead)?;
        let reduced = tape.log_sum_exp(scores, 1)?;
        beta[t] = tape.transpose(reduced);
    }
    let log_z = tape.log_sum_exp(alpha[n - 1], 1)?;
    let neg_log_z = tape.scale(log_z, -1.0);
    let mut rows = Vec::with_capacity(n);
    for t in 0..n {
        let s = tape.add(alpha[t], beta[t])?;
        let s = tape.add_col(s, neg_log_z)?;
        rows.push(tape.exp(s));
    }
    Ok((tape.concat_rows(&rows)?, log_z))
}

/// Learned pieces of the selection chain.
#[derive(Debug, Clone, Copy)]
pub struct SelectionParams {
    pub proj: ParamId,
    pub bias: ParamId,
    pub score: ParamId,
    pub pairwise: ParamId,
}

impl SelectionParams {
    pub fn init<R: Rng>(reg: &mut ParamRegistry, dim: usize, hidden: usize, scale: f64, rng: &mut R) -> Result<Self> {
        Ok(SelectionParams {
            proj: reg.add_uniform("sel.proj", &[dim, hidden], scale, rng)?,
            bias: reg.add("sel.bias", Tensor::zeros(&[1, hidden]))?,
            score: reg.add_uniform("sel.score", &[hidden, 1], scale, rng)?,
            pairwise: reg.add("sel.pairwise", Tensor::zeros(&[2, 2]))?,
        })
    }
}

/// Tape handles produced by [`selection_attention`].
#[derive(Debug, Clone, Copy)]
pub struct SelectionVars {
    /// `n × 2` with column 0 fixed at zero.
    pub unary: Var,
    pub pairwise: Var,
    /// `n × 1`, `p(z_i = 1)`.
    pub gamma: Var,
    /// `1 × d`, `Σ_i γ_i u_i`.
    pub context: Var,
}

/// Plain values of a selection pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionAttention {
    pub unary: Tensor,
    pub pairwise: Tensor,
    pub gamma: Vec<f64>,
    pub context: Vec<f64>,
}

impl SelectionVars {
    pub fn values(&self, tape: &Tape) -> SelectionAttention {
        SelectionAttention {
            unary: tape.value(self.unary).clone(),
            pairwise: tape.value(self.pairwise).clone(),
            gamma: tape.value(self.gamma).data().to_vec(),
            context: tape.value(self.context).data().to_vec(),
        }
    }
}

/// Scores each row of `finals` (`n × d`) with `vᵀ tanh(W u + b)`, runs the
/// binary chain, and returns the γ-weighted context.
pub fn selection_attention(
    tape: &mut Tape,
    reg: &ParamRegistry,
    params: &SelectionParams,
    finals: Var,
) -> Result<SelectionVars> {
    let n = tape.value(finals).rows();
    let proj = tape.param(reg, params.proj);
    let bias = tape.param(reg, params.bias);
    let score = tape.param(reg, params.score);
    let pairwise = tape.param(reg, params.pairwise);

    let h = tape.matmul(finals, proj)?;
    let h = tape.add_row(h, bias)?;
    let h = tape.tanh(h);
    let s = tape.matmul(h, score)?;
    let off = tape.constant(Tensor::zeros(&[n, 1]));
    let unary = tape.concat_cols(&[off, s])?;

    let (marg, _) = chain_marginals(tape, unary, pairwise)?;
    let gamma = tape.slice_cols(marg, 1, 1)?;
    let gamma_t = tape.transpose(gamma);
    let context = tape.matmul(gamma_t, finals)?;
    Ok(SelectionVars {
        unary,
        pairwise,
        gamma,
        context,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crf::{exhaustive, PotentialTable};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_parameters_give_half() {
        let mut reg = ParamRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = SelectionParams::init(&mut reg, 3, 4, 0.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let rows = vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0], vec![2.0, 2.0, 2.0]];
        let u = tape.constant(Tensor::from_rows(&rows));
        let sel = selection_attention(&mut tape, &reg, &p, u).unwrap().values(&tape);
        for g in &sel.gamma {
            assert!((g - 0.5).abs() < 1e-15);
        }
        for j in 0..3 {
            let expected = 0.5 * rows.iter().map(|r| r[j]).sum::<f64>();
            assert!((sel.context[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn single_node_is_sigmoid() {
        let mut tape = Tape::new();
        let unary = tape.constant(Tensor::from_rows(&[vec![0.0, 1.3]]));
        let pair = tape.constant(Tensor::from_rows(&[vec![5.0, -2.0], vec![0.3, 9.0]]));
        let (m, _) = chain_marginals(&mut tape, unary, pair).unwrap();
        let expected = 1.0 / (1.0 + (-1.3f64).exp());
        assert!((tape.value(m).get(0, 1) - expected).abs() < 1e-15);
    }

    #[test]
    fn composed_marginals_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let unary: Vec<Vec<f64>> = (0..5).map(|_| vec![0.0, rng.gen_range(-2.0..2.0)]).collect();
        let pair: Vec<Vec<f64>> = (0..2).map(|_| (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::from_rows(&unary));
        let p = tape.constant(Tensor::from_rows(&pair));
        let (m, log_z) = chain_marginals(&mut tape, u, p).unwrap();
        let pot = PotentialTable::new(Tensor::from_rows(&unary), Tensor::from_rows(&pair)).unwrap();
        let (node, _, z) = exhaustive::marginals(&pot);
        assert!((tape.value(log_z).item() - z).abs() < 1e-12);
        for (a, b) in tape.value(m).data().iter().zip(&node) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
