//! Memory attention over utterance vectors with residual hops.

use crate::autodiff::{Tape, Var};
use crate::error::Result;

/// Output of one hop.
#[derive(Debug, Clone, Copy)]
pub struct Hop {
    /// `n × n`, row `j` is the attention of query `j` over memory slots.
    pub attention: Var,
    /// `n × d`, `o_j = Σ_i p_{j,i} u_i`.
    pub output: Var,
    /// `n × d`, `o_j + query_j`.
    pub next: Var,
}

/// One hop: `p = softmax_rows(Q Hᵀ)`, `O = p U`, next query `O + Q`.
pub fn hop(tape: &mut Tape, query: Var, keys: Var, values: Var) -> Result<Hop> {
    let keys_t = tape.transpose(keys);
    let scores = tape.matmul(query, keys_t)?;
    let attention = tape.softmax(scores, 1)?;
    let output = tape.matmul(attention, values)?;
    let next = tape.add(output, query)?;
    Ok(Hop {
        attention,
        output,
        next,
    })
}

/// `hops` rounds with keys `contextual` and values `original`, starting from
/// `original` as the query.
pub fn memory_layer(tape: &mut Tape, original: Var, contextual: Var, hops: usize) -> Result<Vec<Hop>> {
    let mut out = Vec::with_capacity(hops);
    let mut query = original;
    for _ in 0..hops.max(1) {
        let h = hop(tape, query, contextual, original)?;
        query = h.next;
        out.push(h);
    }
    Ok(out)
}
