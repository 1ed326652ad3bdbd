//! Exact inference on a linear chain: forward recursion, forward-backward
//! marginals and Viterbi decoding. Everything runs in log space.

use serde::{Deserialize, Serialize};

use super::potentials::PotentialTable;
use crate::autodiff::tensor::log_sum_exp;
use crate::autodiff::Tensor;
use crate::error::Result;

/// Node and edge marginals of a chain distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalSet {
    /// `n × L`, `node[t][y] = p(y_t = y)`.
    pub node: Tensor,
    /// `(n−1) × L × L`, `edge[t][k][l] = p(y_t = k, y_{t+1} = l)`.
    pub edge: Tensor,
    pub log_z: f64,
}

impl MarginalSet {
    pub fn edge_at(&self, t: usize, from: usize, to: usize) -> f64 {
        let l = self.node.cols();
        self.edge.data()[(t * l + from) * l + to]
    }

    pub fn edge_slice(&self, t: usize) -> &[f64] {
        let l = self.node.cols();
        &self.edge.data()[t * l * l..(t + 1) * l * l]
    }

    pub fn num_edges(&self) -> usize {
        self.edge.shape()[0]
    }

    /// `Σ_t edge[t]` as a flat `L × L` array.
    pub fn edge_totals(&self) -> Vec<f64> {
        let l = self.node.cols();
        let mut out = vec![0.0; l * l];
        for t in 0..self.num_edges() {
            for (o, v) in out.iter_mut().zip(self.edge_slice(t)) {
                *o += v;
            }
        }
        out
    }
}

fn alphas(pot: &PotentialTable) -> Vec<Vec<f64>> {
    let (n, l) = (pot.len(), pot.num_labels());
    let mut alpha = vec![vec![0.0; l]; n];
    for y in 0..l {
        alpha[0][y] = pot.unary.get(0, y) + pot.start_score(y);
    }
    for t in 1..n {
        for y in 0..l {
            let prev = &alpha[t - 1];
            let lse = log_sum_exp((0..l).map(|k| prev[k] + pot.transition.get(k, y)));
            alpha[t][y] = lse + pot.unary.get(t, y);
        }
    }
    alpha
}

fn betas(pot: &PotentialTable) -> Vec<Vec<f64>> {
    let (n, l) = (pot.len(), pot.num_labels());
    let mut beta = vec![vec![0.0; l]; n];
    for y in 0..l {
        beta[n - 1][y] = pot.stop_score(y);
    }
    for t in (0..n - 1).rev() {
        for k in 0..l {
            let next = &beta[t + 1];
            beta[t][k] = log_sum_exp(
                (0..l).map(|y| pot.transition.get(k, y) + pot.unary.get(t + 1, y) + next[y]),
            );
        }
    }
    beta
}

/// log Σ_y exp(score(y)) via the forward recursion.
pub fn log_partition(pot: &PotentialTable) -> f64 {
    let alpha = alphas(pot);
    let last = &alpha[pot.len() - 1];
    log_sum_exp((0..pot.num_labels()).map(|y| last[y] + pot.stop_score(y)))
}

pub fn forward_backward(pot: &PotentialTable) -> MarginalSet {
    let (n, l) = (pot.len(), pot.num_labels());
    let alpha = alphas(pot);
    let beta = betas(pot);
    let log_z = log_sum_exp((0..l).map(|y| alpha[n - 1][y] + pot.stop_score(y)));

    let mut node = Vec::with_capacity(n * l);
    for t in 0..n {
        node.extend((0..l).map(|y| (alpha[t][y] + beta[t][y] - log_z).exp()));
    }
    let mut edge = Vec::with_capacity((n - 1) * l * l);
    for t in 0..n - 1 {
        for k in 0..l {
            for y in 0..l {
                let s = alpha[t][k]
                    + pot.transition.get(k, y)
                    + pot.unary.get(t + 1, y)
                    + beta[t + 1][y]
                    - log_z;
                edge.push(s.exp());
            }
        }
    }
    MarginalSet {
        node: Tensor::raw(n, l, node),
        edge: Tensor::new(vec![n - 1, l, l], edge).expect("edge shape"),
        log_z,
    }
}

/// `score(y) − log Z`; always ≤ 0.
pub fn sequence_log_prob(pot: &PotentialTable, labels: &[usize]) -> Result<f64> {
    let score = pot.score(labels)?;
    Ok((score - log_partition(pot)).min(0.0))
}

/// Highest-scoring label sequence and its score.
///
/// Keeps a score table and a backpointer table, then backtraces from the best
/// final label. Ties resolve to the lowest label id.
pub fn viterbi_decode(pot: &PotentialTable) -> (Vec<usize>, f64) {
    let (n, l) = (pot.len(), pot.num_labels());
    let mut best = vec![vec![0.0; l]; n];
    let mut back = vec![vec![0usize; l]; n];
    for y in 0..l {
        best[0][y] = pot.unary.get(0, y) + pot.start_score(y);
    }
    for t in 1..n {
        for y in 0..l {
            let mut arg = 0;
            let mut max = f64::NEG_INFINITY;
            for k in 0..l {
                let s = best[t - 1][k] + pot.transition.get(k, y);
                if s > max {
                    max = s;
                    arg = k;
                }
            }
            best[t][y] = max + pot.unary.get(t, y);
            back[t][y] = arg;
        }
    }
    let mut last = 0;
    let mut score = f64::NEG_INFINITY;
    for y in 0..l {
        let s = best[n - 1][y] + pot.stop_score(y);
        if s > score {
            score = s;
            last = y;
        }
    }
    let mut path = vec![0; n];
    path[n - 1] = last;
    for t in (1..n).rev() {
        path[t - 1] = back[t][path[t]];
    }
    (path, score)
}

/// Label with the highest node marginal at each position.
pub fn posterior_decode(pot: &PotentialTable) -> Vec<usize> {
    let marg = forward_backward(pot);
    (0..pot.len())
        .map(|t| argmax(marg.node.row(t)))
        .collect()
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut arg = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[arg] {
            arg = i;
        }
    }
    arg
}
