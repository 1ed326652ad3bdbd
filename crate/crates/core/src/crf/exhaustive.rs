//! Brute-force enumeration over every label sequence. Exponential; used as
//! the independent reference for the dynamic programs in `inference`.

use super::potentials::PotentialTable;
use crate::autodiff::tensor::log_sum_exp;

/// Every label sequence of length `n` over `labels` symbols, in lexicographic
/// order (position 0 most significant).
pub fn sequences(n: usize, labels: usize) -> impl Iterator<Item = Vec<usize>> {
    let total = labels.pow(n as u32);
    (0..total).map(move |mut code| {
        let mut seq = vec![0; n];
        for slot in seq.iter_mut().rev() {
            *slot = code % labels;
            code /= labels;
        }
        seq
    })
}

fn all_scores(pot: &PotentialTable) -> Vec<(Vec<usize>, f64)> {
    sequences(pot.len(), pot.num_labels())
        .map(|y| {
            let s = pot.score(&y).expect("enumerated labels are in range");
            (y, s)
        })
        .collect()
}

pub fn log_partition(pot: &PotentialTable) -> f64 {
    log_sum_exp(all_scores(pot).into_iter().map(|(_, s)| s))
}

/// Node marginals (`n × L`, row-major) and edge marginals
/// (`(n−1) × L × L`, row-major) by explicit summation.
pub fn marginals(pot: &PotentialTable) -> (Vec<f64>, Vec<f64>, f64) {
    let (n, l) = (pot.len(), pot.num_labels());
    let scored = all_scores(pot);
    let log_z = log_sum_exp(scored.iter().map(|(_, s)| *s));
    let mut node = vec![0.0; n * l];
    let mut edge = vec![0.0; n.saturating_sub(1) * l * l];
    for (y, s) in &scored {
        let p = (s - log_z).exp();
        for t in 0..n {
            node[t * l + y[t]] += p;
            if t + 1 < n {
                edge[(t * l + y[t]) * l + y[t + 1]] += p;
            }
        }
    }
    (node, edge, log_z)
}

/// Best sequence and score; the first maximiser in lexicographic order wins.
pub fn best_sequence(pot: &PotentialTable) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    for (y, s) in all_scores(pot) {
        if best.as_ref().is_none_or(|(_, b)| s > *b) {
            best = Some((y, s));
        }
    }
    best.expect("at least one sequence")
}
