use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Scores defining a linear-chain CRF over `n` positions and `L` labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialTable {
    /// `n × L` per-position label scores.
    pub unary: Tensor,
    /// `L × L` scores, `transition[k][l]` for moving from label `k` to `l`.
    pub transition: Tensor,
    pub start: Option<Vec<f64>>,
    pub stop: Option<Vec<f64>>,
}

impl PotentialTable {
    pub fn new(unary: Tensor, transition: Tensor) -> Result<Self> {
        Self::with_boundaries(unary, transition, None, None)
    }

    pub fn with_boundaries(
        unary: Tensor,
        transition: Tensor,
        start: Option<Vec<f64>>,
        stop: Option<Vec<f64>>,
    ) -> Result<Self> {
        let labels = unary.cols();
        if unary.rows() == 0 || labels == 0 {
            return Err(Error::Validation("potential table needs n ≥ 1 and at least one label".into()));
        }
        if transition.rows() != labels || transition.cols() != labels {
            return Err(Error::Shape {
                kind: "potentials",
                shapes: format!("unary {:?} vs transition {:?}", unary.shape(), transition.shape()),
            });
        }
        for b in [&start, &stop].into_iter().flatten() {
            if b.len() != labels {
                return Err(Error::Shape {
                    kind: "potentials",
                    shapes: format!("boundary vector of length {} for {} labels", b.len(), labels),
                });
            }
        }
        let finite = unary
            .data()
            .iter()
            .chain(transition.data())
            .chain(start.iter().flatten())
            .chain(stop.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("potential table".into()));
        }
        Ok(PotentialTable {
            unary,
            transition,
            start,
            stop,
        })
    }

    pub fn len(&self) -> usize {
        self.unary.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_labels(&self) -> usize {
        self.unary.cols()
    }

    pub(crate) fn start_score(&self, label: usize) -> f64 {
        self.start.as_ref().map_or(0.0, |s| s[label])
    }

    pub(crate) fn stop_score(&self, label: usize) -> f64 {
        self.stop.as_ref().map_or(0.0, |s| s[label])
    }

    /// Unnormalised log score of a label sequence. Terms are added in the
    /// same order as the Viterbi recursion, so the decoded path's score is
    /// reproduced bit for bit.
    pub fn score(&self, labels: &[usize]) -> Result<f64> {
        self.check_labels(labels)?;
        let mut total = self.unary.get(0, labels[0]) + self.start_score(labels[0]);
        for t in 1..labels.len() {
            total = total + self.transition.get(labels[t - 1], labels[t]) + self.unary.get(t, labels[t]);
        }
        Ok(total + self.stop_score(labels[labels.len() - 1]))
    }

    pub(crate) fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if labels.len() != self.len() {
            return Err(Error::Validation(format!(
                "label sequence has length {}, chain has {} positions",
                labels.len(),
                self.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.num_labels()) {
            return Err(Error::Index {
                kind: "label",
                index: bad,
                len: self.num_labels(),
            });
        }
        Ok(())
    }
}
