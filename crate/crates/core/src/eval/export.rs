//! Per-conversation dump of everything needed to redraw attention diagrams
//! and marginal heatmaps.
//!
//! Schema (one JSON object per conversation):
//!
//! ```text
//! version         1
//! id              conversation id
//! labels          act names, indexing every label axis below
//! node_marginals  n × |Y|, p(y_t = y)
//! edge_marginals  (n−1) × |Y| × |Y|, p(y_t = k, y_{t+1} = l)
//! log_z           log partition of the label chain
//! gamma           n, selection probabilities
//! memory_attention n × n, first-hop attention rows
//! viterbi_path    n label ids
//! viterbi_labels  n act names
//! viterbi_score   score of the path
//! gold            n act names or null
//! ```

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamRegistry;
use crate::corpus::Conversation;
use crate::error::Result;
use crate::model::CrfAsn;

pub const EXPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub version: u32,
    pub id: String,
    pub labels: Vec<String>,
    pub node_marginals: Vec<Vec<f64>>,
    pub edge_marginals: Vec<Vec<Vec<f64>>>,
    pub log_z: f64,
    pub gamma: Vec<f64>,
    pub memory_attention: Vec<Vec<f64>>,
    pub viterbi_path: Vec<usize>,
    pub viterbi_labels: Vec<String>,
    pub viterbi_score: f64,
    pub gold: Option<Vec<String>>,
}

pub fn export_attention(model: &CrfAsn, reg: &ParamRegistry, conv: &Conversation) -> Result<AttentionExport> {
    let idx = model.index(conv)?;
    let a = model.analyze(reg, &idx)?;
    let l = model.num_labels();
    let edge_marginals = (0..a.marginals.num_edges())
        .map(|t| a.marginals.edge_slice(t).chunks(l).map(<[f64]>::to_vec).collect())
        .collect();
    let labels: Vec<String> = model.vocab.acts.symbols().to_vec();
    Ok(AttentionExport {
        version: EXPORT_VERSION,
        id: conv.id.clone(),
        node_marginals: a.marginals.node.to_rows(),
        edge_marginals,
        log_z: a.marginals.log_z,
        gamma: a.gamma,
        memory_attention: a.attention,
        viterbi_labels: a.viterbi_path.iter().map(|&y| labels[y].clone()).collect(),
        viterbi_path: a.viterbi_path,
        viterbi_score: a.viterbi_score,
        gold: conv
            .is_labeled()
            .then(|| conv.utterances.iter().filter_map(|u| u.act.clone()).collect()),
        labels,
    })
}
