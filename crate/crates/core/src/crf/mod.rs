//! Linear-chain CRF: potentials, exact inference, decoding, and the
//! selection-attention chain.

pub mod decoder;
pub mod emission;
pub mod exhaustive;
pub mod inference;
pub mod potentials;
pub mod selection;

pub use decoder::{Decoder, DecoderRegistry};
pub use emission::{compute_potentials, EmissionParams, PotentialVars};
pub use inference::{forward_backward, log_partition, sequence_log_prob, viterbi_decode, MarginalSet};
pub use potentials::PotentialTable;
pub use selection::{chain_marginals, selection_attention, SelectionAttention, SelectionParams, SelectionVars};
