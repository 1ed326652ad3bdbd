//! Dialogue act tagging with a CRF-attentive structured network.

pub mod autodiff;
pub mod corpus;
pub mod crf;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod kv;
pub mod model;
pub mod oracle;
pub mod tagger;
pub mod train;

pub use error::{Error, Result};
