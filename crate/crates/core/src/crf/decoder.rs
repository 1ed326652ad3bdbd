use std::collections::BTreeMap;
use std::sync::Arc;

use super::potentials::PotentialTable;
use super::{exhaustive, inference};
use crate::error::{Error, Result};

/// Turns a potential table into one label per position.
pub trait Decoder: Send + Sync {
    fn name(&self) -> &'static str;
    fn decode(&self, pot: &PotentialTable) -> Vec<usize>;
}

/// Exact MAP decoding by dynamic programming.
pub struct Viterbi;

impl Decoder for Viterbi {
    fn name(&self) -> &'static str {
        "viterbi"
    }

    fn decode(&self, pot: &PotentialTable) -> Vec<usize> {
        inference::viterbi_decode(pot).0
    }
}

/// Per-position argmax of node marginals.
pub struct Posterior;

impl Decoder for Posterior {
    fn name(&self) -> &'static str {
        "posterior"
    }

    fn decode(&self, pot: &PotentialTable) -> Vec<usize> {
        inference::posterior_decode(pot)
    }
}

/// Exact MAP decoding by enumeration. Only practical for tiny chains.
pub struct Exhaustive;

impl Decoder for Exhaustive {
    fn name(&self) -> &'static str {
        "exhaustive"
    }

    fn decode(&self, pot: &PotentialTable) -> Vec<usize> {
        exhaustive::best_sequence(pot).0
    }
}

/// Decoders addressable by name.
#[derive(Clone)]
pub struct DecoderRegistry {
    decoders: BTreeMap<&'static str, Arc<dyn Decoder>>,
}

impl DecoderRegistry {
    pub fn empty() -> Self {
        DecoderRegistry {
            decoders: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, decoder: Arc<dyn Decoder>) {
        self.decoders.insert(decoder.name(), decoder);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Decoder>> {
        self.decoders
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "decoder",
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.decoders.keys().copied().collect()
    }
}

impl Default for DecoderRegistry {
    fn default() -> Self {
        let mut reg = DecoderRegistry::empty();
        reg.register(Arc::new(Viterbi));
        reg.register(Arc::new(Posterior));
        reg.register(Arc::new(Exhaustive));
        reg
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn lookup_by_name() {
        let reg = DecoderRegistry::default();
        assert_eq!(reg.names(), vec!["exhaustive", "posterior", "viterbi"]);
        assert_eq!(reg.get("viterbi").unwrap().name(), "viterbi");
        let err = reg.get("beam").err().unwrap().to_string();
        assert!(err.contains("beam") && err.contains("viterbi"));
    }

    #[test]
    fn decoders_agree_on_factorised_chain() {
        let pot = PotentialTable::new(
            Tensor::from_rows(&[vec![0.1, 2.0], vec![3.0, -1.0], vec![0.0, 0.5]]),
            Tensor::zeros(&[2, 2]),
        )
        .unwrap();
        let reg = DecoderRegistry::default();
        for name in reg.names() {
            assert_eq!(reg.get(name).unwrap().decode(&pot), vec![1, 0, 1], "{name}");
        }
    }
}
