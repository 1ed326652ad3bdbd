//! The full tagger: encoder, selection attention and the label chain.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::Checkpoint;
use crate::autodiff::{ParamRegistry, Tape, Tensor, Var};
use crate::corpus::{Conversation, IndexedConversation, Vocab};
use crate::crf::emission::{compute_potentials, EmissionParams, PotentialVars};
use crate::crf::selection::{selection_attention, SelectionParams, SelectionVars};
use crate::crf::{forward_backward, viterbi_decode, Decoder, MarginalSet, PotentialTable};
use crate::encoder::{encode, EncodedVars, EncoderDims, EncoderParams};
use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Uniform initialisation range of weight matrices.
pub const INIT_SCALE: f64 = 0.08;

/// Everything needed to rebuild the parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub encoder: EncoderDims,
    pub labels: usize,
    pub start_stop: bool,
}

impl ModelDims {
    pub fn from_config(config: &TrainConfig, labels: usize) -> Self {
        ModelDims {
            encoder: EncoderDims {
                word_dim: config.word_dim,
                char_dim: config.char_dim,
                pos_dim: config.d_p,
                ner_dim: config.d_n,
                utt_hidden: config.d_u,
                hops: config.hops,
            },
            labels,
            start_stop: config.start_stop,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    dims: ModelDims,
    vocab: Vocab,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub encoded: EncodedVars,
    pub selection: SelectionVars,
    pub potentials: PotentialVars,
}

/// Plain-value view of a conversation under the model.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub potentials: PotentialTable,
    pub marginals: MarginalSet,
    pub gamma: Vec<f64>,
    /// First-hop memory attention, `n × n`.
    pub attention: Vec<Vec<f64>>,
    pub viterbi_path: Vec<usize>,
    pub viterbi_score: f64,
}

#[derive(Debug, Clone)]
pub struct CrfAsn {
    pub dims: ModelDims,
    pub vocab: Vocab,
    /// Live parameters; the EMA shadows sit in each entry's `shadow`.
    pub params: ParamRegistry,
    pub encoder: EncoderParams,
    pub selection: SelectionParams,
    pub emission: EmissionParams,
}

impl CrfAsn {
    /// Fresh model. `word` optionally supplies pretrained word vectors.
    pub fn new(dims: ModelDims, vocab: Vocab, word: Option<Tensor>, seed: u64) -> Result<Self> {
        Self::build(dims, vocab, word, INIT_SCALE, seed)
    }

    fn build(dims: ModelDims, vocab: Vocab, word: Option<Tensor>, scale: f64, seed: u64) -> Result<Self> {
        if dims.labels == 0 {
            return Err(Error::Config("model needs at least one act label".into()));
        }
        if dims.labels != vocab.num_acts() {
            return Err(Error::Config(format!(
                "{} labels configured but vocabulary has {} acts",
                dims.labels,
                vocab.num_acts()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamRegistry::new();
        let tables = (vocab.words.len(), vocab.chars.len(), vocab.pos.len(), vocab.ner.len());
        let encoder = EncoderParams::init(&mut params, dims.encoder, tables, word, scale, &mut rng)?;
        let d = dims.encoder.d();
        let selection = SelectionParams::init(&mut params, d, d, scale, &mut rng)?;
        let emission = EmissionParams::init(&mut params, d, d, dims.labels, dims.start_stop, scale, &mut rng)?;
        Ok(CrfAsn {
            dims,
            vocab,
            params,
            encoder,
            selection,
            emission,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.dims.labels
    }

    /// Records the forward pass of `conv` on `tape` using parameter values
    /// from `reg` (the live registry or a shadow snapshot).
    pub fn forward(&self, tape: &mut Tape, reg: &ParamRegistry, conv: &IndexedConversation, dropout: f64) -> Result<Forward> {
        let encoded = encode(tape, reg, &self.encoder, conv, dropout)?;
        let selection = selection_attention(tape, reg, &self.selection, encoded.finals)?;
        let potentials = compute_potentials(tape, reg, &self.emission, encoded.finals, selection.context)?;
        Ok(Forward {
            encoded,
            selection,
            potentials,
        })
    }

    /// `log Z − score(gold)` for one labeled conversation.
    pub fn nll(&self, tape: &mut Tape, reg: &ParamRegistry, conv: &IndexedConversation, dropout: f64) -> Result<Var> {
        let labels = conv.labels()?;
        let f = self.forward(tape, reg, conv, dropout)?;
        let log_z = f.potentials.log_partition(tape)?;
        let gold = f.potentials.score(tape, labels)?;
        tape.sub(log_z, gold)
    }

    pub fn potentials(&self, reg: &ParamRegistry, conv: &IndexedConversation) -> Result<PotentialTable> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, reg, conv, 0.0)?;
        f.potentials.table(&tape)
    }

    pub fn predict(&self, reg: &ParamRegistry, conv: &IndexedConversation, decoder: &dyn Decoder) -> Result<Vec<usize>> {
        Ok(decoder.decode(&self.potentials(reg, conv)?))
    }

    /// Indexes a raw conversation with the model vocabulary; labels, when
    /// present and known, are kept.
    pub fn index(&self, conv: &Conversation) -> Result<IndexedConversation> {
        self.vocab.index(conv, false)
    }

    pub fn analyze(&self, reg: &ParamRegistry, conv: &IndexedConversation) -> Result<Analysis> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, reg, conv, 0.0)?;
        let potentials = f.potentials.table(&tape)?;
        let marginals = forward_backward(&potentials);
        let (viterbi_path, viterbi_score) = viterbi_decode(&potentials);
        Ok(Analysis {
            gamma: tape.value(f.selection.gamma).data().to_vec(),
            attention: tape.value(f.encoded.hops[0].attention).to_rows(),
            potentials,
            marginals,
            viterbi_path,
            viterbi_score,
        })
    }

    /// Registry whose values are the EMA shadows.
    pub fn shadow_params(&self) -> ParamRegistry {
        self.params.shadow_snapshot()
    }

    /// Writes `reg`'s values (normally a shadow snapshot) with the layout
    /// metadata.
    pub fn to_checkpoint(&self, reg: &ParamRegistry) -> Result<Checkpoint> {
        let meta = Meta {
            dims: self.dims.clone(),
            vocab: self.vocab.clone(),
        };
        Ok(Checkpoint {
            meta: serde_json::to_string(&meta)?,
            tensors: reg.named_values(),
        })
    }

    pub fn save(&self, reg: &ParamRegistry, path: &Path) -> Result<()> {
        self.to_checkpoint(reg)?.save(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: Meta = serde_json::from_str(&ck.meta)
            .map_err(|e| Error::Checkpoint(format!("unreadable model metadata: {e}")))?;
        let mut model = Self::build(meta.dims, meta.vocab, None, 0.0, 0)?;
        if ck.tensors.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                ck.tensors.len(),
                model.params.len()
            )));
        }
        model.params.load_values(&ck.tensors)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, Utterance};
    use crate::crf::decoder::Viterbi;

    fn toy() -> (Vec<Conversation>, Vocab) {
        let c = Conversation::new(
            "t",
            vec![
                Utterance::from_text("A", "hi there", Some("greet")).unwrap(),
                Utterance::from_text("B", "how are you", Some("question")).unwrap(),
                Utterance::from_text("A", "fine", Some("answer")).unwrap(),
            ],
        )
        .unwrap();
        let v = build_vocab(std::slice::from_ref(&c), 1).unwrap();
        (vec![c], v)
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            d: 8,
            d_u: 4,
            word_dim: 6,
            char_dim: 3,
            d_p: 2,
            d_n: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let (convs, vocab) = toy();
        let dims = ModelDims::from_config(&small_config(), vocab.num_acts());
        let model = CrfAsn::new(dims, vocab, None, 7).unwrap();
        let idx = model.index(&convs[0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&model.params, &path).unwrap();
        let back = CrfAsn::load(&path).unwrap();
        assert_eq!(
            model.potentials(&model.params, &idx).unwrap(),
            back.potentials(&back.params, &idx).unwrap()
        );
        assert_eq!(
            model.predict(&model.params, &idx, &Viterbi).unwrap(),
            back.predict(&back.params, &idx, &Viterbi).unwrap()
        );
    }

    #[test]
    fn mismatched_checkpoint_rejected() {
        let (_, vocab) = toy();
        let dims = ModelDims::from_config(&small_config(), vocab.num_acts());
        let model = CrfAsn::new(dims, vocab, None, 7).unwrap();
        let mut ck = model.to_checkpoint(&model.params).unwrap();
        ck.tensors.pop();
        assert!(CrfAsn::from_checkpoint(&ck).is_err());
        let mut ck = model.to_checkpoint(&model.params).unwrap();
        ck.tensors[0].1 = Tensor::zeros(&[1, 1]);
        assert!(CrfAsn::from_checkpoint(&ck).is_err());
    }
}
