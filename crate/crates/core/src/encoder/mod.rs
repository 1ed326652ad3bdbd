//! Hierarchical conversation encoder: token features, utterance BiGRU,
//! contextual BiGRU and memory attention.

pub mod embedding;
pub mod gru;
pub mod memory;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use embedding::{EmbeddingParams, EmbeddingShape};
pub use gru::GruParams;
pub use memory::{memory_layer, Hop};

use crate::autodiff::{ParamId, ParamRegistry, Tape, Tensor, Var};
use crate::corpus::IndexedConversation;
use crate::error::{Error, Result};

/// Widths of the encoder. `d = 2 · utt_hidden`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub word_dim: usize,
    pub char_dim: usize,
    pub pos_dim: usize,
    pub ner_dim: usize,
    pub utt_hidden: usize,
    pub hops: usize,
}

impl EncoderDims {
    pub fn d(&self) -> usize {
        2 * self.utt_hidden
    }
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub embed: EmbeddingParams,
    pub utt_fwd: GruParams,
    pub utt_bwd: GruParams,
    pub ctx_fwd: GruParams,
    pub ctx_bwd: GruParams,
    /// `utt_hidden × d`
    pub wm_fwd: ParamId,
    pub wm_bwd: ParamId,
    /// `1 × d`
    pub bm: ParamId,
    pub dims: EncoderDims,
}

impl EncoderParams {
    pub fn init<R: Rng>(
        reg: &mut ParamRegistry,
        dims: EncoderDims,
        tables: (usize, usize, usize, usize),
        word: Option<Tensor>,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.utt_hidden == 0 || dims.hops == 0 {
            return Err(Error::Config("hidden size and hop count must be positive".into()));
        }
        let (words, chars, pos, ner) = tables;
        let shape = EmbeddingShape {
            words,
            chars,
            pos,
            ner,
            word_dim: dims.word_dim,
            char_dim: dims.char_dim,
            pos_dim: dims.pos_dim,
            ner_dim: dims.ner_dim,
        };
        let embed = EmbeddingParams::init(reg, &shape, word, scale, rng)?;
        let e = embed.output_dim(reg);
        let (h, d) = (dims.utt_hidden, dims.d());
        Ok(EncoderParams {
            utt_fwd: GruParams::init(reg, "utt.fwd", e, h, scale, rng)?,
            utt_bwd: GruParams::init(reg, "utt.bwd", e, h, scale, rng)?,
            ctx_fwd: GruParams::init(reg, "ctx.fwd", d, h, scale, rng)?,
            ctx_bwd: GruParams::init(reg, "ctx.bwd", d, h, scale, rng)?,
            wm_fwd: reg.add_uniform("ctx.wm_fwd", &[h, d], scale, rng)?,
            wm_bwd: reg.add_uniform("ctx.wm_bwd", &[h, d], scale, rng)?,
            bm: reg.add("ctx.bm", Tensor::zeros(&[1, d]))?,
            embed,
            dims,
        })
    }
}

/// Tape handles of an encoded conversation.
#[derive(Debug, Clone)]
pub struct EncodedVars {
    /// `n × d`, one BiGRU vector per utterance.
    pub original: Var,
    /// `n × d`
    pub contextual: Var,
    pub hops: Vec<Hop>,
    /// `n × d`, query after the last hop.
    pub finals: Var,
}

/// Plain values of an encoder pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedConversation {
    pub original: Vec<Vec<f64>>,
    pub contextual: Vec<Vec<f64>>,
    /// First-hop attention.
    pub attention: Vec<Vec<f64>>,
    pub memory_out: Vec<Vec<f64>>,
    pub finals: Vec<Vec<f64>>,
}

impl EncodedVars {
    pub fn values(&self, tape: &Tape) -> EncodedConversation {
        let rows = |v: Var| tape.value(v).to_rows();
        EncodedConversation {
            original: rows(self.original),
            contextual: rows(self.contextual),
            attention: rows(self.hops[0].attention),
            memory_out: rows(self.hops[0].output),
            finals: rows(self.finals),
        }
    }
}

/// Utterance vectors (`n × d`), each the concatenated final states of the
/// word-level BiGRU.
pub fn encode_utterances(
    tape: &mut Tape,
    reg: &ParamRegistry,
    p: &EncoderParams,
    conv: &IndexedConversation,
    dropout: f64,
) -> Result<Var> {
    let mut rows = Vec::with_capacity(conv.len());
    for utt in &conv.utterances {
        if utt.words.is_empty() {
            return Err(Error::Validation(format!("conversation `{}` has an empty utterance", conv.id)));
        }
        let e = embedding::embed_utterance(tape, reg, &p.embed, utt)?;
        let e = tape.dropout(e, dropout)?;
        rows.push(gru::bidirectional_final(tape, reg, &p.utt_fwd, &p.utt_bwd, e)?);
    }
    tape.concat_rows(&rows)
}

/// `h_j = tanh(W_b ←h_j + W_f →h_j + b_m)` over a BiGRU across utterances.
pub fn encode_context(tape: &mut Tape, reg: &ParamRegistry, p: &EncoderParams, utterances: Var) -> Result<Var> {
    let fwd = gru::run(tape, reg, &p.ctx_fwd, utterances, false)?;
    let bwd = gru::run(tape, reg, &p.ctx_bwd, utterances, true)?;
    let fwd = tape.concat_rows(&fwd)?;
    let bwd = tape.concat_rows(&bwd)?;
    let wf = tape.param(reg, p.wm_fwd);
    let wb = tape.param(reg, p.wm_bwd);
    let bm = tape.param(reg, p.bm);
    let a = tape.matmul(bwd, wb)?;
    let b = tape.matmul(fwd, wf)?;
    let s = tape.add(a, b)?;
    let s = tape.add_row(s, bm)?;
    Ok(tape.tanh(s))
}

/// Full encoder pass. `dropout` applies to token features and utterance
/// vectors on training tapes.
pub fn encode(
    tape: &mut Tape,
    reg: &ParamRegistry,
    p: &EncoderParams,
    conv: &IndexedConversation,
    dropout: f64,
) -> Result<EncodedVars> {
    let original = encode_utterances(tape, reg, p, conv, dropout)?;
    let original = tape.dropout(original, dropout)?;
    let contextual = encode_context(tape, reg, p, original)?;
    let hops = memory_layer(tape, original, contextual, p.dims.hops)?;
    let finals = hops[hops.len() - 1].next;
    Ok(EncodedVars {
        original,
        contextual,
        hops,
        finals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckOptions};
    use crate::corpus::IndexedUtterance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> EncoderDims {
        EncoderDims {
            word_dim: 4,
            char_dim: 3,
            pos_dim: 2,
            ner_dim: 2,
            utt_hidden: 3,
            hops: 1,
        }
    }

    fn utt(words: &[usize]) -> IndexedUtterance {
        IndexedUtterance {
            words: words.to_vec(),
            chars: words.iter().map(|&w| vec![2 + w % 3, 3]).collect(),
            pos: words.iter().map(|&w| 2 + w % 2).collect(),
            ner: vec![2; words.len()],
        }
    }

    fn conv(utts: Vec<IndexedUtterance>) -> IndexedConversation {
        IndexedConversation {
            id: "toy".into(),
            utterances: utts,
            labels: None,
        }
    }

    fn model(scale: f64) -> (ParamRegistry, EncoderParams) {
        let mut reg = ParamRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = EncoderParams::init(&mut reg, dims(), (6, 5, 4, 4), None, scale, &mut rng).unwrap();
        (reg, p)
    }

    #[test]
    fn shapes_and_ranges() {
        let (reg, p) = model(0.3);
        let c = conv(vec![utt(&[2, 3, 4]), utt(&[5]), utt(&[1, 2])]);
        let mut tape = Tape::new();
        let enc = encode(&mut tape, &reg, &p, &c, 0.0).unwrap().values(&tape);
        assert_eq!(enc.original.len(), 3);
        assert_eq!(enc.original[0].len(), 6);
        assert!(enc.contextual.iter().flatten().all(|v| v.abs() < 1.0));
        for (j, row) in enc.finals.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                assert_eq!(*v, enc.memory_out[j][k] + enc.original[j][k]);
            }
        }
    }

    #[test]
    fn zero_weights_zero_vectors() {
        let (reg, p) = model(0.0);
        let mut tape = Tape::new();
        let u = encode_utterances(&mut tape, &reg, &p, &conv(vec![utt(&[2, 3])]), 0.0).unwrap();
        assert!(tape.value(u).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn singleton_context_depends_only_on_itself() {
        let (reg, p) = model(0.3);
        let mut tape = Tape::new();
        let a = encode(&mut tape, &reg, &p, &conv(vec![utt(&[2, 3])]), 0.0).unwrap();
        let enc = a.values(&tape);
        assert_eq!(enc.attention, vec![vec![1.0]]);
        let doubled: Vec<f64> = enc.original[0].iter().map(|v| 2.0 * v).collect();
        assert_eq!(enc.finals[0], doubled);
    }

    #[test]
    fn later_order_reaches_first_context_vector() {
        let (reg, p) = model(0.3);
        let base = vec![utt(&[2]), utt(&[3, 4]), utt(&[5, 1]), utt(&[4])];
        let mut permuted = base.clone();
        permuted[1..].reverse();
        let mut tape = Tape::new();
        let a = encode(&mut tape, &reg, &p, &conv(base), 0.0).unwrap().values(&tape);
        let b = encode(&mut tape, &reg, &p, &conv(permuted), 0.0).unwrap().values(&tape);
        assert_eq!(a.original[0], b.original[0]);
        assert_ne!(a.contextual[0], b.contextual[0]);
    }

    #[test]
    fn dropout_off_is_reproducible() {
        let (reg, p) = model(0.3);
        let c = conv(vec![utt(&[2, 3]), utt(&[4])]);
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = encode(&mut t1, &reg, &p, &c, 0.2).unwrap().values(&t1);
        let b = encode(&mut t2, &reg, &p, &c, 0.2).unwrap().values(&t2);
        assert_eq!(a, b);
    }

    #[test]
    fn whole_encoder_gradients() {
        let (mut reg, p) = model(0.5);
        let c = conv(vec![utt(&[2, 3, 4]), utt(&[5, 1, 2])]);
        let report = grad_check(
            |reg, tape| {
                let enc = encode(tape, reg, &p, &c, 0.0)?;
                let target = tape.constant(Tensor::from_rows(&[
                    vec![0.3, -0.2, 0.1, 0.5, -0.4, 0.2],
                    vec![-0.1, 0.4, 0.2, -0.3, 0.1, 0.6],
                ]));
                let prod = tape.mul(enc.finals, target)?;
                let sq = tape.mul(enc.finals, enc.finals)?;
                let both = tape.add(prod, sq)?;
                Ok(tape.sum(both))
            },
            &mut reg,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{report}");
    }
}
