//! Token features: word, character-CNN, POS and NER embeddings, concatenated.

use rand::Rng;

use crate::autodiff::{ParamId, ParamRegistry, Tape, Tensor, Var};
use crate::corpus::{IndexedUtterance, PAD};
use crate::error::{Error, Result};

/// Filter widths and counts of the character CNN.
pub const CHAR_FILTERS: [(usize, usize); 3] = [(2, 34), (3, 33), (4, 33)];

#[derive(Debug, Clone, Copy)]
pub struct ConvFilter {
    pub width: usize,
    /// `(width · char_dim) × count`
    pub weight: ParamId,
    /// `1 × count`
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct EmbeddingParams {
    pub word: ParamId,
    pub char: ParamId,
    pub pos: ParamId,
    pub ner: ParamId,
    pub filters: Vec<ConvFilter>,
    pub char_dim: usize,
}

/// Table sizes and widths needed to build [`EmbeddingParams`].
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingShape {
    pub words: usize,
    pub chars: usize,
    pub pos: usize,
    pub ner: usize,
    pub word_dim: usize,
    pub char_dim: usize,
    pub pos_dim: usize,
    pub ner_dim: usize,
}

fn uniform<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| if scale > 0.0 { rng.gen_range(-scale..scale) } else { 0.0 })
        .collect();
    Tensor::raw(rows, cols, data)
}

impl EmbeddingParams {
    /// Random tables. `word` replaces the word table when given (pretrained
    /// vectors); its shape must be `words × word_dim`.
    pub fn init<R: Rng>(
        reg: &mut ParamRegistry,
        shape: &EmbeddingShape,
        word: Option<Tensor>,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let word = match word {
            Some(t) if t.rows() == shape.words && t.cols() == shape.word_dim => t,
            Some(t) => {
                return Err(Error::Shape {
                    kind: "word embeddings",
                    shapes: format!("{}x{} given, {}x{} expected", t.rows(), t.cols(), shape.words, shape.word_dim),
                })
            }
            None => uniform(shape.words, shape.word_dim, scale, rng),
        };
        let word = reg.add_padded("emb.word", word)?;
        let char = reg.add_padded("emb.char", uniform(shape.chars, shape.char_dim, scale, rng))?;
        let pos = reg.add_padded("emb.pos", uniform(shape.pos, shape.pos_dim, scale, rng))?;
        let ner = reg.add_padded("emb.ner", uniform(shape.ner, shape.ner_dim, scale, rng))?;
        let filters = CHAR_FILTERS
            .iter()
            .map(|&(width, count)| {
                Ok(ConvFilter {
                    width,
                    weight: reg.add_uniform(
                        &format!("charcnn.w{width}"),
                        &[width * shape.char_dim, count],
                        scale,
                        rng,
                    )?,
                    bias: reg.add(&format!("charcnn.b{width}"), Tensor::zeros(&[1, count]))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EmbeddingParams {
            word,
            char,
            pos,
            ner,
            filters,
            char_dim: shape.char_dim,
        })
    }

    /// Widest filter; shorter character sequences are padded to it.
    pub fn max_width(&self) -> usize {
        self.filters.iter().map(|f| f.width).max().unwrap_or(1)
    }

    /// Total width of the per-token feature vector.
    pub fn output_dim(&self, reg: &ParamRegistry) -> usize {
        let conv: usize = self.filters.iter().map(|f| reg.value(f.bias).cols()).sum();
        reg.value(self.word).cols() + conv + reg.value(self.pos).cols() + reg.value(self.ner).cols()
    }
}

/// Character-CNN feature of one token (`1 × Σ counts`): per width, a valid
/// convolution, tanh, then max over time.
pub fn char_features(tape: &mut Tape, reg: &ParamRegistry, p: &EmbeddingParams, chars: &[usize]) -> Result<Var> {
    let mut ids = chars.to_vec();
    ids.resize(ids.len().max(p.max_width()), PAD);
    let table = tape.gather_param(reg, p.char, &ids)?;
    let mut parts = Vec::with_capacity(p.filters.len());
    for f in &p.filters {
        let w = tape.param(reg, f.weight);
        let b = tape.param(reg, f.bias);
        let conv = tape.conv1d(table, w, b, f.width)?;
        let act = tape.tanh(conv);
        parts.push(tape.max_over_time(act));
    }
    tape.concat_cols(&parts)
}

/// Embeds every token of an utterance: `T × (word + char + pos + ner)`.
pub fn embed_utterance(tape: &mut Tape, reg: &ParamRegistry, p: &EmbeddingParams, utt: &IndexedUtterance) -> Result<Var> {
    let words = tape.gather_param(reg, p.word, &utt.words)?;
    let chars = utt
        .chars
        .iter()
        .map(|c| char_features(tape, reg, p, c))
        .collect::<Result<Vec<_>>>()?;
    let chars = tape.concat_rows(&chars)?;
    let pos = tape.gather_param(reg, p.pos, &utt.pos)?;
    let ner = tape.gather_param(reg, p.ner, &utt.ner)?;
    tape.concat_cols(&[words, chars, pos, ner])
}
