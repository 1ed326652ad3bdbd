use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::{Vocab, PAD};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Word-embedding matrix (`|V| × dim`) seeded from a plain-text vector file.
///
/// Each line is `word v1 … v_dim`. Words missing from the file keep a
/// Uniform(−0.05, 0.05) initialisation drawn from `seed`; the padding row is
/// zero.
pub fn load_pretrained_embeddings(path: &Path, vocab: &Vocab, dim: usize, seed: u64) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = vocab.words.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-0.05..0.05)).collect();
    data[PAD * dim..(PAD + 1) * dim].iter_mut().for_each(|v| *v = 0.0);

    for (i, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else { continue };
        let values = fields
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: format!("bad number `{f}` for word `{word}`"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != dim {
            return Err(Error::Validation(format!(
                "embedding for `{word}` has {} values, expected {dim}",
                values.len()
            )));
        }
        if let Some(id) = vocab.words.get(word) {
            if id != PAD {
                data[id * dim..(id + 1) * dim].copy_from_slice(&values);
            }
        }
    }
    Tensor::matrix(rows, dim, data)
}
