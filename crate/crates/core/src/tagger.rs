//! Taggers behind one trait, trained by name through a registry.
//!
//! `crf-asn` is the full model; `logistic` (context-free softmax over mean
//! word embeddings) and `majority` are reference baselines.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamRegistry, Tape, Tensor, Var};
use crate::corpus::synthetic::GeneratorModel;
use crate::corpus::{build_vocab, Conversation, IndexedUtterance, Vocab};
use crate::crf::{Decoder, DecoderRegistry};
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::model::{CrfAsn, INIT_SCALE};
use crate::train::{adagrad_step, make_batches, train_loop, EarlyStopping, TrainConfig};

/// Assigns one act name per utterance.
pub trait Tagger: Send + Sync {
    fn name(&self) -> &str;
    fn tag(&self, conv: &Conversation) -> Result<Vec<String>>;
}

/// Fits a [`Tagger`] on labeled data.
pub trait TaggerTrainer: Send + Sync {
    fn name(&self) -> &'static str;
    fn fit(&self, train: &[Conversation], valid: &[Conversation], config: &TrainConfig) -> Result<Box<dyn Tagger>>;
}

/// Tags every conversation and scores against gold acts.
pub fn tagger_accuracy(tagger: &dyn Tagger, convs: &[Conversation]) -> Result<f64> {
    let mut preds = Vec::with_capacity(convs.len());
    let mut golds = Vec::with_capacity(convs.len());
    for c in convs {
        if !c.is_labeled() {
            return Err(Error::Validation(format!("conversation `{}` is not labeled", c.id)));
        }
        preds.push(tagger.tag(c)?);
        golds.push(c.utterances.iter().filter_map(|u| u.act.clone()).collect::<Vec<_>>());
    }
    let ids: Vec<String> = convs.iter().map(|c| c.id.clone()).collect();
    accuracy(&preds, &golds, Some(&ids))
}

pub struct CrfAsnTagger {
    pub model: CrfAsn,
    pub decoder: Arc<dyn Decoder>,
}

impl Tagger for CrfAsnTagger {
    fn name(&self) -> &str {
        "crf-asn"
    }

    fn tag(&self, conv: &Conversation) -> Result<Vec<String>> {
        let idx = self.model.index(conv)?;
        let path = self.model.predict(&self.model.params, &idx, self.decoder.as_ref())?;
        Ok(path.into_iter().map(|y| self.model.vocab.act_name(y).to_string()).collect())
    }
}

pub struct CrfAsnTrainer;

impl TaggerTrainer for CrfAsnTrainer {
    fn name(&self) -> &'static str {
        "crf-asn"
    }

    fn fit(&self, train: &[Conversation], valid: &[Conversation], config: &TrainConfig) -> Result<Box<dyn Tagger>> {
        let outcome = train_loop(train, valid, config, None, |_| {})?;
        Ok(Box::new(CrfAsnTagger {
            model: outcome.model,
            decoder: DecoderRegistry::default().get(&config.decoder)?,
        }))
    }
}

/// Predicts the most frequent training act everywhere.
pub struct Majority {
    pub act: String,
}

impl Tagger for Majority {
    fn name(&self) -> &str {
        "majority"
    }

    fn tag(&self, conv: &Conversation) -> Result<Vec<String>> {
        Ok(vec![self.act.clone(); conv.len()])
    }
}

pub struct MajorityTrainer;

impl TaggerTrainer for MajorityTrainer {
    fn name(&self) -> &'static str {
        "majority"
    }

    fn fit(&self, train: &[Conversation], _valid: &[Conversation], _config: &TrainConfig) -> Result<Box<dyn Tagger>> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for a in train.iter().flat_map(|c| &c.utterances).filter_map(|u| u.act.as_deref()) {
            *counts.entry(a).or_insert(0) += 1;
        }
        // BTreeMap order makes ties go to the lexicographically first act
        let act = counts
            .iter()
            .fold(None::<(&str, usize)>, |best, (&a, &n)| match best {
                Some((_, m)) if m >= n => best,
                _ => Some((a, n)),
            })
            .map(|(a, _)| a.to_string())
            .ok_or_else(|| Error::Validation("no labeled utterance in training data".into()))?;
        Ok(Box::new(Majority { act }))
    }
}

/// Softmax over the mean word embedding of each utterance, ignoring context.
pub struct Logistic {
    vocab: Vocab,
    params: ParamRegistry,
    emb: ParamId,
    w: ParamId,
    b: ParamId,
}

impl Logistic {
    fn logits(&self, tape: &mut Tape, reg: &ParamRegistry, utt: &IndexedUtterance) -> Result<Var> {
        let t = utt.words.len();
        let rows = tape.gather_param(reg, self.emb, &utt.words)?;
        let avg = tape.constant(Tensor::filled(&[1, t], 1.0 / t as f64));
        let mean = tape.matmul(avg, rows)?;
        let w = tape.param(reg, self.w);
        let b = tape.param(reg, self.b);
        let z = tape.matmul(mean, w)?;
        tape.add_row(z, b)
    }

    /// `−log softmax(z)[gold]`.
    fn loss(&self, tape: &mut Tape, reg: &ParamRegistry, utt: &IndexedUtterance, gold: usize) -> Result<Var> {
        let z = self.logits(tape, reg, utt)?;
        let lse = tape.log_sum_exp(z, 1)?;
        let picked = tape.slice_cols(z, gold, 1)?;
        tape.sub(lse, picked)
    }

    fn predict(&self, utt: &IndexedUtterance) -> Result<usize> {
        let mut tape = Tape::new();
        let z = self.logits(&mut tape, &self.params, utt)?;
        Ok(crate::crf::inference::argmax(tape.value(z).data()))
    }
}

impl Tagger for Logistic {
    fn name(&self) -> &str {
        "logistic"
    }

    fn tag(&self, conv: &Conversation) -> Result<Vec<String>> {
        let idx = self.vocab.index(conv, false)?;
        idx.utterances
            .iter()
            .map(|u| Ok(self.vocab.act_name(self.predict(u)?).to_string()))
            .collect()
    }
}

/// Trains [`Logistic`] with AdaGrad on utterance mini-batches, keeping the
/// epoch with the best validation accuracy.
pub struct LogisticTrainer {
    pub lr: f64,
    pub batch: usize,
}

impl Default for LogisticTrainer {
    fn default() -> Self {
        LogisticTrainer { lr: 0.1, batch: 32 }
    }
}

impl TaggerTrainer for LogisticTrainer {
    fn name(&self) -> &'static str {
        "logistic"
    }

    fn fit(&self, train: &[Conversation], valid: &[Conversation], config: &TrainConfig) -> Result<Box<dyn Tagger>> {
        let vocab = build_vocab(train, config.min_count)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamRegistry::new();
        let mut table = Tensor::zeros(&[vocab.words.len(), config.word_dim]);
        table
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-INIT_SCALE..INIT_SCALE));
        let emb = params.add_padded("logistic.emb", table)?;
        let w = params.add_uniform("logistic.w", &[config.word_dim, vocab.num_acts()], INIT_SCALE, &mut rng)?;
        let b = params.add("logistic.b", Tensor::zeros(&[1, vocab.num_acts()]))?;
        let mut model = Logistic {
            vocab,
            params,
            emb,
            w,
            b,
        };

        let flatten = |cs: &[Conversation], m: &Logistic| -> Result<Vec<(IndexedUtterance, usize)>> {
            let mut out = Vec::new();
            for c in cs {
                let idx = m.vocab.index(c, true)?;
                let labels = idx.labels()?.to_vec();
                out.extend(idx.utterances.into_iter().zip(labels));
            }
            Ok(out)
        };
        let train_utts = flatten(train, &model)?;
        let valid_utts = flatten(valid, &model)?;
        let score = |m: &Logistic| -> Result<f64> {
            let preds = vec![valid_utts.iter().map(|(u, _)| m.predict(u)).collect::<Result<Vec<_>>>()?];
            let golds = vec![valid_utts.iter().map(|(_, y)| *y).collect::<Vec<_>>()];
            accuracy(&preds, &golds, None)
        };

        let mut stopper = EarlyStopping::new(config.patience);
        let mut best = model.params.named_values();
        let ones = vec![1; train_utts.len()];
        for epoch in 1..=config.max_epochs {
            for batch in make_batches(&ones, self.batch, &mut rng) {
                model.params.zero_grads();
                let mut tape = Tape::new();
                let mut total = tape.l2_penalty(&model.params, config.l2);
                for &i in &batch {
                    let (u, y) = &train_utts[i];
                    let l = model.loss(&mut tape, &model.params, u, *y)?;
                    total = tape.add(total, l)?;
                }
                tape.backward(total, &mut model.params)?;
                adagrad_step(&mut model.params, self.lr)?;
            }
            if stopper.observe(epoch, score(&model)?) {
                best = model.params.named_values();
            }
            if stopper.should_stop() {
                break;
            }
        }
        model.params.load_values(&best)?;
        Ok(Box::new(model))
    }
}

/// The true generating process used as a tagger.
impl Tagger for GeneratorModel {
    fn name(&self) -> &str {
        "generator"
    }

    fn tag(&self, conv: &Conversation) -> Result<Vec<String>> {
        Ok(self.decode_names(conv))
    }
}

/// Tagger trainers addressable by name.
#[derive(Clone)]
pub struct TaggerRegistry {
    trainers: BTreeMap<&'static str, Arc<dyn TaggerTrainer>>,
}

impl TaggerRegistry {
    pub fn empty() -> Self {
        TaggerRegistry {
            trainers: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, trainer: Arc<dyn TaggerTrainer>) {
        self.trainers.insert(trainer.name(), trainer);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn TaggerTrainer>> {
        self.trainers
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "tagger",
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.trainers.keys().copied().collect()
    }
}

impl Default for TaggerRegistry {
    fn default() -> Self {
        let mut reg = TaggerRegistry::empty();
        reg.register(Arc::new(CrfAsnTrainer));
        reg.register(Arc::new(LogisticTrainer::default()));
        reg.register(Arc::new(MajorityTrainer));
        reg
    }
}
