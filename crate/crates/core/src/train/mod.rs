//! Maximum-likelihood training with AdaGrad, EMA shadows, length buckets and
//! early stopping.

mod config;
pub mod optim;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::TrainConfig;
pub use optim::{adagrad_step, clip_gradients, ema_update, warmup_decay};

use crate::autodiff::{ParamRegistry, Tape, Var};
use crate::corpus::{build_vocab, load_pretrained_embeddings, Conversation, IndexedConversation};
use crate::crf::{Decoder, DecoderRegistry};
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::model::{CrfAsn, ModelDims};

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean negative log-likelihood per training conversation.
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

/// Patience bookkeeping over validation accuracy.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            since_improvement: 0,
        }
    }

    /// Records an epoch; returns true when it set a new best.
    pub fn observe(&mut self, epoch: usize, accuracy: f64) -> bool {
        if accuracy > self.best {
            self.best = accuracy;
            self.best_epoch = epoch;
            self.since_improvement = 0;
            true
        } else {
            self.since_improvement += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_improvement >= self.patience
    }
}

/// Groups conversation indices by length into shuffled batches of at most
/// `max_batch` same-length conversations.
pub fn make_batches<R: Rng>(lengths: &[usize], max_batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &n) in lengths.iter().enumerate() {
        buckets.entry(n).or_default().push(i);
    }
    let mut batches = Vec::new();
    for mut members in buckets.into_values() {
        members.shuffle(rng);
        batches.extend(members.chunks(max_batch.max(1)).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// `Σ NLL + λ‖Θ‖²` over `batch`, recorded on `tape`.
pub fn compute_loss(
    model: &CrfAsn,
    reg: &ParamRegistry,
    tape: &mut Tape,
    batch: &[&IndexedConversation],
    l2: f64,
    dropout: f64,
) -> Result<Var> {
    let mut total = tape.l2_penalty(reg, l2);
    for conv in batch {
        let nll = model.nll(tape, reg, conv, dropout)?;
        total = tape.add(total, nll)?;
    }
    Ok(total)
}

/// Decodes `convs` with `reg` in parallel; results keep input order.
pub fn predict_all(model: &CrfAsn, reg: &ParamRegistry, convs: &[IndexedConversation], decoder: &dyn Decoder) -> Result<Vec<Vec<usize>>> {
    convs.par_iter().map(|c| model.predict(reg, c, decoder)).collect()
}

pub fn evaluate_accuracy(model: &CrfAsn, reg: &ParamRegistry, convs: &[IndexedConversation], decoder: &dyn Decoder) -> Result<f64> {
    let preds = predict_all(model, reg, convs, decoder)?;
    let golds = convs
        .iter()
        .map(|c| c.labels().map(<[usize]>::to_vec))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = convs.iter().map(|c| c.id.clone()).collect();
    accuracy(&preds, &golds, Some(&ids))
}

/// Mutable optimisation state around a model.
pub struct Trainer {
    pub model: CrfAsn,
    pub config: TrainConfig,
    pub step: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: CrfAsn, config: TrainConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        Trainer {
            model,
            config,
            step: 0,
            rng,
        }
    }

    /// One optimiser step on `batch`; returns the batch NLL (without L2).
    pub fn step(&mut self, batch: &[&IndexedConversation]) -> Result<f64> {
        let cfg = &self.config;
        let mut tape = Tape::training(self.rng.gen());
        self.model.params.zero_grads();
        let mut nll_total = 0.0;
        let mut total = tape.l2_penalty(&self.model.params, cfg.l2);
        for conv in batch {
            let nll = self.model.nll(&mut tape, &self.model.params, conv, cfg.dropout)?;
            nll_total += tape.value(nll).item();
            total = tape.add(total, nll)?;
        }
        if !tape.value(total).item().is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", self.step)));
        }
        tape.backward(total, &mut self.model.params)?;
        clip_gradients(&mut self.model.params, cfg.clip_norm);
        adagrad_step(&mut self.model.params, cfg.lr)?;
        ema_update(&mut self.model.params, warmup_decay(cfg.ema_decay, self.step));
        self.step += 1;
        Ok(nll_total)
    }

    /// One pass over `train` in bucketed batches; returns mean NLL.
    pub fn epoch(&mut self, train: &[IndexedConversation]) -> Result<f64> {
        let lengths: Vec<usize> = train.iter().map(IndexedConversation::len).collect();
        let batches = make_batches(&lengths, self.config.max_batch, &mut self.rng);
        let mut total = 0.0;
        for b in batches {
            let batch: Vec<&IndexedConversation> = b.iter().map(|&i| &train[i]).collect();
            total += self.step(&batch)?;
        }
        Ok(total / train.len() as f64)
    }
}

pub struct TrainOutcome {
    /// Model whose parameters hold the best validation shadows.
    pub model: CrfAsn,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_accuracy: f64,
}

/// Builds the vocabulary from `train`, initialises a model and indexes both
/// corpora.
pub fn prepare(
    train: &[Conversation],
    valid: &[Conversation],
    config: &TrainConfig,
) -> Result<(CrfAsn, Vec<IndexedConversation>, Vec<IndexedConversation>)> {
    config.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Validation("training and validation corpora must be non-empty".into()));
    }
    let vocab = build_vocab(train, config.min_count)?;
    let word = match &config.pretrained {
        Some(p) => Some(load_pretrained_embeddings(Path::new(p), &vocab, config.word_dim, config.seed)?),
        None => None,
    };
    let dims = ModelDims::from_config(config, vocab.num_acts());
    let model = CrfAsn::new(dims, vocab, word, config.seed)?;
    let index = |cs: &[Conversation]| cs.iter().map(|c| model.vocab.index(c, true)).collect::<Result<Vec<_>>>();
    let train_idx = index(train)?;
    let valid_idx = index(valid)?;
    Ok((model, train_idx, valid_idx))
}

/// Full training run. After every epoch the EMA shadows are scored on
/// `valid`; the best shadows are kept (and written to `checkpoint` when
/// given). `on_epoch` sees each history record as it is produced.
pub fn train_loop(
    train: &[Conversation],
    valid: &[Conversation],
    config: &TrainConfig,
    checkpoint: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let (model, train_idx, valid_idx) = prepare(train, valid, config)?;
    let decoder = DecoderRegistry::default().get(&config.decoder)?;
    let mut trainer = Trainer::new(model, config.clone());
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best: Option<ParamRegistry> = None;
    let mut history = Vec::new();
    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        let train_loss = trainer.epoch(&train_idx)?;
        let shadow = trainer.model.shadow_params();
        let val_accuracy = evaluate_accuracy(&trainer.model, &shadow, &valid_idx, decoder.as_ref())?;
        if stopper.observe(epoch, val_accuracy) {
            if let Some(path) = checkpoint {
                trainer.model.save(&shadow, path)?;
            }
            best = Some(shadow);
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_accuracy,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.push(record);
        if stopper.should_stop() {
            break;
        }
    }
    let mut model = trainer.model;
    if let Some(best) = best {
        model.params.load_values(&best.named_values())?;
    }
    Ok(TrainOutcome {
        model,
        history,
        best_epoch: stopper.best_epoch,
        best_accuracy: stopper.best,
    })
}
