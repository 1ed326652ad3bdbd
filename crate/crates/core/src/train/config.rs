use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::KeyValues;

/// Training hyperparameters. Config files use these field names as keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub l2: f64,
    pub dropout: f64,
    pub max_batch: usize,
    pub patience: usize,
    pub ema_decay: f64,
    pub hops: usize,
    /// Utterance vector width; must equal `2 · d_u`.
    pub d: usize,
    pub d_u: usize,
    pub d_p: usize,
    pub d_n: usize,
    pub seed: u64,
    pub max_epochs: usize,
    pub word_dim: usize,
    pub char_dim: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub start_stop: bool,
    pub min_count: usize,
    /// Optional pretrained word-vector file.
    pub pretrained: Option<String>,
    pub decoder: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.005,
            l2: 1e-5,
            dropout: 0.2,
            max_batch: 48,
            patience: 5,
            ema_decay: 0.999,
            hops: 1,
            d: 128,
            d_u: 64,
            d_p: 16,
            d_n: 16,
            seed: 42,
            max_epochs: 50,
            word_dim: 100,
            char_dim: 16,
            clip_norm: 5.0,
            start_stop: false,
            min_count: 1,
            pretrained: None,
            decoder: "viterbi".into(),
        }
    }
}

const KEYS: &[&str] = &[
    "lr",
    "l2",
    "dropout",
    "max_batch",
    "patience",
    "ema_decay",
    "hops",
    "d",
    "d_u",
    "d_p",
    "d_n",
    "seed",
    "max_epochs",
    "word_dim",
    "char_dim",
    "clip_norm",
    "start_stop",
    "min_count",
    "pretrained",
    "decoder",
];

impl TrainConfig {
    /// Parses `key = value` lines over the defaults. Unknown keys are an
    /// error. Setting only one of `d` / `d_u` derives the other.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        kv.check_keys(KEYS)?;
        let mut c = TrainConfig::default();
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = kv.get(stringify!($field))? { c.$field = v; })*
            };
        }
        set!(lr, l2, dropout, max_batch, patience, ema_decay, hops, d_p, d_n, seed, max_epochs);
        set!(word_dim, char_dim, clip_norm, start_stop, min_count, decoder);
        match (kv.get::<usize>("d")?, kv.get::<usize>("d_u")?) {
            (Some(d), Some(du)) => (c.d, c.d_u) = (d, du),
            (Some(d), None) => (c.d, c.d_u) = (d, d / 2),
            (None, Some(du)) => (c.d, c.d_u) = (2 * du, du),
            (None, None) => {}
        }
        c.pretrained = kv.raw("pretrained").map(str::to_string);
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad(format!("ema_decay {} outside (0, 1)", self.ema_decay));
        }
        if !(self.l2 >= 0.0) {
            return bad(format!("l2 {} is negative", self.l2));
        }
        if !(self.lr > 0.0) || !(self.clip_norm >= 0.0) {
            return bad("lr must be positive and clip_norm non-negative".into());
        }
        if self.d != 2 * self.d_u || self.d_u == 0 {
            return bad(format!("d = {} must equal 2 · d_u = {}", self.d, 2 * self.d_u));
        }
        if self.max_batch == 0 || self.hops == 0 || self.max_epochs == 0 {
            return bad("max_batch, hops and max_epochs must be positive".into());
        }
        if self.word_dim == 0 || self.char_dim == 0 {
            return bad("embedding widths must be positive".into());
        }
        Ok(())
    }
}
