//! Synthetic dialogues from a first-order Markov chain over acts, each act
//! emitting one phrase from its own categorical table. The generating model
//! is kept so that its exact Viterbi decode can serve as a reference.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Conversation, Utterance};
use crate::error::{Error, Result};
use crate::kv::KeyValues;

/// Built-in acts and their characteristic phrases.
const INVENTORY: &[(&str, &[&str])] = &[
    (
        "statement",
        &[
            "i am working on my projects trying to graduate",
            "i heard that the deadline is coming",
            "we moved here last year",
            "my sister lives in boston",
            "the game starts at eight",
            "i usually take the bus to work",
        ],
    ),
    (
        "backchannel",
        &["uh huh", "yeah", "all right", "mm hmm", "okay", "sure sure"],
    ),
    (
        "opinion",
        &[
            "i think it is great",
            "i do not believe it can work",
            "you need to make a push",
            "that seems like a bad idea",
            "i think they should wait",
            "it is probably worth it",
        ],
    ),
    (
        "abandoned",
        &["so it was", "are yo", "maybe", "i was just", "and then the", "but if"],
    ),
    (
        "agreement",
        &[
            "that is exactly it",
            "i can not agree more",
            "sure that is why i am so busy now",
            "absolutely",
            "you are right about that",
            "exactly",
        ],
    ),
    (
        "question",
        &[
            "what are you doing these days",
            "how about you",
            "do you like it",
            "where do you live",
            "have you seen the movie",
            "is it far from here",
        ],
    ),
    (
        "answer",
        &[
            "i am busy writing my paper",
            "no not really",
            "about two hours",
            "yes i have",
            "in the city",
            "it depends on the weather",
        ],
    ),
    (
        "greet",
        &[
            "hi long time no see",
            "hi how are you",
            "hello",
            "good morning",
            "hey there",
            "nice to meet you",
        ],
    ),
    (
        "farewell",
        &[
            "i can not bother you for too long goodbye",
            "see you later",
            "bye",
            "take care",
            "talk to you soon",
            "have a good night",
        ],
    ),
];

/// Phrases any act may emit; only context can disambiguate them.
const SHARED: &[&str] = &["you know", "i see", "so", "right", "um", "oh well"];

/// Full description of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub act_names: Vec<String>,
    /// Distribution of the first act; the chain's stationary distribution
    /// when absent.
    pub initial: Option<Vec<f64>>,
    /// Row-stochastic `num_acts × num_acts`.
    pub act_transition: Vec<Vec<f64>>,
    /// Per act: (phrase, probability) pairs summing to one.
    pub act_phrase_tables: Vec<Vec<(String, f64)>>,
    pub num_conversations: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

const SPEC_KEYS: &[&str] = &[
    "acts",
    "num_acts",
    "self_transition",
    "transition",
    "initial",
    "ambiguity",
    "num_conversations",
    "min_len",
    "max_len",
    "seed",
];

fn act_phrases(index: usize, name: &str) -> Vec<String> {
    match INVENTORY.iter().find(|(n, _)| *n == name) {
        Some((_, phrases)) => phrases.iter().map(|p| p.to_string()).collect(),
        None => (0..6)
            .map(|j| format!("{name} w{index}x{j} w{j}y{index}"))
            .collect(),
    }
}

/// Phrase tables mixing an act's own phrases (mass `1 − ambiguity`) with the
/// shared pool (mass `ambiguity`), both uniform within their part.
pub fn phrase_tables(act_names: &[String], ambiguity: f64) -> Vec<Vec<(String, f64)>> {
    act_names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let own = act_phrases(i, name);
            let own_p = (1.0 - ambiguity) / own.len() as f64;
            let mut table: Vec<(String, f64)> = own.into_iter().map(|p| (p, own_p)).collect();
            if ambiguity > 0.0 {
                let shared_p = ambiguity / SHARED.len() as f64;
                table.extend(SHARED.iter().map(|p| (p.to_string(), shared_p)));
            }
            table
        })
        .collect()
}

/// Act names for `n` acts: built-in names first, then `act<k>`.
pub fn default_act_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| match INVENTORY.get(i) {
            Some((name, _)) => name.to_string(),
            None => format!("act{i}"),
        })
        .collect()
}

/// Transition matrix keeping `self_p` on the diagonal and spreading the rest
/// uniformly.
pub fn sticky_transition(n: usize, self_p: f64) -> Vec<Vec<f64>> {
    if n == 1 {
        return vec![vec![1.0]];
    }
    let off = (1.0 - self_p) / (n - 1) as f64;
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { self_p } else { off }).collect())
        .collect()
}

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Validation(format!("{what} has a negative or non-finite entry")));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

impl SyntheticSpec {
    /// Spec over built-in phrases with a sticky chain.
    pub fn sticky(num_acts: usize, self_p: f64, ambiguity: f64, num_conversations: usize, seed: u64) -> Self {
        let act_names = default_act_names(num_acts);
        SyntheticSpec {
            act_phrase_tables: phrase_tables(&act_names, ambiguity),
            act_transition: sticky_transition(num_acts, self_p),
            act_names,
            initial: None,
            num_conversations,
            min_len: 8,
            max_len: 15,
            seed,
        }
    }

    pub fn num_acts(&self) -> usize {
        self.act_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_acts();
        if n == 0 {
            return Err(Error::Validation("synthetic spec needs at least one act".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Validation(format!(
                "need 1 ≤ min_len ≤ max_len, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        if self.act_transition.len() != n || self.act_phrase_tables.len() != n {
            return Err(Error::Validation(format!("tables must have {n} rows")));
        }
        for (i, row) in self.act_transition.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Validation(format!("transition row {i} has {} entries", row.len())));
            }
            check_distribution(row, &format!("transition row {i}"))?;
        }
        if let Some(init) = &self.initial {
            if init.len() != n {
                return Err(Error::Validation("initial distribution has wrong length".into()));
            }
            check_distribution(init, "initial distribution")?;
        }
        for (i, table) in self.act_phrase_tables.iter().enumerate() {
            if table.iter().any(|(p, _)| p.split_whitespace().next().is_none()) {
                return Err(Error::Validation(format!("act {i} has an empty phrase")));
            }
            let probs: Vec<f64> = table.iter().map(|(_, p)| *p).collect();
            check_distribution(&probs, &format!("phrase table {i}"))?;
        }
        Ok(())
    }

    /// Parses the key-value spec format:
    ///
    /// ```text
    /// acts = greet, question, answer     # or: num_acts = 5
    /// self_transition = 0.7              # or: transition = r1 ; r2 ; ...
    /// initial = 1 0 0                    # optional
    /// ambiguity = 0.3
    /// num_conversations = 300
    /// min_len = 8
    /// max_len = 15
    /// seed = 7
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        kv.check_keys(SPEC_KEYS)?;
        let act_names: Vec<String> = match (kv.raw("acts"), kv.get::<usize>("num_acts")?) {
            (Some(list), count) => {
                let names: Vec<String> = list
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
                if count.is_some_and(|c| c != names.len()) {
                    return Err(Error::Config("num_acts disagrees with acts".into()));
                }
                names
            }
            (None, Some(n)) => default_act_names(n),
            (None, None) => return Err(Error::Config("one of `acts` or `num_acts` is required".into())),
        };
        let n = act_names.len();
        let act_transition = match (kv.matrix("transition")?, kv.get::<f64>("self_transition")?) {
            (Some(m), None) => m,
            (None, Some(p)) => sticky_transition(n, p),
            (None, None) => sticky_transition(n, 1.0 / n as f64),
            (Some(_), Some(_)) => {
                return Err(Error::Config("give either `transition` or `self_transition`".into()))
            }
        };
        let ambiguity = kv.get::<f64>("ambiguity")?.unwrap_or(0.3);
        if !(0.0..1.0).contains(&ambiguity) {
            return Err(Error::Config(format!("ambiguity {ambiguity} outside [0, 1)")));
        }
        let spec = SyntheticSpec {
            act_phrase_tables: phrase_tables(&act_names, ambiguity),
            act_transition,
            initial: kv.list("initial")?,
            act_names,
            num_conversations: kv.get("num_conversations")?.unwrap_or(100),
            min_len: kv.get("min_len")?.unwrap_or(8),
            max_len: kv.get("max_len")?.unwrap_or(15),
            seed: kv.get("seed")?.unwrap_or(42),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Stationary distribution by power iteration.
pub fn stationary(transition: &[Vec<f64>]) -> Vec<f64> {
    let n = transition.len();
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..100_000 {
        let mut next = vec![0.0; n];
        for (i, row) in transition.iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                next[j] += pi[i] * p;
            }
        }
        let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if delta < 1e-15 {
            break;
        }
    }
    pi
}

/// The true generating process, kept for reference decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorModel {
    pub act_names: Vec<String>,
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    pub emissions: Vec<Vec<(String, f64)>>,
}

impl GeneratorModel {
    fn emission_lookup(&self) -> Vec<HashMap<&str, f64>> {
        self.emissions
            .iter()
            .map(|t| t.iter().map(|(p, q)| (p.as_str(), *q)).collect())
            .collect()
    }

    /// Most probable act sequence (indices into `act_names`) under the true
    /// model. Unknown phrases get a tiny emission probability under every act.
    pub fn decode(&self, conv: &Conversation) -> Vec<usize> {
        const FLOOR: f64 = 1e-12;
        let lookup = self.emission_lookup();
        let l = self.act_names.len();
        let ln = |p: f64| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
        let emit: Vec<Vec<f64>> = conv
            .utterances
            .iter()
            .map(|u| {
                let text = u.text();
                lookup
                    .iter()
                    .map(|t| t.get(text.as_str()).copied().unwrap_or(FLOOR).ln())
                    .collect()
            })
            .collect();
        let n = emit.len();
        let mut best = vec![vec![f64::NEG_INFINITY; l]; n];
        let mut back = vec![vec![0usize; l]; n];
        for y in 0..l {
            best[0][y] = ln(self.initial[y]) + emit[0][y];
        }
        for t in 1..n {
            for y in 0..l {
                for k in 0..l {
                    let s = best[t - 1][k] + ln(self.transition[k][y]);
                    if s > best[t][y] {
                        best[t][y] = s;
                        back[t][y] = k;
                    }
                }
                best[t][y] += emit[t][y];
            }
        }
        let mut path = vec![0; n];
        path[n - 1] = crate::crf::inference::argmax(&best[n - 1]);
        for t in (1..n).rev() {
            path[t - 1] = back[t][path[t]];
        }
        path
    }

    /// Like [`GeneratorModel::decode`] but returning act names.
    pub fn decode_names(&self, conv: &Conversation) -> Vec<String> {
        self.decode(conv)
            .into_iter()
            .map(|i| self.act_names[i].clone())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Samples `spec.num_conversations` conversations. Output depends only on
/// `spec`, seed included.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Vec<Conversation>, GeneratorModel)> {
    spec.validate()?;
    let model = GeneratorModel {
        act_names: spec.act_names.clone(),
        initial: spec
            .initial
            .clone()
            .unwrap_or_else(|| stationary(&spec.act_transition)),
        transition: spec.act_transition.clone(),
        emissions: spec.act_phrase_tables.clone(),
    };
    let dist = |row: &[f64]| WeightedIndex::new(row).map_err(|e| Error::Validation(e.to_string()));
    let initial = dist(&model.initial)?;
    let rows = model
        .transition
        .iter()
        .map(|r| dist(r))
        .collect::<Result<Vec<_>>>()?;
    let phrases = model
        .emissions
        .iter()
        .map(|t| dist(&t.iter().map(|(_, p)| *p).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut convs = Vec::with_capacity(spec.num_conversations);
    for c in 0..spec.num_conversations {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let mut act = initial.sample(&mut rng);
        let mut utts = Vec::with_capacity(len);
        for t in 0..len {
            if t > 0 {
                act = rows[act].sample(&mut rng);
            }
            let (phrase, _) = &model.emissions[act][phrases[act].sample(&mut rng)];
            let speaker = if t % 2 == 0 { "A" } else { "B" };
            utts.push(Utterance::from_text(speaker, phrase, Some(&model.act_names[act]))?);
        }
        convs.push(Conversation::new(&format!("syn-{}-{c}", spec.seed), utts)?);
    }
    Ok((convs, model))
}
