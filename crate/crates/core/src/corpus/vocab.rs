use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::Conversation;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
/// Tag id for tokens whose input carried no POS/NER column.
pub const ABSENT: usize = 2;

const PAD_SYMBOL: &str = "<pad>";
const UNK_SYMBOL: &str = "<unk>";
const ABSENT_SYMBOL: &str = "<absent>";

/// Bijection between symbols and contiguous ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct SymbolTable {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for SymbolTable {
    fn from(symbols: Vec<String>) -> Self {
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        SymbolTable { symbols, index }
    }
}

impl From<SymbolTable> for Vec<String> {
    fn from(t: SymbolTable) -> Self {
        t.symbols
    }
}

impl SymbolTable {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn get(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    /// Id of `symbol`, falling back to [`UNK`].
    pub fn id_or_unk(&self, symbol: &str) -> usize {
        self.get(symbol).unwrap_or(UNK)
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }
}

/// Orders by descending count, ties lexicographic.
fn ranked(counts: BTreeMap<String, usize>, min_count: usize) -> impl Iterator<Item = String> {
    let mut items: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    items.into_iter().map(|(s, _)| s)
}

fn table(reserved: &[&str], counts: BTreeMap<String, usize>, min_count: usize) -> SymbolTable {
    let mut symbols: Vec<String> = reserved.iter().map(|s| s.to_string()).collect();
    symbols.extend(ranked(counts, min_count).filter(|s| !reserved.contains(&s.as_str())));
    SymbolTable::from(symbols)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub words: SymbolTable,
    pub chars: SymbolTable,
    pub pos: SymbolTable,
    pub ner: SymbolTable,
    /// Closed act set; no reserved entries.
    pub acts: SymbolTable,
}

/// Builds every table from `convs`. Words seen fewer than `min_count` times
/// are left out and will map to UNK.
pub fn build_vocab(convs: &[Conversation], min_count: usize) -> Result<Vocab> {
    if convs.is_empty() {
        return Err(Error::Validation("cannot build a vocabulary from no conversations".into()));
    }
    let mut words = BTreeMap::new();
    let mut chars = BTreeMap::new();
    let mut pos = BTreeMap::new();
    let mut ner = BTreeMap::new();
    let mut acts = BTreeMap::new();
    for u in convs.iter().flat_map(|c| &c.utterances) {
        if let Some(a) = &u.act {
            *acts.entry(a.clone()).or_insert(0) += 1;
        }
        for t in &u.tokens {
            *words.entry(t.surface().to_string()).or_insert(0) += 1;
            for ch in t.chars() {
                *chars.entry(ch.to_string()).or_insert(0) += 1;
            }
            if let Some(p) = &t.pos {
                *pos.entry(p.clone()).or_insert(0) += 1;
            }
            if let Some(n) = &t.ner {
                *ner.entry(n.clone()).or_insert(0) += 1;
            }
        }
    }
    if acts.is_empty() {
        return Err(Error::Validation("no labeled utterance in corpus".into()));
    }
    let base = [PAD_SYMBOL, UNK_SYMBOL];
    let tags = [PAD_SYMBOL, UNK_SYMBOL, ABSENT_SYMBOL];
    Ok(Vocab {
        words: table(&base, words, min_count.max(1)),
        chars: table(&base, chars, 1),
        pos: table(&tags, pos, 1),
        ner: table(&tags, ner, 1),
        acts: table(&[], acts, 1),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexedUtterance {
    pub words: Vec<usize>,
    pub chars: Vec<Vec<usize>>,
    pub pos: Vec<usize>,
    pub ner: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexedConversation {
    pub id: String,
    pub utterances: Vec<IndexedUtterance>,
    /// Act ids, present when every utterance is labeled.
    pub labels: Option<Vec<usize>>,
}

impl IndexedConversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Validation(format!("conversation `{}` is not labeled", self.id)))
    }
}

impl Vocab {
    fn tag_id(table: &SymbolTable, tag: &Option<String>) -> usize {
        match tag {
            Some(t) => table.id_or_unk(t),
            None => ABSENT,
        }
    }

    /// Maps a conversation onto table ids. With `require_labels`, every
    /// utterance needs a known act.
    pub fn index(&self, conv: &Conversation, require_labels: bool) -> Result<IndexedConversation> {
        let utterances = conv
            .utterances
            .iter()
            .map(|u| IndexedUtterance {
                words: u.tokens.iter().map(|t| self.words.id_or_unk(t.surface())).collect(),
                chars: u
                    .tokens
                    .iter()
                    .map(|t| {
                        t.chars()
                            .iter()
                            .map(|c| self.chars.id_or_unk(&c.to_string()))
                            .collect()
                    })
                    .collect(),
                pos: u.tokens.iter().map(|t| Self::tag_id(&self.pos, &t.pos)).collect(),
                ner: u.tokens.iter().map(|t| Self::tag_id(&self.ner, &t.ner)).collect(),
            })
            .collect();

        let mut labels = Some(Vec::with_capacity(conv.len()));
        for (i, u) in conv.utterances.iter().enumerate() {
            match (&u.act, require_labels) {
                (Some(a), _) => match (self.acts.get(a), labels.as_mut()) {
                    (Some(id), Some(l)) => l.push(id),
                    (None, _) if require_labels => {
                        return Err(Error::Validation(format!(
                            "conversation `{}` utterance {i}: unknown act `{a}`",
                            conv.id
                        )))
                    }
                    _ => labels = None,
                },
                (None, true) => {
                    return Err(Error::Validation(format!(
                        "conversation `{}` utterance {i} has no act label",
                        conv.id
                    )))
                }
                (None, false) => labels = None,
            }
        }
        Ok(IndexedConversation {
            id: conv.id.clone(),
            utterances,
            labels,
        })
    }

    pub fn num_acts(&self) -> usize {
        self.acts.len()
    }

    pub fn act_name(&self, id: usize) -> &str {
        self.acts.symbol(id).unwrap_or(UNK_SYMBOL)
    }
}
