//! Transcript data model, ingestion, vocabularies, pretrained vectors and
//! the synthetic corpus generator.

mod embeddings;
mod jsonl;
pub mod synthetic;
mod vocab;

pub use embeddings::load_pretrained_embeddings;
pub use jsonl::{parse_jsonl, parse_jsonl_str, write_jsonl, write_jsonl_string};
pub use synthetic::{generate_synthetic, GeneratorModel, SyntheticSpec};
pub use vocab::{
    build_vocab, IndexedConversation, IndexedUtterance, SymbolTable, Vocab, ABSENT, PAD, UNK,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    surface: String,
    chars: Vec<char>,
    pub pos: Option<String>,
    pub ner: Option<String>,
}

impl Token {
    pub fn new(surface: &str) -> Result<Self> {
        Token::tagged(surface, None, None)
    }

    pub fn tagged(surface: &str, pos: Option<String>, ner: Option<String>) -> Result<Self> {
        if surface.is_empty() {
            return Err(Error::Validation("empty token".into()));
        }
        Ok(Token {
            surface: surface.to_string(),
            chars: surface.chars().collect(),
            pos,
            ner,
        })
    }

    pub fn surface(&self) -> &str {
        &self.surface
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub tokens: Vec<Token>,
    pub speaker: String,
    pub act: Option<String>,
}

impl Utterance {
    pub fn new(speaker: &str, tokens: Vec<Token>, act: Option<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Validation(format!(
                "utterance by `{speaker}` has no tokens"
            )));
        }
        for tags in [
            tokens.iter().map(|t| t.pos.is_some()).collect::<Vec<_>>(),
            tokens.iter().map(|t| t.ner.is_some()).collect(),
        ] {
            if tags.iter().any(|&b| b) && !tags.iter().all(|&b| b) {
                return Err(Error::Validation(
                    "tags must be present on every token of an utterance or on none".into(),
                ));
            }
        }
        Ok(Utterance {
            tokens,
            speaker: speaker.to_string(),
            act,
        })
    }

    /// Builds an utterance from whitespace-separated words.
    pub fn from_text(speaker: &str, text: &str, act: Option<&str>) -> Result<Self> {
        let tokens = text
            .split_whitespace()
            .map(Token::new)
            .collect::<Result<Vec<_>>>()?;
        Utterance::new(speaker, tokens, act.map(str::to_string))
    }

    pub fn text(&self) -> String {
        self.tokens
            .iter()
            .map(Token::surface)
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn new(id: &str, utterances: Vec<Utterance>) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::Validation(format!("conversation `{id}` has no utterances")));
        }
        Ok(Conversation {
            id: id.to_string(),
            utterances,
        })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.utterances.iter().all(|u| u.act.is_some())
    }

    pub fn acts(&self) -> Vec<Option<&str>> {
        self.utterances.iter().map(|u| u.act.as_deref()).collect()
    }
}
