use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Conversation, Token, Utterance};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawUtterance {
    speaker: String,
    tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pos: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ner: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    act: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConversation {
    id: String,
    utterances: Vec<RawUtterance>,
}

fn tag_column(tags: &Option<Vec<String>>, n: usize, what: &str) -> Result<Vec<Option<String>>> {
    match tags {
        None => Ok(vec![None; n]),
        Some(t) if t.len() == n => Ok(t.iter().cloned().map(Some).collect()),
        Some(t) => Err(Error::Validation(format!(
            "{what} has {} entries for {n} tokens",
            t.len()
        ))),
    }
}

fn from_raw(raw: RawConversation) -> Result<Conversation> {
    let mut utterances = Vec::with_capacity(raw.utterances.len());
    for (i, u) in raw.utterances.into_iter().enumerate() {
        if u.tokens.is_empty() {
            return Err(Error::Validation(format!(
                "conversation `{}` utterance {i} has no tokens",
                raw.id
            )));
        }
        let pos = tag_column(&u.pos, u.tokens.len(), "pos")?;
        let ner = tag_column(&u.ner, u.tokens.len(), "ner")?;
        let tokens = u
            .tokens
            .iter()
            .zip(pos)
            .zip(ner)
            .map(|((w, p), n)| Token::tagged(w, p, n))
            .collect::<Result<Vec<_>>>()?;
        utterances.push(Utterance::new(&u.speaker, tokens, u.act)?);
    }
    Conversation::new(&raw.id, utterances)
}

fn to_raw(conv: &Conversation) -> RawConversation {
    let column = |f: fn(&Token) -> &Option<String>, u: &Utterance| -> Option<Vec<String>> {
        u.tokens.iter().map(|t| f(t).clone()).collect()
    };
    RawConversation {
        id: conv.id.clone(),
        utterances: conv
            .utterances
            .iter()
            .map(|u| RawUtterance {
                speaker: u.speaker.clone(),
                tokens: u.tokens.iter().map(|t| t.surface().to_string()).collect(),
                pos: column(|t| &t.pos, u),
                ner: column(|t| &t.ner, u),
                act: u.act.clone(),
            })
            .collect(),
    }
}

/// Parses one conversation per non-blank line. `source` names the input in
/// error messages.
pub fn parse_jsonl_str(text: &str, source: &str) -> Result<Vec<Conversation>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            message,
        };
        let raw: RawConversation =
            serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let conv = from_raw(raw).map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("{source}: line {}: {m}", i + 1)),
            other => other,
        })?;
        out.push(conv);
    }
    Ok(out)
}

pub fn parse_jsonl(path: &Path) -> Result<Vec<Conversation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl_str(&text, &path.display().to_string())
}

pub fn write_jsonl_string(convs: &[Conversation]) -> String {
    let mut out = String::new();
    for c in convs {
        out.push_str(&serde_json::to_string(&to_raw(c)).expect("plain data serialises"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: &Path, convs: &[Conversation]) -> Result<()> {
    fs::write(path, write_jsonl_string(convs)).map_err(|e| Error::io(path, e))
}
