//! Fixed symbolic vocabulary for the synthetic arithmetic tasks.
//!
//! Ids are assigned by a static table, so the control-token ids below are
//! compile-time constants shared by every component.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const EOS: TokenId = 1;
pub const IM_START: TokenId = 2;
pub const IM_END: TokenId = 3;
pub const USER: TokenId = 4;
pub const ASSISTANT: TokenId = 5;
pub const THINK_OPEN: TokenId = 6;
pub const THINK_CLOSE: TokenId = 7;
pub const ANSWER_TAG: TokenId = 8;
pub const NEWLINE: TokenId = 9;

/// Control tokens with reserved surface forms; `encode` never emits these.
const CONTROL: [&str; 9] = [
    "<pad>",
    "<|endoftext|>",
    "<|im_start|>",
    "<|im_end|>",
    "user",
    "assistant",
    "<think>",
    "</think>",
    "<answer>",
];

/// Plain symbols, in id order after the control block.
const SYMBOLS: [&str; 18] = [
    "\n", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "-", "×", "=", "(", ")", " ",
];

const WORDS: [&str; 1] = ["mod"];

/// Reasoning-marker words, each a single token.
pub const MARKER_WORDS: [&str; 10] = [
    "check",
    "double-check",
    "wait",
    "hmm",
    "okay",
    "maybe",
    "but",
    "however",
    "alternatively",
    "alternative",
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenizeError {
    #[error("unrepresentable character {ch:?} at position {position}")]
    Unrepresentable { ch: char, position: usize },
    #[error("token id {0} is outside the vocabulary")]
    UnknownId(TokenId),
    #[error("vocabulary file line {line}: {message}")]
    BadVocabFile { line: usize, message: String },
}

/// Named ids of the template and marker tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecialTokens {
    pub pad: TokenId,
    pub eos: TokenId,
    pub im_start: TokenId,
    pub im_end: TokenId,
    pub user: TokenId,
    pub assistant: TokenId,
    pub think_open: TokenId,
    pub think_close: TokenId,
    pub answer_tag: TokenId,
    pub newline: TokenId,
    pub markers: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
    special: SpecialTokens,
    /// Non-control tokens sorted longest first, for greedy matching.
    plain_by_length: Vec<(String, TokenId)>,
}

/// The task vocabulary. Deterministic; every call returns the same table.
pub fn build_vocab() -> Vocab {
    let tokens: Vec<String> = CONTROL
        .iter()
        .chain(&SYMBOLS)
        .chain(&WORDS)
        .chain(&MARKER_WORDS)
        .map(|s| s.to_string())
        .collect();
    Vocab::from_tokens(tokens).expect("builtin vocabulary is well formed")
}

impl Vocab {
    fn from_tokens(id_to_token: Vec<String>) -> Result<Self, TokenizeError> {
        let mut token_to_id = HashMap::new();
        for (i, tok) in id_to_token.iter().enumerate() {
            if token_to_id.insert(tok.clone(), i as TokenId).is_some() {
                return Err(TokenizeError::BadVocabFile {
                    line: i + 1,
                    message: format!("duplicate token {tok:?}"),
                });
            }
        }
        let id = |s: &str| token_to_id.get(s).copied();
        let special = SpecialTokens {
            pad: PAD,
            eos: EOS,
            im_start: IM_START,
            im_end: IM_END,
            user: USER,
            assistant: ASSISTANT,
            think_open: THINK_OPEN,
            think_close: THINK_CLOSE,
            answer_tag: ANSWER_TAG,
            newline: NEWLINE,
            markers: MARKER_WORDS.iter().filter_map(|w| id(w)).collect(),
        };
        for (i, name) in CONTROL.iter().chain(&SYMBOLS[..1]).enumerate() {
            if id(name) != Some(i as TokenId) {
                return Err(TokenizeError::BadVocabFile {
                    line: i + 1,
                    message: format!("expected {name:?} at id {i}"),
                });
            }
        }
        let mut plain_by_length: Vec<(String, TokenId)> = id_to_token
            .iter()
            .enumerate()
            .skip(CONTROL.len())
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        plain_by_length.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));
        Ok(Self {
            id_to_token,
            token_to_id,
            special,
            plain_by_length,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn special(&self) -> &SpecialTokens {
        &self.special
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn is_control(&self, id: TokenId) -> bool {
        (id as usize) < CONTROL.len()
    }

    /// Greedy longest-match tokenization over the plain (non-control) tokens.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, TokenizeError> {
        let mut ids = Vec::new();
        let mut rest = text;
        let mut position = 0;
        while !rest.is_empty() {
            let hit = self
                .plain_by_length
                .iter()
                .find(|(tok, _)| rest.starts_with(tok.as_str()));
            match hit {
                Some((tok, id)) => {
                    ids.push(*id);
                    position += tok.chars().count();
                    rest = &rest[tok.len()..];
                }
                None => {
                    let ch = rest.chars().next().expect("non-empty");
                    return Err(TokenizeError::Unrepresentable { ch, position });
                }
            }
        }
        Ok(ids)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizeError> {
        let mut out = String::new();
        for &id in ids {
            out.push_str(self.token(id).ok_or(TokenizeError::UnknownId(id))?);
        }
        Ok(out)
    }

    /// One token per line, line number (from 0) = id. Newline and backslash
    /// are escaped.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for tok in &self.id_to_token {
            let escaped = tok.replace('\\', "\\\\").replace('\n', "\\n");
            writeln!(out, "{escaped}").expect("writing to a String");
        }
        out
    }

    pub fn from_file_string(s: &str) -> Result<Self, TokenizeError> {
        let mut tokens = Vec::new();
        for (i, line) in s.lines().enumerate() {
            let mut tok = String::new();
            let mut chars = line.chars();
            while let Some(c) = chars.next() {
                if c != '\\' {
                    tok.push(c);
                    continue;
                }
                match chars.next() {
                    Some('n') => tok.push('\n'),
                    Some('\\') => tok.push('\\'),
                    other => {
                        return Err(TokenizeError::BadVocabFile {
                            line: i + 1,
                            message: format!("bad escape \\{other:?}"),
                        })
                    }
                }
            }
            tokens.push(tok);
        }
        Self::from_tokens(tokens)
    }
}
