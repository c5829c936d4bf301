//! Think / no-think chat templates and their loss masks.
//!
//! Training layouts:
//!
//! ```text
//! think:    <|im_start|> user x <|im_end|> <|im_start|> assistant <think> \n t \n </think> \n <answer> a <|im_end|> <eos>
//! no-think: <|im_start|> user x <|im_end|> <|im_start|> assistant <think> \n \n </think> \n <answer> a <|im_end|> <eos>
//! ```
//!
//! In think renders the loss covers `<think>` through `<eos>`. In no-think
//! renders the empty think block is context and the loss starts at
//! `<answer>`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taskgen::Triplet;
use crate::tokenizer::{
    TokenId, TokenizeError, Vocab, ANSWER_TAG, ASSISTANT, EOS, IM_END, IM_START, NEWLINE,
    THINK_CLOSE, THINK_OPEN, USER,
};

/// The empty reasoning block. Shared by no-think training renders and
/// no-think inference prompts.
pub static EMPTY_THINK_PREFILL: [TokenId; 5] = [THINK_OPEN, NEWLINE, NEWLINE, THINK_CLOSE, NEWLINE];

pub fn empty_think_prefill() -> &'static [TokenId; 5] {
    &EMPTY_THINK_PREFILL
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RenderMode {
    TrainThink,
    TrainNothink,
    InferThink,
    InferNothink,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedSequence {
    pub uid: String,
    pub ids: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
    pub mode: RenderMode,
}

impl RenderedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn supervised(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.ids
            .iter()
            .zip(&self.loss_mask)
            .filter_map(|(&id, &m)| m.then_some(id))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("triplet {uid} has no reasoning trace")]
    MissingTrace { uid: String },
    #[error("render of {uid} needs {len} tokens, context holds {context_len}")]
    ContextOverflow {
        uid: String,
        len: usize,
        context_len: usize,
    },
    #[error("triplet {uid}: {source}")]
    Tokenize {
        uid: String,
        #[source]
        source: TokenizeError,
    },
}

#[derive(Debug, Clone)]
pub struct Templater<'v> {
    vocab: &'v Vocab,
    context_len: usize,
}

impl<'v> Templater<'v> {
    pub fn new(vocab: &'v Vocab, context_len: usize) -> Self {
        Self { vocab, context_len }
    }

    pub fn vocab(&self) -> &'v Vocab {
        self.vocab
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    fn encode(&self, uid: &str, text: &str) -> Result<Vec<TokenId>, TemplateError> {
        self.vocab.encode(text).map_err(|source| TemplateError::Tokenize {
            uid: uid.to_string(),
            source,
        })
    }

    fn fit(&self, uid: &str, len: usize) -> Result<(), TemplateError> {
        if len > self.context_len {
            return Err(TemplateError::ContextOverflow {
                uid: uid.to_string(),
                len,
                context_len: self.context_len,
            });
        }
        Ok(())
    }

    fn prompt(&self, uid: &str, x: &str) -> Result<Vec<TokenId>, TemplateError> {
        let mut ids = vec![IM_START, USER];
        ids.extend(self.encode(uid, x)?);
        ids.extend([IM_END, IM_START, ASSISTANT]);
        Ok(ids)
    }

    pub fn render_train_think(&self, tr: &Triplet) -> Result<RenderedSequence, TemplateError> {
        let trace = tr.t.as_deref().ok_or_else(|| TemplateError::MissingTrace {
            uid: tr.uid.clone(),
        })?;
        let mut ids = self.prompt(&tr.uid, &tr.x)?;
        let supervised_from = ids.len();
        ids.extend([THINK_OPEN, NEWLINE]);
        ids.extend(self.encode(&tr.uid, trace)?);
        ids.extend([NEWLINE, THINK_CLOSE, NEWLINE, ANSWER_TAG]);
        ids.extend(self.encode(&tr.uid, &tr.a)?);
        ids.extend([IM_END, EOS]);
        self.fit(&tr.uid, ids.len())?;
        let loss_mask = (0..ids.len()).map(|i| i >= supervised_from).collect();
        Ok(RenderedSequence {
            uid: tr.uid.clone(),
            ids,
            loss_mask,
            mode: RenderMode::TrainThink,
        })
    }

    /// Ignores `tr.t`.
    pub fn render_train_nothink(&self, tr: &Triplet) -> Result<RenderedSequence, TemplateError> {
        let mut ids = self.prompt(&tr.uid, &tr.x)?;
        ids.extend_from_slice(empty_think_prefill());
        let supervised_from = ids.len();
        ids.push(ANSWER_TAG);
        ids.extend(self.encode(&tr.uid, &tr.a)?);
        ids.extend([IM_END, EOS]);
        self.fit(&tr.uid, ids.len())?;
        let loss_mask = (0..ids.len()).map(|i| i >= supervised_from).collect();
        Ok(RenderedSequence {
            uid: tr.uid.clone(),
            ids,
            loss_mask,
            mode: RenderMode::TrainNothink,
        })
    }

    /// Prompt ending in the empty think block; generation starts at `<answer>`.
    pub fn render_infer_nothink(&self, uid: &str, x: &str) -> Result<Vec<TokenId>, TemplateError> {
        let mut ids = self.prompt(uid, x)?;
        ids.extend_from_slice(empty_think_prefill());
        // at least one generated token must fit
        self.fit(uid, ids.len() + 1)?;
        Ok(ids)
    }

    /// Prompt ending in `<think> \n`; the model writes the trace.
    pub fn render_infer_think(&self, uid: &str, x: &str) -> Result<Vec<TokenId>, TemplateError> {
        let mut ids = self.prompt(uid, x)?;
        ids.extend([THINK_OPEN, NEWLINE]);
        self.fit(uid, ids.len() + 1)?;
        Ok(ids)
    }

    /// Index range of the user text `x` inside any render.
    pub fn user_span(&self, ids: &[TokenId]) -> std::ops::Range<usize> {
        let end = ids.iter().position(|&t| t == IM_END).unwrap_or(ids.len());
        2.min(end)..end
    }
}

/// Drops the reasoning trace, keeping problem and answer.
pub fn strip_reasoning(tr: &Triplet) -> Triplet {
    Triplet {
        t: None,
        ..tr.clone()
    }
}
