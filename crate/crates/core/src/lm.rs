//! Language-model interface and a deterministic tabular model.
//!
//! [`TabularLM`] maps context suffixes (up to `order` token ids) to logit
//! rows. Lookup takes the longest tabulated suffix of the context and falls
//! back to a dedicated row when none matches, which makes it easy to author
//! scenarios step by step.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::guidance::TokenScores;
use crate::{Error, Result};

pub type TokenId = u32;

/// Literal used for out-of-vocabulary words. Every vocabulary must contain it.
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    eos_id: TokenId,
    unk_id: TokenId,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, eos_id: TokenId) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!(
                    "token {i} ({t:?}) is empty or contains whitespace"
                )));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::invalid(format!("duplicate token {t:?}")));
            }
        }
        if eos_id as usize >= tokens.len() {
            return Err(Error::invalid(format!(
                "eos id {eos_id} is outside a vocabulary of {} tokens",
                tokens.len()
            )));
        }
        let unk_id = *index
            .get(UNK_TOKEN)
            .ok_or_else(|| Error::invalid(format!("vocabulary lacks the {UNK_TOKEN} token")))?;
        Ok(Self {
            tokens,
            eos_id,
            unk_id,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn unk_id(&self) -> TokenId {
        self.unk_id
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Whitespace word-level tokenisation; unknown words map to `<unk>`.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(self.unk_id))
            .collect()
    }

    /// Joins tokens with single spaces, skipping EOS.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| id != self.eos_id)
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.tokens.len()) {
            Some(id) => Err(Error::invalid(format!(
                "token id {id} is outside a vocabulary of {} tokens",
                self.tokens.len()
            ))),
            None => Ok(()),
        }
    }
}

/// Anything that can score next tokens for a batch of contexts.
pub trait LanguageModel: Send + Sync {
    fn vocab(&self) -> &Vocabulary;

    /// One logit vector per context. Implementations must be batch
    /// transparent: scoring a list equals scoring each context alone.
    fn score_batch(&self, contexts: &[Vec<TokenId>]) -> Result<Vec<TokenScores>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularLM {
    vocab: Vocabulary,
    order: usize,
    fallback: Vec<f64>,
    rows: Vec<(Vec<TokenId>, Vec<f64>)>,
    index: HashMap<Vec<TokenId>, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TabularFile {
    vocab: Vec<String>,
    eos: TokenId,
    order: usize,
    fallback: Vec<f64>,
    table: serde_json::Map<String, serde_json::Value>,
}

impl TabularLM {
    pub fn new(vocab: Vocabulary, order: usize, fallback: Vec<f64>) -> Result<Self> {
        if order == 0 {
            return Err(Error::invalid("tabular model order must be at least 1"));
        }
        let model = Self {
            vocab,
            order,
            fallback,
            rows: Vec::new(),
            index: HashMap::new(),
        };
        model.check_row(&model.fallback, "fallback")?;
        Ok(model)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn fallback(&self) -> &[f64] {
        &self.fallback
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[TokenId], &[f64])> {
        self.rows.iter().map(|(k, v)| (k.as_slice(), v.as_slice()))
    }

    /// Adds or replaces the row for `suffix`.
    pub fn insert(&mut self, suffix: Vec<TokenId>, logits: Vec<f64>) -> Result<()> {
        if suffix.len() > self.order {
            return Err(Error::invalid(format!(
                "suffix of length {} exceeds model order {}",
                suffix.len(),
                self.order
            )));
        }
        self.vocab.check_ids(&suffix)?;
        self.check_row(&logits, &format_key(&suffix))?;
        match self.index.get(&suffix) {
            Some(&i) => self.rows[i].1 = logits,
            None => {
                self.index.insert(suffix.clone(), self.rows.len());
                self.rows.push((suffix, logits));
            }
        }
        Ok(())
    }

    fn check_row(&self, row: &[f64], what: &str) -> Result<()> {
        if row.len() != self.vocab.len() {
            return Err(Error::invalid(format!(
                "row {what:?} has {} entries, vocabulary has {}",
                row.len(),
                self.vocab.len()
            )));
        }
        TokenScores::logits(row.to_vec())
            .map(|_| ())
            .map_err(|e| Error::invalid(format!("row {what:?}: {e}")))
    }

    /// Longest tabulated suffix of `context` (at most `order` ids), else the
    /// fallback row.
    pub fn lookup(&self, context: &[TokenId]) -> &[f64] {
        let longest = self.order.min(context.len());
        (0..=longest)
            .rev()
            .find_map(|n| self.index.get(&context[context.len() - n..]))
            .map(|&i| self.rows[i].1.as_slice())
            .unwrap_or(&self.fallback)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: TabularFile = serde_json::from_str(s)?;
        let vocab = Vocabulary::new(file.vocab, file.eos)?;
        let mut model = Self::new(vocab, file.order, file.fallback)?;
        for (key, value) in file.table {
            let suffix = parse_key(&key)?;
            if model.index.contains_key(&suffix) {
                return Err(Error::invalid(format!("duplicate table key {key:?}")));
            }
            let logits: Vec<f64> = serde_json::from_value(value)?;
            model.insert(suffix, logits)?;
        }
        Ok(model)
    }

    /// Canonical pretty-printed JSON; [`TabularLM::from_json_str`] followed by
    /// this reproduces the input byte for byte.
    pub fn to_json_string(&self) -> Result<String> {
        let table = self
            .rows
            .iter()
            .map(|(k, v)| Ok((format_key(k), serde_json::to_value(v)?)))
            .collect::<Result<serde_json::Map<_, _>>>()?;
        let file = TabularFile {
            vocab: self.vocab.tokens.clone(),
            eos: self.vocab.eos_id,
            order: self.order,
            fallback: self.fallback.clone(),
            table,
        };
        let mut s = serde_json::to_string_pretty(&file)?;
        s.push('\n');
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()?).map_err(|e| Error::io(path, e))
    }
}

impl LanguageModel for TabularLM {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn score_batch(&self, contexts: &[Vec<TokenId>]) -> Result<Vec<TokenScores>> {
        contexts
            .iter()
            .map(|ctx| {
                self.vocab.check_ids(ctx)?;
                TokenScores::logits(self.lookup(ctx).to_vec())
            })
            .collect()
    }
}

fn format_key(suffix: &[TokenId]) -> String {
    suffix
        .iter()
        .map(|id| id.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_key(key: &str) -> Result<Vec<TokenId>> {
    if key.is_empty() {
        return Ok(Vec::new());
    }
    key.split(',')
        .map(|p| {
            p.parse::<TokenId>()
                .map_err(|_| Error::invalid(format!("bad table key {key:?}")))
        })
        .collect()
}

/// Wraps a model and counts `score_batch` calls and scored contexts.
#[derive(Debug)]
pub struct CallCounter<M> {
    inner: M,
    calls: AtomicUsize,
    contexts: AtomicUsize,
}

impl<M> CallCounter<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
            contexts: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn contexts(&self) -> usize {
        self.contexts.load(Ordering::SeqCst)
    }

    pub fn into_inner(self) -> M {
        self.inner
    }
}

impl<M: LanguageModel> LanguageModel for CallCounter<M> {
    fn vocab(&self) -> &Vocabulary {
        self.inner.vocab()
    }

    fn score_batch(&self, contexts: &[Vec<TokenId>]) -> Result<Vec<TokenScores>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.contexts.fetch_add(contexts.len(), Ordering::SeqCst);
        self.inner.score_batch(contexts)
    }
}
