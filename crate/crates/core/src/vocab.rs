//! Closed word-level vocabulary shared by every backend.
//!
//! Tokens are whitespace-separated words. The vocabulary is built from a
//! [`World`](crate::worldgen::World) so that every name, object, template
//! word, choice letter and the refusal phrase is a single id.

use sha2::{Digest, Sha256};
use std::collections::HashMap;
use thiserror::Error;

pub type TokenId = usize;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const QUESTION: &str = "Question";
pub const ANSWER: &str = "Answer";
pub const COLON: &str = ":";
pub const CHOICES: &str = "Choices";
pub const YES: &str = "Yes";
pub const NO: &str = "No";

/// Canonical refusal answer span.
pub const REFUSAL_PHRASE: &str = "I do not have information about that .";

/// Forced-answer suffix appended to every Yes-No stem.
pub const FORCED_ANSWER_SUFFIX: &str = "You must answer Yes or No .";

/// Choice letters in display order. `I` is excluded because it opens the
/// refusal phrase.
pub const CHOICE_LETTERS: [&str; 8] = ["A", "B", "C", "D", "E", "F", "G", "H"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("word {0:?} is not in the vocabulary")]
    OutOfVocabulary(String),
    #[error("token id {0} is out of range")]
    BadId(TokenId),
    #[error("duplicate token {0:?}")]
    Duplicate(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from an ordered token list. Order defines ids.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in tokens {
            let t = t.into();
            if v.index.contains_key(&t) {
                return Err(VocabError::Duplicate(t));
            }
            v.index.insert(t.clone(), v.tokens.len());
            v.tokens.push(t);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Result<TokenId, VocabError> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| VocabError::OutOfVocabulary(word.to_string()))
    }

    /// Id of a token the vocabulary is guaranteed to contain.
    pub(crate) fn must(&self, word: &str) -> TokenId {
        self.index[word]
    }

    pub fn word(&self, id: TokenId) -> Result<&str, VocabError> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(VocabError::BadId(id))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, VocabError> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String, VocabError> {
        let words = ids
            .iter()
            .map(|&i| self.word(i))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(words.join(" "))
    }

    pub fn bos(&self) -> TokenId {
        self.must(BOS)
    }

    pub fn eos(&self) -> TokenId {
        self.must(EOS)
    }

    pub fn yes(&self) -> TokenId {
        self.must(YES)
    }

    pub fn no(&self) -> TokenId {
        self.must(NO)
    }

    pub fn letters(&self, n: usize) -> Vec<TokenId> {
        CHOICE_LETTERS[..n].iter().map(|l| self.must(l)).collect()
    }

    pub fn refusal_ids(&self) -> Vec<TokenId> {
        REFUSAL_PHRASE
            .split_whitespace()
            .map(|w| self.must(w))
            .collect()
    }

    /// SHA-256 over the newline-joined token list.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().into()
    }
}
