//! Toy language models over the closed vocabulary.
//!
//! Two backends share one interface: a tabular model whose parameters are
//! logit rows over the objects of each (subject, relation) edge, and a small
//! decoder-only transformer. Both compute next-token log-probabilities on an
//! [`autodiff::Graph`], so every loss in the crate is differentiable against
//! either one.

pub mod autodiff;
mod checkpoint;
mod gradcheck;
mod infer;
mod params;
mod tabular;
pub mod tensor;
mod train;
mod transformer;

pub use autodiff::{Graph, Var};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, GradCheckReport};
pub use infer::{
    choice_distribution, choice_distributions, eval_logprobs, greedy_decode, greedy_decode_batch,
    next_token_distribution, yes_no_probabilities, ChoiceQuery,
};
pub use params::{Adam, AdamConfig, ParamStore};
pub use tabular::TabularModel;
pub use tensor::Tensor;
pub(crate) use train::token_nll;
pub use train::{cross_entropy, train_base, Example, TrainConfig, TrainLog};
pub use transformer::{TransformerConfig, TransformerModel};

use crate::vocab::{TokenId, Vocab, VocabError};
use crate::worldgen::WorldError;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("sequence of length {len} exceeds context window {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("duplicate choice letter id {0}")]
    DuplicateChoice(TokenId),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Tabular,
    Transformer,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Tabular => "tabular",
            Backend::Transformer => "transformer",
        })
    }
}

impl FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tabular" => Ok(Backend::Tabular),
            "transformer" => Ok(Backend::Transformer),
            _ => Err(format!("unknown backend {s:?}")),
        }
    }
}

/// A next-token predictor with trainable parameters.
pub trait LanguageModel {
    fn backend(&self) -> Backend;
    fn vocab(&self) -> &Vocab;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    /// Log-probabilities `[rows.len(), vocab]` of the token following
    /// `seqs[s][..=p]` for each `(s, p)` in `rows`. `params` are the graph
    /// leaves returned by [`ParamStore::bind`].
    fn forward(
        &self,
        g: &mut Graph,
        params: &[Var],
        seqs: &[Vec<TokenId>],
        rows: &[(usize, usize)],
    ) -> Result<Var, LmError>;
}

/// Either backend, for code that picks one at run time.
#[derive(Debug, Clone)]
pub enum Model {
    Tabular(TabularModel),
    Transformer(TransformerModel),
}

impl LanguageModel for Model {
    fn backend(&self) -> Backend {
        match self {
            Model::Tabular(m) => m.backend(),
            Model::Transformer(m) => m.backend(),
        }
    }

    fn vocab(&self) -> &Vocab {
        match self {
            Model::Tabular(m) => m.vocab(),
            Model::Transformer(m) => m.vocab(),
        }
    }

    fn params(&self) -> &ParamStore {
        match self {
            Model::Tabular(m) => m.params(),
            Model::Transformer(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Tabular(m) => m.params_mut(),
            Model::Transformer(m) => m.params_mut(),
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        params: &[Var],
        seqs: &[Vec<TokenId>],
        rows: &[(usize, usize)],
    ) -> Result<Var, LmError> {
        match self {
            Model::Tabular(m) => m.forward(g, params, seqs, rows),
            Model::Transformer(m) => m.forward(g, params, seqs, rows),
        }
    }
}
