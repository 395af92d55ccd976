//! Sample-efficient idiomaticity detection.
//!
//! The crate is organised around the pipeline stages:
//!
//! - [`corpus`]: dataset TSV ingestion, balanced labeled sampling, unlabeled pools
//!   and context harvesting from raw text.
//! - [`pvp`]: cloze patterns, verbalizers and rendering.
//! - [`adapter`]: the masked-language-model contract plus the built-in `tiny` and
//!   `oracle` backends.
//! - [`pet`] and [`ipet`]: ensemble training, soft labelling, distillation and
//!   generational self-training.
//! - [`bertram`]: form + context embedding inference for multiword expressions
//!   and vocabulary injection.
//! - [`harness`]: metrics, reports, experiment configs and orchestration.

pub mod adapter;
pub mod autograd;
pub mod bertram;
pub mod corpus;
mod error;
pub mod harness;
pub mod ipet;
pub mod pet;
pub mod pvp;
pub mod rng;
pub mod synthetic;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};
use std::fmt;

/// The two task classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Idiomatic,
    Literal,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Idiomatic, Label::Literal];

    pub fn other(self) -> Label {
        match self {
            Label::Idiomatic => Label::Literal,
            Label::Literal => Label::Idiomatic,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Idiomatic => f.write_str("idiomatic"),
            Label::Literal => f.write_str("literal"),
        }
    }
}
