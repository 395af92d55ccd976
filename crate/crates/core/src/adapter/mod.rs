//! Masked-language-model adapter contract.
//!
//! Every classification decision flows through [`class_probs`]: render the
//! example with a PVP, read the mask-position logits of the two verbalizer
//! tokens, and take a two-way softmax.
//!
//! Built-in backends:
//! - [`TinyMlm`]: a small pre-LN transformer encoder trained from scratch on CPU.
//! - [`OracleMlm`]: emits ±10 logits from hidden gold labels; used to check
//!   pipeline wiring.
//!
//! Pretrained encoders attach by implementing [`MaskedLanguageModel`] with
//! [`BackendKind::External`].

mod oracle;
mod tiny;
mod tokenizer;

use std::fmt;
use std::io;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Example;
use crate::pvp::{render, MaskedText, PatternVerbalizerPair, PvpError};
use crate::Label;

pub use oracle::OracleMlm;
pub use tiny::{CheckpointMeta, TinyConfig, TinyMlm, CHECKPOINT_FORMAT_VERSION};
pub use tokenizer::{
    normalize_form, pre_tokenize, Encoding, Tokenizer, Vocabulary, CLS_TOKEN, MASK_TOKEN,
    UNK_TOKEN,
};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("verbalizer word {word:?} {reason}")]
    Verbalizer { word: String, reason: String },
    #[error(transparent)]
    Render(#[from] PvpError),
    #[error("{backend} backend cannot {action}")]
    Capability {
        backend: BackendKind,
        action: String,
    },
    #[error("training set is empty")]
    EmptyTrainset,
    #[error("training example {0} has no label")]
    Unlabeled(String),
    #[error("rendered text does not contain exactly one mask token: {0:?}")]
    MaskNotFound(String),
    #[error("oracle has no gold label for example {0}")]
    MissingGold(String),
    #[error("token id {0} has no output row")]
    NoOutputRow(usize),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackendKind {
    #[serde(rename = "external")]
    External,
    #[serde(rename = "tiny")]
    Tiny,
    #[serde(rename = "oracle")]
    Oracle,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::External => "external",
            BackendKind::Tiny => "tiny",
            BackendKind::Oracle => "oracle",
        })
    }
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "external" | "external-pretrained" => Ok(BackendKind::External),
            "tiny" | "tiny-trainable" => Ok(BackendKind::Tiny),
            "oracle" => Ok(BackendKind::Oracle),
            _ => Err(format!("unknown backend {s:?} (expected external, tiny or oracle)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelTokenIds {
    pub literal_id: usize,
    pub idiom_id: usize,
}

/// Probability over {idiomatic, literal}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub p_idiomatic: f64,
    pub p_literal: f64,
}

impl ClassDistribution {
    pub fn one_hot(label: Label) -> Self {
        match label {
            Label::Idiomatic => ClassDistribution {
                p_idiomatic: 1.0,
                p_literal: 0.0,
            },
            Label::Literal => ClassDistribution {
                p_idiomatic: 0.0,
                p_literal: 1.0,
            },
        }
    }

    pub fn uniform() -> Self {
        ClassDistribution {
            p_idiomatic: 0.5,
            p_literal: 0.5,
        }
    }

    /// Two-way softmax over the literal and idiom token logits.
    pub fn from_logits(literal_logit: f64, idiom_logit: f64) -> Self {
        let max = literal_logit.max(idiom_logit);
        let el = (literal_logit - max).exp();
        let ei = (idiom_logit - max).exp();
        let z = el + ei;
        ClassDistribution {
            p_idiomatic: ei / z,
            p_literal: el / z,
        }
    }

    pub fn prob(&self, label: Label) -> f64 {
        match label {
            Label::Idiomatic => self.p_idiomatic,
            Label::Literal => self.p_literal,
        }
    }

    /// Argmax; an exact tie goes to literal.
    pub fn argmax(&self) -> Label {
        if self.p_idiomatic > self.p_literal {
            Label::Idiomatic
        } else {
            Label::Literal
        }
    }

    pub fn confidence(&self) -> f64 {
        self.p_idiomatic.max(self.p_literal)
    }

    pub fn is_valid(&self) -> bool {
        let ok = |p: f64| p.is_finite() && (0.0..=1.0).contains(&p);
        ok(self.p_idiomatic) && ok(self.p_literal)
            && (self.p_idiomatic + self.p_literal - 1.0).abs() <= 1e-9
    }

    /// Sharpens (`t < 1`) or flattens (`t > 1`) the distribution.
    pub fn with_temperature(&self, temperature: f64) -> Self {
        if temperature == 1.0 {
            return *self;
        }
        let a = self.p_idiomatic.powf(1.0 / temperature);
        let b = self.p_literal.powf(1.0 / temperature);
        ClassDistribution {
            p_idiomatic: a / (a + b),
            p_literal: b / (a + b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            steps: 150,
            batch_size: 16,
            learning_rate: 3e-3,
            weight_decay: 0.0,
            max_grad_norm: 1.0,
        }
    }
}

/// One training item: an example and the distribution to fit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTarget {
    pub example: Example,
    pub target: ClassDistribution,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Mini-batch loss at every step.
    pub step_losses: Vec<f64>,
    /// Mean loss over the full training set before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

pub trait MaskedLanguageModel: Send + Sync {
    fn backend_kind(&self) -> BackendKind;

    fn tokenizer(&self) -> &Tokenizer;

    fn mask_marker(&self) -> &str {
        self.tokenizer().mask_token()
    }

    fn embedding_dim(&self) -> usize;

    fn state_version(&self) -> u64;

    fn is_trainable(&self) -> bool {
        false
    }

    /// Logits at the mask position over the output vocabulary.
    fn mask_logits(&self, text: &MaskedText, example: &Example) -> Result<Vec<f64>, AdapterError>;

    /// `[literal, idiom]` logits at the mask position.
    fn label_logits(
        &self,
        text: &MaskedText,
        example: &Example,
        ids: LabelTokenIds,
    ) -> Result<[f64; 2], AdapterError> {
        let logits = self.mask_logits(text, example)?;
        let get = |id: usize| logits.get(id).copied().ok_or(AdapterError::NoOutputRow(id));
        Ok([get(ids.literal_id)?, get(ids.idiom_id)?])
    }

    fn fine_tune(
        &mut self,
        _pvp: &PatternVerbalizerPair,
        _targets: &[TrainTarget],
        _hyper: &TrainHyper,
        _seed: u64,
    ) -> Result<TrainReport, AdapterError> {
        Err(AdapterError::Capability {
            backend: self.backend_kind(),
            action: "be fine-tuned".into(),
        })
    }

    /// Stable digest of the model state; equal fingerprints mean equal parameters.
    fn fingerprint(&self) -> String;

    fn box_clone(&self) -> AdapterHandle;

    fn as_tiny(&self) -> Option<&TinyMlm> {
        None
    }

    fn as_tiny_mut(&mut self) -> Option<&mut TinyMlm> {
        None
    }
}

pub type AdapterHandle = Box<dyn MaskedLanguageModel>;

impl Clone for AdapterHandle {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

impl fmt::Debug for dyn MaskedLanguageModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MaskedLanguageModel")
            .field("backend", &self.backend_kind())
            .field("vocab", &self.tokenizer().vocab().len())
            .field("dim", &self.embedding_dim())
            .field("state_version", &self.state_version())
            .finish()
    }
}

/// Maps each verbalizer word to its single vocabulary id.
pub fn verbalizer_token_ids(
    adapter: &dyn MaskedLanguageModel,
    pvp: &PatternVerbalizerPair,
) -> Result<LabelTokenIds, AdapterError> {
    let tokenizer = adapter.tokenizer();
    let lookup = |word: &str| {
        let pieces = tokenizer.encode_word(word);
        match pieces.as_slice() {
            [id] if *id == tokenizer.unk_id() => Err(AdapterError::Verbalizer {
                word: word.to_string(),
                reason: "is not in the vocabulary".into(),
            }),
            [id] => Ok(*id),
            _ => Err(AdapterError::Verbalizer {
                word: word.to_string(),
                reason: format!("splits into {} tokens; label tokens must be single tokens", pieces.len()),
            }),
        }
    };
    Ok(LabelTokenIds {
        literal_id: lookup(pvp.verbalizer.literal_token())?,
        idiom_id: lookup(pvp.verbalizer.idiom_token())?,
    })
}

/// Renders `example` and fills in the mask position for this adapter's tokenizer.
pub fn masked_input(
    adapter: &dyn MaskedLanguageModel,
    pvp: &PatternVerbalizerPair,
    example: &Example,
) -> Result<MaskedText, AdapterError> {
    let mut masked = render(pvp, example, adapter.mask_marker())?;
    let ids = adapter.tokenizer().encode(&masked.text).ids;
    masked.mask_index = Some(
        adapter
            .tokenizer()
            .mask_position(&ids)
            .ok_or_else(|| AdapterError::MaskNotFound(masked.text.clone()))?,
    );
    Ok(masked)
}

pub fn class_probs(
    adapter: &dyn MaskedLanguageModel,
    pvp: &PatternVerbalizerPair,
    example: &Example,
) -> Result<ClassDistribution, AdapterError> {
    let ids = verbalizer_token_ids(adapter, pvp)?;
    let masked = masked_input(adapter, pvp, example)?;
    let [lit, idiom] = adapter.label_logits(&masked, example, ids)?;
    Ok(ClassDistribution::from_logits(lit, idiom))
}

/// Fine-tunes on gold labels (one-hot targets).
pub fn fine_tune(
    adapter: &mut dyn MaskedLanguageModel,
    pvp: &PatternVerbalizerPair,
    trainset: &[Example],
    hyper: &TrainHyper,
    seed: u64,
) -> Result<TrainReport, AdapterError> {
    let targets = trainset
        .iter()
        .map(|ex| {
            let label = ex.label.ok_or_else(|| AdapterError::Unlabeled(ex.id.clone()))?;
            Ok(TrainTarget {
                example: ex.clone(),
                target: ClassDistribution::one_hot(label),
            })
        })
        .collect::<Result<Vec<_>, AdapterError>>()?;
    fine_tune_soft(adapter, pvp, &targets, hyper, seed)
}

/// Fine-tunes against arbitrary target distributions.
pub fn fine_tune_soft(
    adapter: &mut dyn MaskedLanguageModel,
    pvp: &PatternVerbalizerPair,
    targets: &[TrainTarget],
    hyper: &TrainHyper,
    seed: u64,
) -> Result<TrainReport, AdapterError> {
    if !adapter.is_trainable() {
        return Err(AdapterError::Capability {
            backend: adapter.backend_kind(),
            action: "be fine-tuned".into(),
        });
    }
    if targets.is_empty() {
        return Err(AdapterError::EmptyTrainset);
    }
    adapter.fine_tune(pvp, targets, hyper, seed)
}
