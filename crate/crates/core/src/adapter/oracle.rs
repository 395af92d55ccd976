use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::{
    AdapterError, AdapterHandle, BackendKind, LabelTokenIds, MaskedLanguageModel, Tokenizer,
};
use crate::corpus::Example;
use crate::pvp::MaskedText;
use crate::Label;

const ORACLE_LOGIT: f64 = 10.0;

/// Reads the gold label and emits `+10` for the gold token and `-10` for
/// everything else. Hidden gold labels (keyed by example id) take precedence
/// over the example's own label so unlabeled pools can be scored.
#[derive(Debug, Clone)]
pub struct OracleMlm {
    tokenizer: Tokenizer,
    dim: usize,
    gold: HashMap<String, Label>,
}

impl OracleMlm {
    pub fn new(tokenizer: Tokenizer, embedding_dim: usize, gold: HashMap<String, Label>) -> Self {
        OracleMlm {
            tokenizer,
            dim: embedding_dim,
            gold,
        }
    }

    pub fn gold_for(&self, example: &Example) -> Result<Label, AdapterError> {
        self.gold
            .get(&example.id)
            .copied()
            .or(example.label)
            .ok_or_else(|| AdapterError::MissingGold(example.id.clone()))
    }
}

impl MaskedLanguageModel for OracleMlm {
    fn backend_kind(&self) -> BackendKind {
        BackendKind::Oracle
    }

    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn embedding_dim(&self) -> usize {
        self.dim
    }

    fn state_version(&self) -> u64 {
        0
    }

    /// Full-vocabulary logits need to know which verbalizer is in play, which
    /// the oracle does not; only [`MaskedLanguageModel::label_logits`] is served.
    fn mask_logits(&self, _text: &MaskedText, _example: &Example) -> Result<Vec<f64>, AdapterError> {
        Err(AdapterError::Capability {
            backend: BackendKind::Oracle,
            action: "emit full-vocabulary logits".into(),
        })
    }

    fn label_logits(
        &self,
        _text: &MaskedText,
        example: &Example,
        _ids: LabelTokenIds,
    ) -> Result<[f64; 2], AdapterError> {
        Ok(match self.gold_for(example)? {
            Label::Idiomatic => [-ORACLE_LOGIT, ORACLE_LOGIT],
            Label::Literal => [ORACLE_LOGIT, -ORACLE_LOGIT],
        })
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"oracle");
        h.update(self.tokenizer.vocab().hash().as_bytes());
        let mut gold: Vec<_> = self.gold.iter().collect();
        gold.sort();
        for (id, label) in gold {
            h.update(id.as_bytes());
            h.update([*label as u8]);
        }
        hex::encode(h.finalize())
    }

    fn box_clone(&self) -> AdapterHandle {
        Box::new(self.clone())
    }
}
