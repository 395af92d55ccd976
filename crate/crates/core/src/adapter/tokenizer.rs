//! Whitespace + wordpiece tokenizer with support for injected multiword tokens.

use std::collections::{BTreeSet, HashMap};

use sha2::{Digest, Sha256};

pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const MASK_TOKEN: &str = "[MASK]";
const SPECIALS: [&str; 3] = [UNK_TOKEN, CLS_TOKEN, MASK_TOKEN];
const CONTINUATION: &str = "##";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from token strings. The special tokens are always
    /// placed first; duplicates are dropped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in SPECIALS {
            vocab.push(t.to_string());
        }
        for t in tokens {
            vocab.push(t.into());
        }
        vocab
    }

    /// Whole words seen at least `min_count` times plus every character as a
    /// word-initial piece and a `##` continuation piece, so any word made of
    /// seen characters tokenizes without `[UNK]`.
    pub fn build<'a, I>(texts: I, extra_words: &[&str], min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut chars = BTreeSet::new();
        for text in texts {
            for word in pre_tokenize(text) {
                if SPECIALS.contains(&word.as_str()) {
                    continue;
                }
                chars.extend(word.chars());
                *counts.entry(word).or_default() += 1;
            }
        }
        for w in extra_words {
            chars.extend(w.chars());
            counts.insert(w.to_string(), usize::MAX);
        }
        let words: BTreeSet<String> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .map(|(w, _)| w)
            .collect();
        let pieces = chars
            .iter()
            .map(|c| c.to_string())
            .chain(chars.iter().map(|c| format!("{CONTINUATION}{c}")));
        Vocabulary::from_tokens(words.into_iter().chain(pieces))
    }

    fn push(&mut self, token: String) -> usize {
        if let Some(&id) = self.index.get(&token) {
            return id;
        }
        let id = self.tokens.len();
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    fn truncate(&mut self, len: usize) {
        for t in self.tokens.drain(len..) {
            self.index.remove(&t);
        }
    }
}

/// Splits on whitespace and isolates punctuation characters. Special tokens
/// such as `[MASK]` stay whole.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        while !rest.is_empty() {
            if let Some(special) = SPECIALS.iter().find(|s| rest.starts_with(**s)) {
                out.push(special.to_string());
                rest = &rest[special.len()..];
                continue;
            }
            let c = rest.chars().next().expect("non-empty");
            if !c.is_alphanumeric() {
                out.push(c.to_string());
                rest = &rest[c.len_utf8()..];
                continue;
            }
            let end = rest
                .char_indices()
                .find(|(i, c)| {
                    !c.is_alphanumeric() || SPECIALS.iter().any(|s| rest[*i..].starts_with(s))
                })
                .map(|(i, _)| i)
                .unwrap_or(rest.len());
            out.push(rest[..end].to_string());
            rest = &rest[end..];
        }
    }
    out
}

/// Normalized token string for a multiword form: lower-cased words joined by `_`.
pub fn normalize_form(form: &str) -> String {
    form.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join("_")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vocabulary,
    /// Injected multiword tokens, keyed by normalized form.
    phrases: HashMap<String, usize>,
    max_phrase_words: usize,
}

impl Tokenizer {
    pub fn new(vocab: Vocabulary) -> Self {
        Tokenizer {
            vocab,
            phrases: HashMap::new(),
            max_phrase_words: 0,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn mask_token(&self) -> &str {
        MASK_TOKEN
    }

    pub fn mask_id(&self) -> usize {
        self.vocab.id(MASK_TOKEN).expect("special token")
    }

    pub fn unk_id(&self) -> usize {
        self.vocab.id(UNK_TOKEN).expect("special token")
    }

    pub fn cls_id(&self) -> usize {
        self.vocab.id(CLS_TOKEN).expect("special token")
    }

    /// Multiword phrases registered through [`Tokenizer::add_token`], with ids.
    pub fn phrases(&self) -> impl Iterator<Item = (&str, usize)> {
        self.phrases.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Appends a token for `form` (normalized). Multiword forms are also
    /// registered so [`Tokenizer::encode`] maps the surface phrase to it.
    pub fn add_token(&mut self, form: &str) -> usize {
        let token = normalize_form(form);
        let id = self.vocab.push(token.clone());
        let words = form.split_whitespace().count();
        if words > 1 {
            self.phrases.insert(token, id);
            self.max_phrase_words = self.max_phrase_words.max(words);
        }
        id
    }

    /// Drops every token with id `>= len`, including registered phrases.
    pub fn truncate(&mut self, len: usize) {
        self.vocab.truncate(len);
        self.phrases.retain(|_, id| *id < len);
        self.max_phrase_words = self
            .phrases
            .keys()
            .map(|k| k.split('_').count())
            .max()
            .unwrap_or(0);
    }

    /// Wordpiece segmentation of one pre-token: whole word if known, else
    /// greedy longest-match pieces, else `[UNK]`.
    pub fn encode_word(&self, word: &str) -> Vec<usize> {
        if let Some(id) = self.vocab.id(word) {
            return vec![id];
        }
        let bounds: Vec<usize> = word
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(word.len()))
            .collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        while start + 1 < bounds.len() {
            let found = (start + 1..bounds.len()).rev().find_map(|end| {
                let piece = &word[bounds[start]..bounds[end]];
                let id = if start == 0 {
                    self.vocab.id(piece)
                } else {
                    self.vocab.id(&format!("{CONTINUATION}{piece}"))
                };
                id.map(|id| (id, end))
            });
            match found {
                Some((id, end)) => {
                    pieces.push(id);
                    start = end;
                }
                None => return vec![self.unk_id()],
            }
        }
        pieces
    }

    fn encode_words(&self, words: &[String], out: &mut Vec<usize>) {
        let mut i = 0;
        while i < words.len() {
            let longest = self.max_phrase_words.min(words.len() - i);
            let phrase = (2..=longest).rev().find_map(|n| {
                let key = normalize_form(&words[i..i + n].join(" "));
                self.phrases.get(&key).map(|&id| (id, n))
            });
            match phrase {
                Some((id, n)) => {
                    out.push(id);
                    i += n;
                }
                None => {
                    out.extend(self.encode_word(&words[i]));
                    i += 1;
                }
            }
        }
    }

    /// `[CLS]` followed by the token ids of `text`.
    pub fn encode(&self, text: &str) -> Encoding {
        let words = pre_tokenize(text);
        let mut ids = vec![self.cls_id()];
        self.encode_words(&words, &mut ids);
        Encoding { ids }
    }

    /// Encodes `text` with the first case-insensitive occurrence of `phrase`
    /// collapsed into one slot. Returns the ids (the slot holds `[UNK]`) and the
    /// slot position, or `None` when the phrase does not occur.
    pub fn encode_with_slot(&self, text: &str, phrase: &str) -> Option<(Vec<usize>, usize)> {
        let words = pre_tokenize(text);
        let target: Vec<String> = pre_tokenize(phrase)
            .into_iter()
            .map(|w| w.to_lowercase())
            .collect();
        if target.is_empty() || target.len() > words.len() {
            return None;
        }
        let start = (0..=words.len() - target.len()).find(|&i| {
            words[i..i + target.len()]
                .iter()
                .zip(&target)
                .all(|(w, t)| w.to_lowercase() == *t)
        })?;
        let mut ids = vec![self.cls_id()];
        self.encode_words(&words[..start], &mut ids);
        let slot = ids.len();
        ids.push(self.unk_id());
        self.encode_words(&words[start + target.len()..], &mut ids);
        Some((ids, slot))
    }

    /// Position of the single mask token, if present exactly once.
    pub fn mask_position(&self, ids: &[usize]) -> Option<usize> {
        let mask = self.mask_id();
        let mut found = ids.iter().enumerate().filter(|(_, &id)| id == mask);
        let first = found.next()?.0;
        found.next().is_none().then_some(first)
    }
}
