//! Cloze patterns, verbalizers and rendering.
//!
//! Templates are written with bare placeholder words:
//!
//! | placeholder | substituted with                          |
//! |-------------|-------------------------------------------|
//! | `X`         | the example sentence                      |
//! | `IDIOM`     | the MWE surface form                      |
//! | `IDIOM_k`   | the k-th (1-based) component word of the MWE |
//! | `BLANK`     | the backend's mask marker                 |
//!
//! A placeholder must stand alone as an ASCII word (`X:` and `(BLANK)` are
//! fine, `XBOX` is plain text).

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Example;
use crate::Label;

#[derive(Debug, Error)]
pub enum PvpError {
    #[error("pattern {id}: {reason}")]
    InvalidPattern { id: String, reason: String },
    #[error("invalid verbalizer: {0}")]
    InvalidVerbalizer(String),
    #[error("no built-in patterns for prompt language {0:?}")]
    UnsupportedLanguage(String),
    #[error("MWE {mwe:?} has {words} word(s); component {k} requested")]
    ComponentOutOfRange { mwe: String, k: usize, words: usize },
    #[error("cannot render example {example} with pattern {pattern}: {reason}")]
    Render {
        pattern: String,
        example: String,
        reason: String,
    },
    #[error("unknown pattern id {0:?}")]
    UnknownPattern(String),
    #[error("pattern file: {0}")]
    File(String),
    #[error("pattern file: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Sentence,
    Idiom,
    IdiomWord(usize),
    Blank,
}

fn parse_template(id: &str, template: &str) -> Result<Vec<Segment>, PvpError> {
    let invalid = |reason: String| PvpError::InvalidPattern {
        id: id.to_string(),
        reason,
    };
    let mut segments = Vec::new();
    let mut text = String::new();
    let mut chars = template.char_indices().peekable();
    while let Some(&(start, c)) = chars.peek() {
        if c.is_ascii_alphanumeric() || c == '_' {
            let mut end = start;
            while let Some(&(i, c)) = chars.peek() {
                if c.is_ascii_alphanumeric() || c == '_' {
                    end = i + c.len_utf8();
                    chars.next();
                } else {
                    break;
                }
            }
            // A run glued to a non-ASCII letter ("Xé") is plain text.
            let glued = template[..start]
                .chars()
                .next_back()
                .is_some_and(|p| p.is_alphanumeric())
                || template[end..]
                    .chars()
                    .next()
                    .is_some_and(|n| n.is_alphanumeric());
            let word = &template[start..end];
            let placeholder = if glued {
                None
            } else if word == "X" {
                Some(Segment::Sentence)
            } else if word == "IDIOM" {
                Some(Segment::Idiom)
            } else if word == "BLANK" {
                Some(Segment::Blank)
            } else if let Some(k) = word.strip_prefix("IDIOM_") {
                let k: usize = k
                    .parse()
                    .map_err(|_| invalid(format!("bad component placeholder {word}")))?;
                if k == 0 {
                    return Err(invalid("IDIOM_k needs k >= 1".into()));
                }
                Some(Segment::IdiomWord(k))
            } else {
                None
            };
            match placeholder {
                Some(seg) => {
                    if !text.is_empty() {
                        segments.push(Segment::Text(std::mem::take(&mut text)));
                    }
                    segments.push(seg);
                }
                None => text.push_str(word),
            }
        } else {
            text.push(c);
            chars.next();
        }
    }
    if !text.is_empty() {
        segments.push(Segment::Text(text));
    }
    let blanks = segments.iter().filter(|s| **s == Segment::Blank).count();
    if blanks != 1 {
        return Err(invalid(format!(
            "template needs exactly one BLANK, found {blanks}"
        )));
    }
    if segments.iter().filter(|s| **s == Segment::Sentence).count() > 1 {
        return Err(invalid("template has more than one X".into()));
    }
    Ok(segments)
}

/// A cloze template with exactly one mask slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    id: String,
    template: String,
    prompt_language: String,
    segments: Vec<Segment>,
}

impl Pattern {
    pub fn new(
        id: impl Into<String>,
        template: impl Into<String>,
        prompt_language: impl Into<String>,
    ) -> Result<Self, PvpError> {
        let id = id.into();
        let template = template.into();
        let segments = parse_template(&id, &template)?;
        Ok(Pattern {
            id,
            template,
            prompt_language: prompt_language.into(),
            segments,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn prompt_language(&self) -> &str {
        &self.prompt_language
    }

    pub fn uses_idiom(&self) -> bool {
        self.segments
            .iter()
            .any(|s| matches!(s, Segment::Idiom | Segment::IdiomWord(_)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verbalizer {
    literal_token: String,
    idiom_token: String,
}

impl Verbalizer {
    pub fn new(
        literal_token: impl Into<String>,
        idiom_token: impl Into<String>,
    ) -> Result<Self, PvpError> {
        let literal_token = literal_token.into();
        let idiom_token = idiom_token.into();
        if literal_token.is_empty() || idiom_token.is_empty() {
            return Err(PvpError::InvalidVerbalizer("empty label token".into()));
        }
        if literal_token == idiom_token {
            return Err(PvpError::InvalidVerbalizer(format!(
                "both classes map to {literal_token:?}"
            )));
        }
        Ok(Verbalizer {
            literal_token,
            idiom_token,
        })
    }

    pub fn literal_token(&self) -> &str {
        &self.literal_token
    }

    pub fn idiom_token(&self) -> &str {
        &self.idiom_token
    }

    pub fn token(&self, label: Label) -> &str {
        match label {
            Label::Idiomatic => &self.idiom_token,
            Label::Literal => &self.literal_token,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternVerbalizerPair {
    pub pattern: Pattern,
    pub verbalizer: Verbalizer,
}

impl PatternVerbalizerPair {
    pub fn new(
        id: &str,
        template: &str,
        prompt_language: &str,
        literal_token: &str,
        idiom_token: &str,
    ) -> Result<Self, PvpError> {
        Ok(PatternVerbalizerPair {
            pattern: Pattern::new(id, template, prompt_language)?,
            verbalizer: Verbalizer::new(literal_token, idiom_token)?,
        })
    }

    pub fn id(&self) -> &str {
        self.pattern.id()
    }
}

/// Rendered cloze input. `mask_index` is the position of the mask marker in
/// the token sequence of a specific tokenizer and is filled by the adapter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedText {
    pub text: String,
    pub mask_index: Option<usize>,
}

const EN_PATTERNS: [(&str, &str, &str, &str); 5] = [
    ("P1", "X: BLANK", "literal", "phrase"),
    ("P2", "(BLANK) X", "literal", "phrase"),
    ("P3", "X. IDIOM is BLANK literal.", "actually", "not"),
    ("P4", "X. BLANK, IDIOM is literal.", "yes", "no"),
    ("P5", "X. IDIOM is BLANK IDIOM_2", "actually", "not"),
];

/// The built-in pattern inventory: P1–P5 in English, and the translated P4 in
/// Portuguese and Galician.
pub fn builtin_pvps(prompt_language: &str) -> Result<Vec<PatternVerbalizerPair>, PvpError> {
    match prompt_language.to_ascii_uppercase().as_str() {
        "EN" => EN_PATTERNS
            .iter()
            .map(|(id, template, lit, idiom)| {
                PatternVerbalizerPair::new(id, template, "EN", lit, idiom)
            })
            .collect(),
        "PT" => Ok(vec![PatternVerbalizerPair::new(
            "P4",
            "X. BLANK, IDIOM é literal.",
            "PT",
            "sim",
            "não",
        )?]),
        "GL" => Ok(vec![PatternVerbalizerPair::new(
            "P4",
            "X. BLANK, IDIOM é literal.",
            "GL",
            "si",
            "non",
        )?]),
        _ => Err(PvpError::UnsupportedLanguage(prompt_language.to_string())),
    }
}

/// Looks up PVPs by id, preserving the requested order.
pub fn select_pvps(
    available: &[PatternVerbalizerPair],
    ids: &[String],
) -> Result<Vec<PatternVerbalizerPair>, PvpError> {
    ids.iter()
        .map(|id| {
            available
                .iter()
                .find(|p| p.id() == id)
                .cloned()
                .ok_or_else(|| PvpError::UnknownPattern(id.clone()))
        })
        .collect()
}

/// The k-th (1-based) whitespace-separated word of an MWE.
pub fn idiom_component(mwe: &str, k: usize) -> Result<&str, PvpError> {
    let words: Vec<&str> = mwe.split_whitespace().collect();
    if k == 0 || k > words.len() {
        return Err(PvpError::ComponentOutOfRange {
            mwe: mwe.to_string(),
            k,
            words: words.len(),
        });
    }
    Ok(words[k - 1])
}

fn ends_sentence(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | '…')
}

/// Substitutes placeholders. When the sentence already ends in terminal
/// punctuation and the template continues `X` with terminal punctuation
/// (`X. ...`), the template's mark is dropped so the output reads
/// `He is a night owl. night owl is ...` rather than `owl.. night`.
pub fn render(
    pvp: &PatternVerbalizerPair,
    example: &Example,
    mask_marker: &str,
) -> Result<MaskedText, PvpError> {
    let fail = |reason: String| PvpError::Render {
        pattern: pvp.id().to_string(),
        example: example.id.clone(),
        reason,
    };
    if example.sentence.is_empty() {
        return Err(fail("empty sentence".into()));
    }
    if pvp.pattern.uses_idiom() && example.mwe.trim().is_empty() {
        return Err(fail("template uses IDIOM but the example has no MWE".into()));
    }
    let sentence_terminal = example
        .sentence
        .trim_end()
        .chars()
        .next_back()
        .is_some_and(ends_sentence);
    let mut out = String::with_capacity(example.sentence.len() + pvp.pattern.template.len() + 16);
    let mut after_sentence = false;
    for seg in &pvp.pattern.segments {
        match seg {
            Segment::Text(t) => {
                let mut text = t.as_str();
                if after_sentence && sentence_terminal {
                    if let Some(first) = text.chars().next().filter(|c| ends_sentence(*c)) {
                        text = &text[first.len_utf8()..];
                    }
                }
                out.push_str(text);
            }
            Segment::Sentence => out.push_str(&example.sentence),
            Segment::Idiom => out.push_str(&example.mwe),
            Segment::IdiomWord(k) => {
                let word = idiom_component(&example.mwe, *k).map_err(|e| fail(e.to_string()))?;
                out.push_str(word);
            }
            Segment::Blank => out.push_str(mask_marker),
        }
        after_sentence = *seg == Segment::Sentence;
    }
    if out.matches(mask_marker).count() != 1 {
        return Err(fail(format!(
            "rendered text must contain exactly one {mask_marker:?}"
        )));
    }
    Ok(MaskedText {
        text: out,
        mask_index: None,
    })
}

pub const PATTERN_COLUMNS: [&str; 5] =
    ["id", "template", "prompt_language", "literal_token", "idiom_token"];

pub fn load_patterns(path: &Path) -> Result<Vec<PatternVerbalizerPair>, PvpError> {
    read_patterns(BufReader::new(File::open(path)?))
}

pub fn read_patterns<R: BufRead>(reader: R) -> Result<Vec<PatternVerbalizerPair>, PvpError> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| PvpError::File("empty file".into()))??;
    let columns: Vec<&str> = header.trim_end_matches('\r').split('\t').collect();
    let mut idx = [0usize; 5];
    for (slot, name) in idx.iter_mut().zip(PATTERN_COLUMNS) {
        *slot = columns
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| PvpError::File(format!("missing column `{name}`")))?;
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let get = |j: usize| {
            fields
                .get(idx[j])
                .copied()
                .ok_or_else(|| PvpError::File(format!("row {}: too few fields", i + 2)))
        };
        out.push(PatternVerbalizerPair::new(
            get(0)?,
            get(1)?,
            get(2)?,
            get(3)?,
            get(4)?,
        )?);
    }
    Ok(out)
}

pub fn write_patterns<W: Write>(out: &mut W, pvps: &[PatternVerbalizerPair]) -> io::Result<()> {
    writeln!(out, "{}", PATTERN_COLUMNS.join("\t"))?;
    for p in pvps {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            p.id(),
            p.pattern.template(),
            p.pattern.prompt_language(),
            p.verbalizer.literal_token(),
            p.verbalizer.idiom_token()
        )?;
    }
    Ok(())
}
