//! Dataset ingestion, labeled/unlabeled sampling and context harvesting.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{rng, Label};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: file is empty")]
    EmptyFile { path: PathBuf },
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: unparseable label value {value:?}")]
    BadLabel { row: usize, value: String },
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("unknown split name {0:?} (expected train, dev, eval or test)")]
    UnknownSplit(String),
    #[error("sample size must be even, got {0}")]
    OddSampleSize(usize),
    #[error("not enough {label} examples: need {needed}, have {available} (deficit {})", needed - available)]
    Capacity {
        label: Label,
        needed: usize,
        available: usize,
    },
    #[error("example {id} has no label; labeled sampling needs a fully labeled split")]
    Unlabeled { id: String },
    #[error("no line in {source_name} contains {mwe:?}")]
    NoContexts { mwe: String, source_name: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// One dataset row: an MWE occurrence in a sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub language: String,
    pub mwe: String,
    pub sentence: String,
    pub label: Option<Label>,
}

impl Example {
    pub fn new(
        id: impl Into<String>,
        language: impl Into<String>,
        mwe: impl Into<String>,
        sentence: impl Into<String>,
        label: Option<Label>,
    ) -> Self {
        Example {
            id: id.into(),
            language: language.into(),
            mwe: mwe.into(),
            sentence: sentence.into(),
            label,
        }
    }

    /// A copy of this example with the gold label removed.
    pub fn unlabeled(&self) -> Example {
        Example {
            label: None,
            ..self.clone()
        }
    }

    pub fn with_label(&self, label: Label) -> Example {
        Example {
            label: Some(label),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Eval,
    Test,
}

impl FromStr for SplitName {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(SplitName::Train),
            "dev" => Ok(SplitName::Dev),
            "eval" => Ok(SplitName::Eval),
            "test" => Ok(SplitName::Test),
            _ => Err(CorpusError::UnknownSplit(s.to_string())),
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Eval => "eval",
            SplitName::Test => "test",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub examples: Vec<Example>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Number of examples per language, in first-seen order.
    pub fn language_counts(&self) -> Vec<(String, usize)> {
        let mut counts: Vec<(String, usize)> = Vec::new();
        for ex in &self.examples {
            match counts.iter_mut().find(|(l, _)| *l == ex.language) {
                Some((_, c)) => *c += 1,
                None => counts.push((ex.language.clone(), 1)),
            }
        }
        counts
    }
}

/// Raw-text contexts harvested for one MWE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSet {
    pub mwe: String,
    pub contexts: Vec<String>,
    pub source: String,
}

/// On-disk label polarity. The task files do not fix which value means
/// idiomatic, so the mapping is configurable; the default is `1` = idiomatic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelEncoding {
    pub idiomatic: String,
    pub literal: String,
}

impl Default for LabelEncoding {
    fn default() -> Self {
        LabelEncoding {
            idiomatic: "1".into(),
            literal: "0".into(),
        }
    }
}

impl LabelEncoding {
    pub fn decode(&self, value: &str) -> Option<Label> {
        if value == self.idiomatic {
            Some(Label::Idiomatic)
        } else if value == self.literal {
            Some(Label::Literal)
        } else {
            None
        }
    }

    pub fn encode(&self, label: Label) -> &str {
        match label {
            Label::Idiomatic => &self.idiomatic,
            Label::Literal => &self.literal,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub labels: LabelEncoding,
    /// Reject rows whose sentence does not contain the MWE (case-insensitive).
    pub require_mwe_in_sentence: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            labels: LabelEncoding::default(),
            require_mwe_in_sentence: true,
        }
    }
}

pub const DATASET_COLUMNS: [&str; 5] = ["id", "language", "mwe", "sentence", "label"];

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_dataset(path: &Path, split: SplitName) -> Result<DatasetSplit, CorpusError> {
    load_dataset_with(path, split, &LoadOptions::default())
}

pub fn load_dataset_with(
    path: &Path,
    split: SplitName,
    options: &LoadOptions,
) -> Result<DatasetSplit, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    let examples = read_examples(BufReader::new(file), options).map_err(|e| match e {
        CorpusError::EmptyFile { .. } => CorpusError::EmptyFile {
            path: path.to_path_buf(),
        },
        CorpusError::Io { source, .. } => CorpusError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })?;
    Ok(DatasetSplit {
        name: split,
        examples,
    })
}

/// Parses headered dataset TSV. Row numbers in errors are 1-based file lines.
pub fn read_examples<R: BufRead>(
    reader: R,
    options: &LoadOptions,
) -> Result<Vec<Example>, CorpusError> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|source| CorpusError::Io {
            path: PathBuf::new(),
            source,
        })?,
        None => {
            return Err(CorpusError::EmptyFile {
                path: PathBuf::new(),
            })
        }
    };
    let header = header.trim_start_matches('\u{feff}').trim_end_matches('\r');
    if header.is_empty() {
        return Err(CorpusError::EmptyFile {
            path: PathBuf::new(),
        });
    }
    let columns: Vec<&str> = header.split('\t').collect();
    let find = |name: &str| columns.iter().position(|c| c.trim() == name);
    let mut required = [0usize; 4];
    for (slot, name) in required.iter_mut().zip(&DATASET_COLUMNS[..4]) {
        *slot = find(name).ok_or_else(|| CorpusError::MissingColumn(name.to_string()))?;
    }
    let [id_col, lang_col, mwe_col, sent_col] = required;
    let label_col = find("label");

    let mut examples = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 2;
        let line = line.map_err(|source| CorpusError::Io {
            path: PathBuf::new(),
            source,
        })?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let get = |col: usize, name: &str| {
            fields.get(col).copied().ok_or_else(|| CorpusError::Row {
                row,
                message: format!("missing value for column `{name}`"),
            })
        };
        let label = match label_col.and_then(|c| fields.get(c)) {
            Some(value) if !value.is_empty() => {
                Some(
                    options
                        .labels
                        .decode(value)
                        .ok_or_else(|| CorpusError::BadLabel {
                            row,
                            value: value.to_string(),
                        })?,
                )
            }
            _ => None,
        };
        let example = Example {
            id: get(id_col, "id")?.to_string(),
            language: get(lang_col, "language")?.to_string(),
            mwe: get(mwe_col, "mwe")?.to_string(),
            sentence: get(sent_col, "sentence")?.to_string(),
            label,
        };
        if options.require_mwe_in_sentence
            && !example
                .sentence
                .to_lowercase()
                .contains(&example.mwe.to_lowercase())
        {
            return Err(CorpusError::Row {
                row,
                message: format!(
                    "sentence does not contain the MWE {:?}",
                    example.mwe
                ),
            });
        }
        examples.push(example);
    }
    Ok(examples)
}

pub fn write_dataset(
    path: &Path,
    examples: &[Example],
    labels: &LabelEncoding,
) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    write_examples(&mut out, examples, labels).map_err(io_err(path))?;
    out.flush().map_err(io_err(path))
}

pub fn write_examples<W: Write>(
    out: &mut W,
    examples: &[Example],
    labels: &LabelEncoding,
) -> io::Result<()> {
    writeln!(out, "{}", DATASET_COLUMNS.join("\t"))?;
    for ex in examples {
        let label = ex.label.map(|l| labels.encode(l)).unwrap_or("");
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            ex.id, ex.language, ex.mwe, ex.sentence, label
        )?;
    }
    Ok(())
}

/// Draws `n / 2` idiomatic and `n / 2` literal examples uniformly without
/// replacement from one language-agnostic pool.
///
/// Both outputs keep the split's original order; together they partition it.
pub fn sample_labeled(
    examples: &[Example],
    n: usize,
    seed: u64,
) -> Result<(Vec<Example>, Vec<Example>), CorpusError> {
    if !n.is_multiple_of(2) {
        return Err(CorpusError::OddSampleSize(n));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, ex) in examples.iter().enumerate() {
        match ex.label {
            Some(Label::Idiomatic) => by_class[0].push(i),
            Some(Label::Literal) => by_class[1].push(i),
            None => return Err(CorpusError::Unlabeled { id: ex.id.clone() }),
        }
    }
    let half = n / 2;
    for (label, pool) in Label::ALL.iter().zip(&by_class) {
        if pool.len() < half {
            return Err(CorpusError::Capacity {
                label: *label,
                needed: half,
                available: pool.len(),
            });
        }
    }
    let mut rng = rng::derive(seed, "sample_labeled");
    let mut chosen = vec![false; examples.len()];
    for pool in &by_class {
        for j in index::sample(&mut rng, pool.len(), half).iter() {
            chosen[pool[j]] = true;
        }
    }
    let (labeled, remainder): (Vec<_>, Vec<_>) = examples
        .iter()
        .zip(&chosen)
        .partition(|(_, &picked)| picked);
    Ok((
        labeled.into_iter().map(|(e, _)| e.clone()).collect(),
        remainder.into_iter().map(|(e, _)| e.clone()).collect(),
    ))
}

/// Draws up to `size` examples uniformly without replacement and strips their
/// labels. Selected examples keep their relative order.
pub fn unlabeled_pool(examples: &[Example], size: usize, seed: u64) -> Vec<Example> {
    let take = size.min(examples.len());
    let mut rng = rng::derive(seed, "unlabeled_pool");
    let mut picked = index::sample(&mut rng, examples.len(), take).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| examples[i].unlabeled()).collect()
}

/// Matches an MWE as ordered whole words, case-insensitively, with single
/// spaces between components.
#[derive(Debug, Clone)]
pub struct MweMatcher {
    regex: Regex,
}

impl MweMatcher {
    pub fn new(mwe: &str) -> Result<Self, CorpusError> {
        let words: Vec<String> = mwe.split_whitespace().map(regex::escape).collect();
        if words.is_empty() {
            return Err(CorpusError::InvalidArgument("empty MWE".into()));
        }
        let pattern = format!(r"(?i)(?:^|[^\w]){}(?:[^\w]|$)", words.join(" "));
        let regex = Regex::new(&pattern)
            .map_err(|e| CorpusError::InvalidArgument(format!("bad MWE {mwe:?}: {e}")))?;
        Ok(MweMatcher { regex })
    }

    pub fn is_match(&self, text: &str) -> bool {
        self.regex.is_match(text)
    }
}

pub fn harvest_contexts(corpus: &Path, mwe: &str, k: usize) -> Result<ContextSet, CorpusError> {
    let file = File::open(corpus).map_err(io_err(corpus))?;
    harvest_from_reader(
        BufReader::new(file),
        &corpus.display().to_string(),
        mwe,
        k,
    )
    .map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::Io {
            path: corpus.to_path_buf(),
            source,
        },
        other => other,
    })
}

/// Scans lines in order and keeps the first `k` distinct lines containing
/// the MWE.
pub fn harvest_from_reader<R: BufRead>(
    reader: R,
    source: &str,
    mwe: &str,
    k: usize,
) -> Result<ContextSet, CorpusError> {
    if k == 0 {
        return Err(CorpusError::InvalidArgument(
            "harvest count must be at least 1".into(),
        ));
    }
    let matcher = MweMatcher::new(mwe)?;
    let mut seen = HashSet::new();
    let mut contexts = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|source| CorpusError::Io {
            path: PathBuf::new(),
            source,
        })?;
        let line = line.trim_end_matches('\r');
        if matcher.is_match(line) && seen.insert(line.to_string()) {
            contexts.push(line.to_string());
            if contexts.len() == k {
                break;
            }
        }
    }
    if contexts.is_empty() {
        return Err(CorpusError::NoContexts {
            mwe: mwe.to_string(),
            source_name: source.to_string(),
        });
    }
    Ok(ContextSet {
        mwe: mwe.to_string(),
        contexts,
        source: source.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn parse(text: &str) -> Result<Vec<Example>, CorpusError> {
        read_examples(Cursor::new(text), &LoadOptions::default())
    }

    fn labeled(n_idiom: usize, n_literal: usize) -> Vec<Example> {
        let mut out = Vec::new();
        for i in 0..n_idiom + n_literal {
            let label = if i < n_idiom {
                Label::Idiomatic
            } else {
                Label::Literal
            };
            let lang = if i % 3 == 0 { "PT" } else { "EN" };
            out.push(Example::new(
                format!("e{i}"),
                lang,
                "night owl",
                format!("sentence {i} with night owl"),
                Some(label),
            ));
        }
        out
    }

    #[test]
    fn parses_three_rows_verbatim() {
        let text = "id\tlanguage\tmwe\tsentence\tlabel\n\
                    a\tEN\tnight owl\tHe is a night owl.\t1\n\
                    b\tPT\tpão duro\tEle é um pão duro.\t0\n\
                    c\tGL\tbig fish\tA big fish swam by.\t\n";
        let rows = parse(text).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(
            rows[0],
            Example::new("a", "EN", "night owl", "He is a night owl.", Some(Label::Idiomatic))
        );
        assert_eq!(rows[1].label, Some(Label::Literal));
        assert_eq!(rows[1].mwe, "pão duro");
        assert_eq!(rows[2].label, None);
    }

    #[test]
    fn label_column_is_optional() {
        let rows = parse("id\tlanguage\tmwe\tsentence\nx\tEN\tred tape\tso much red tape\n").unwrap();
        assert_eq!(rows[0].label, None);
    }

    #[test]
    fn bad_label_reports_row() {
        let err = parse("id\tlanguage\tmwe\tsentence\tlabel\na\tEN\tred tape\tred tape\t1\nb\tEN\tred tape\tred tape\t2\n")
            .unwrap_err();
        match err {
            CorpusError::BadLabel { row, value } => {
                assert_eq!(row, 3);
                assert_eq!(value, "2");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_named() {
        let err = parse("id\tlanguage\tsentence\n").unwrap_err();
        assert!(matches!(err, CorpusError::MissingColumn(ref c) if c == "mwe"), "{err}");
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(parse(""), Err(CorpusError::EmptyFile { .. })));
    }

    #[test]
    fn sentence_must_contain_mwe() {
        let err = parse("id\tlanguage\tmwe\tsentence\nx\tEN\tred tape\tno match here\n").unwrap_err();
        assert!(matches!(err, CorpusError::Row { row: 2, .. }));
    }

    #[test]
    fn custom_label_polarity() {
        let options = LoadOptions {
            labels: LabelEncoding {
                idiomatic: "0".into(),
                literal: "1".into(),
            },
            ..LoadOptions::default()
        };
        let rows = read_examples(
            Cursor::new("id\tlanguage\tmwe\tsentence\tlabel\na\tEN\tred tape\tred tape\t0\n"),
            &options,
        )
        .unwrap();
        assert_eq!(rows[0].label, Some(Label::Idiomatic));
    }

    #[test]
    fn sample_ten_is_balanced() {
        let data = labeled(12, 20);
        let (picked, rest) = sample_labeled(&data, 10, 7).unwrap();
        let idiom = picked
            .iter()
            .filter(|e| e.label == Some(Label::Idiomatic))
            .count();
        assert_eq!(idiom, 5);
        assert_eq!(picked.len() - idiom, 5);
        assert_eq!(rest.len(), data.len() - 10);
    }

    #[test]
    fn sample_zero_returns_whole_split_as_remainder() {
        let data = labeled(3, 3);
        let (picked, rest) = sample_labeled(&data, 0, 1).unwrap();
        assert!(picked.is_empty());
        assert_eq!(rest, data);
    }

    #[test]
    fn sample_deficit_is_a_capacity_error() {
        let data = labeled(1, 10);
        match sample_labeled(&data, 4, 1).unwrap_err() {
            CorpusError::Capacity {
                label,
                needed,
                available,
            } => {
                assert_eq!(label, Label::Idiomatic);
                assert_eq!((needed, available), (2, 1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn odd_sample_size_rejected() {
        assert!(matches!(
            sample_labeled(&labeled(5, 5), 3, 0),
            Err(CorpusError::OddSampleSize(3))
        ));
    }

    #[test]
    fn unlabeled_pool_strips_labels() {
        let data = labeled(10, 10);
        let pool = unlabeled_pool(&data, 8, 3);
        assert_eq!(pool.len(), 8);
        assert!(pool.iter().all(|e| e.label.is_none()));
        assert_eq!(unlabeled_pool(&data, 100, 3).len(), 20);
    }

    #[test]
    fn harvest_picks_lines_two_and_four() {
        // Lines 2 and 4 mention the MWE; line 5 only has "owl" and line 3 has
        // the words split by two spaces.
        let corpus = "the night was long\nshe is a night owl, always\nnight  owl\nNight Owl sightings rose\nan owl hooted\n";
        let set = harvest_from_reader(Cursor::new(corpus), "fixture", "night owl", 150).unwrap();
        assert_eq!(
            set.contexts,
            vec!["she is a night owl, always", "Night Owl sightings rose"]
        );
    }

    #[test]
    fn harvest_requires_whole_words() {
        let corpus = "midnight owls everywhere\nknight owl\n";
        assert!(matches!(
            harvest_from_reader(Cursor::new(corpus), "fixture", "night owl", 5),
            Err(CorpusError::NoContexts { .. })
        ));
    }

    #[test]
    fn harvest_stops_at_k_and_skips_duplicates() {
        let mut corpus = String::new();
        for i in 0..200 {
            corpus.push_str(&format!("line {i} about a night owl\n"));
            corpus.push_str(&format!("line {i} about a night owl\n"));
        }
        let set = harvest_from_reader(Cursor::new(corpus.as_str()), "fixture", "night owl", 150).unwrap();
        assert_eq!(set.contexts.len(), 150);
        assert_eq!(set.contexts[1], "line 1 about a night owl");
    }

    #[test]
    fn harvest_single_match_is_supply_limited() {
        let set = harvest_from_reader(Cursor::new("a night owl\nnothing\n"), "f", "night owl", 150).unwrap();
        assert_eq!(set.contexts.len(), 1);
    }
}
