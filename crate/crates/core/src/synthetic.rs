//! Template-generated fixtures for desk-scale runs: a zero-shot idiomaticity
//! corpus and a frequent-word set for mimic training.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::corpus::{ContextSet, Example};
use crate::rng::{self, Rng};
use crate::Label;

pub const MWES: [&str; 40] = [
    "night owl",
    "red tape",
    "hot potato",
    "cold feet",
    "big fish",
    "black sheep",
    "white elephant",
    "dark horse",
    "early bird",
    "wet blanket",
    "loose cannon",
    "rocket science",
    "silver bullet",
    "glass ceiling",
    "low blow",
    "sitting duck",
    "rat race",
    "top dog",
    "gold mine",
    "smoking gun",
    "brass ring",
    "blue moon",
    "green light",
    "lame duck",
    "paper tiger",
    "couch potato",
    "cash cow",
    "hard nut",
    "old flame",
    "bad apple",
    "fat cat",
    "hot air",
    "deep water",
    "thin ice",
    "eager beaver",
    "busy bee",
    "fair game",
    "small fry",
    "grey area",
    "open book",
];

const FILLERS: [&str; 24] = [
    "the", "a", "they", "said", "that", "we", "saw", "there", "was", "again", "today", "it",
    "really", "then", "with", "our", "some", "near", "after", "when", "found", "just", "still",
    "here",
];

fn pseudo_word(rng: &mut Rng, syllables: usize) -> String {
    const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    (0..syllables)
        .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
        .collect()
}

fn distinct_words(rng: &mut Rng, n: usize, syllables: usize, taken: &mut std::collections::HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(rng, syllables);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdiomCorpusConfig {
    /// Usages generated per train-side MWE (half idiomatic, half literal).
    pub per_train_mwe: usize,
    pub per_test_mwe: usize,
    /// Cue words per class; each sentence carries one.
    pub cues_per_class: usize,
    pub fillers_per_sentence: usize,
}

impl Default for IdiomCorpusConfig {
    fn default() -> Self {
        IdiomCorpusConfig {
            per_train_mwe: 80,
            per_test_mwe: 10,
            cues_per_class: 20,
            fillers_per_sentence: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IdiomCorpus {
    pub train_mwes: Vec<String>,
    pub test_mwes: Vec<String>,
    /// Usages of the train-side MWEs, labeled.
    pub train: Vec<Example>,
    /// Usages of the held-out MWEs, labeled.
    pub test: Vec<Example>,
    pub idiomatic_cues: Vec<String>,
    pub literal_cues: Vec<String>,
}

impl IdiomCorpus {
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.train.iter().chain(&self.test).map(|e| e.sentence.as_str())
    }
}

/// The first 20 MWEs are train-only, the last 20 test-only. A usage's class
/// is signalled by one cue word drawn from that class's pool; everything else
/// is shared filler.
pub fn idiom_corpus(config: &IdiomCorpusConfig, seed: u64) -> IdiomCorpus {
    let mut rng = rng::derive(seed, "synthetic-idioms");
    let mut taken: std::collections::HashSet<String> = FILLERS.iter().map(|s| s.to_string()).collect();
    for m in MWES {
        taken.extend(m.split(' ').map(str::to_string));
    }
    let idiomatic_cues = distinct_words(&mut rng, config.cues_per_class, 3, &mut taken);
    let literal_cues = distinct_words(&mut rng, config.cues_per_class, 3, &mut taken);
    let make = |mwes: &[&str], per: usize, prefix: &str, rng: &mut Rng| {
        let mut out = Vec::new();
        for (mi, mwe) in mwes.iter().enumerate() {
            for j in 0..per {
                let label = if j % 2 == 0 { Label::Idiomatic } else { Label::Literal };
                let cues = match label {
                    Label::Idiomatic => &idiomatic_cues,
                    Label::Literal => &literal_cues,
                };
                let mut words: Vec<String> = (0..config.fillers_per_sentence)
                    .map(|_| FILLERS.choose(rng).unwrap().to_string())
                    .collect();
                let cue = cues.choose(rng).unwrap().clone();
                let at = rng.gen_range(0..=words.len());
                words.insert(at, cue);
                let at = rng.gen_range(0..=words.len());
                words.insert(at, mwe.to_string());
                let mut sentence = words.join(" ");
                sentence.push('.');
                out.push(Example::new(
                    format!("{prefix}{mi:02}-{j:03}"),
                    "EN",
                    *mwe,
                    sentence,
                    Some(label),
                ));
            }
        }
        out
    };
    let train = make(&MWES[..20], config.per_train_mwe, "tr", &mut rng);
    let test = make(&MWES[20..], config.per_test_mwe, "te", &mut rng);
    IdiomCorpus {
        train_mwes: MWES[..20].iter().map(|s| s.to_string()).collect(),
        test_mwes: MWES[20..].iter().map(|s| s.to_string()).collect(),
        train,
        test,
        idiomatic_cues,
        literal_cues,
    }
}

#[derive(Debug, Clone)]
pub struct MimicFixture {
    /// `(word, gold vector)` pairs.
    pub words: Vec<(String, Vec<f64>)>,
    pub contexts: Vec<ContextSet>,
    /// Topic index of each word.
    pub topics: Vec<usize>,
}

impl MimicFixture {
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.contexts.iter().flat_map(|c| c.contexts.iter().map(String::as_str))
    }
}

/// Frequent words grouped into topics. A word's gold vector is its topic
/// vector plus a small word-specific offset; its contexts mix topic words
/// with shared fillers.
pub fn mimic_fixture(
    n_words: usize,
    contexts_per_word: usize,
    dim: usize,
    n_topics: usize,
    seed: u64,
) -> MimicFixture {
    let mut rng = rng::derive(seed, "synthetic-mimic");
    let mut taken: std::collections::HashSet<String> = FILLERS.iter().map(|s| s.to_string()).collect();
    let words = distinct_words(&mut rng, n_words, 3, &mut taken);
    let topic_words: Vec<Vec<String>> = (0..n_topics)
        .map(|_| distinct_words(&mut rng, 8, 2, &mut taken))
        .collect();
    let unit = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std");
    let offset = Normal::new(0.0, 0.15 / (dim as f64).sqrt()).expect("positive std");
    let topic_vecs: Vec<Vec<f64>> = (0..n_topics)
        .map(|_| (0..dim).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let mut out_words = Vec::with_capacity(n_words);
    let mut contexts = Vec::with_capacity(n_words);
    let mut topics = Vec::with_capacity(n_words);
    for (i, w) in words.into_iter().enumerate() {
        let topic = i % n_topics;
        let gold: Vec<f64> = topic_vecs[topic]
            .iter()
            .map(|t| t + offset.sample(&mut rng))
            .collect();
        let mut lines = Vec::with_capacity(contexts_per_word);
        let mut seen = std::collections::HashSet::new();
        while lines.len() < contexts_per_word {
            let mut parts: Vec<String> = Vec::with_capacity(6);
            for _ in 0..2 {
                parts.push(topic_words[topic].choose(&mut rng).unwrap().clone());
            }
            for _ in 0..3 {
                parts.push(FILLERS.choose(&mut rng).unwrap().to_string());
            }
            parts.shuffle(&mut rng);
            let at = rng.gen_range(0..=parts.len());
            parts.insert(at, w.clone());
            let line = parts.join(" ");
            if seen.insert(line.clone()) {
                lines.push(line);
            }
        }
        contexts.push(ContextSet {
            mwe: w.clone(),
            contexts: lines,
            source: "synthetic".into(),
        });
        out_words.push((w, gold));
        topics.push(topic);
    }
    MimicFixture {
        words: out_words,
        contexts,
        topics,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn splits_are_disjoint_and_balanced() {
        let c = idiom_corpus(&IdiomCorpusConfig::default(), 1);
        let train: HashSet<&str> = c.train.iter().map(|e| e.mwe.as_str()).collect();
        let test: HashSet<&str> = c.test.iter().map(|e| e.mwe.as_str()).collect();
        assert_eq!(train.len(), 20);
        assert_eq!(test.len(), 20);
        assert!(train.is_disjoint(&test));
        let idiomatic = c.train.iter().filter(|e| e.label == Some(Label::Idiomatic)).count();
        assert_eq!(idiomatic * 2, c.train.len());
        for e in c.train.iter().chain(&c.test) {
            assert!(e.sentence.contains(&e.mwe));
        }
        let cues: HashSet<&String> = c.idiomatic_cues.iter().collect();
        assert!(c.literal_cues.iter().all(|w| !cues.contains(w)));
    }

    #[test]
    fn generation_is_seeded() {
        let a = idiom_corpus(&IdiomCorpusConfig::default(), 5);
        let b = idiom_corpus(&IdiomCorpusConfig::default(), 5);
        assert_eq!(a.train, b.train);
        let f = mimic_fixture(10, 4, 8, 3, 2);
        let g = mimic_fixture(10, 4, 8, 3, 2);
        assert_eq!(f.words, g.words);
        assert_eq!(f.contexts, g.contexts);
        for (c, (w, _)) in f.contexts.iter().zip(&f.words) {
            assert_eq!(c.contexts.len(), 4);
            assert!(c.contexts.iter().all(|l| l.split(' ').any(|t| t == w)));
        }
    }
}
