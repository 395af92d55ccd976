use std::collections::HashSet;
use std::fs;

use idiom_fewshot::corpus::{
    harvest_contexts, load_dataset, sample_labeled, unlabeled_pool, CorpusError, SplitName,
};
use idiom_fewshot::pvp::{builtin_pvps, load_patterns, render, select_pvps};
use idiom_fewshot::Label;

fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn fixture_dataset_loads() {
    let split = load_dataset(&fixture("patterns_examples.tsv"), SplitName::Eval).unwrap();
    assert_eq!(split.examples.len(), 10);
    let gl = &split.examples[8];
    assert_eq!((gl.id.as_str(), gl.language.as_str(), gl.mwe.as_str()), ("gl01", "GL", "cabeza dura"));
    assert_eq!(split.examples[1].label, Some(Label::Literal));
    assert_eq!(split.examples[5].sentence, "“It isn't rocket science,” she said.");
}

#[test]
fn sampling_partitions_and_balances() {
    let split = load_dataset(&fixture("patterns_examples.tsv"), SplitName::Eval).unwrap();
    let (labeled, rest) = sample_labeled(&split.examples, 6, 3).unwrap();
    let idioms = labeled.iter().filter(|e| e.label == Some(Label::Idiomatic)).count();
    assert_eq!((labeled.len(), idioms), (6, 3));
    let ids: HashSet<&str> = labeled.iter().chain(&rest).map(|e| e.id.as_str()).collect();
    assert_eq!(ids.len(), 10);
    assert_eq!(sample_labeled(&split.examples, 6, 3).unwrap().0, labeled);
    assert!(matches!(sample_labeled(&split.examples, 8, 3), Err(CorpusError::Capacity { label: Label::Literal, needed: 4, available: 3 })));
    let pool = unlabeled_pool(&rest, 100, 1);
    assert_eq!(pool.len(), 4);
    assert!(pool.iter().all(|e| e.label.is_none()));
}

#[test]
fn pattern_file_overrides_render() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("patterns.tsv");
    fs::write(
        &path,
        "id\ttemplate\tprompt_language\tliteral_token\tidiom_token\nQ1\tIDIOM_1 BLANK X\tEN\tyes\tno\n",
    )
    .unwrap();
    let pvps = load_patterns(&path).unwrap();
    let split = load_dataset(&fixture("patterns_examples.tsv"), SplitName::Eval).unwrap();
    let r = render(&pvps[0], &split.examples[0], "[MASK]").unwrap();
    assert_eq!(r.text, "night [MASK] My brother is a night owl.");
    let en = builtin_pvps("EN").unwrap();
    let picked = select_pvps(&en, &["P5".into(), "P1".into()]).unwrap();
    assert_eq!(picked.iter().map(|p| p.id()).collect::<Vec<_>>(), ["P5", "P1"]);
    assert!(select_pvps(&en, &["P9".into()]).is_err());
    assert!(builtin_pvps("DE").is_err());
}

#[test]
fn harvest_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.txt");
    fs::write(
        &path,
        "A Night Owl sang.\nnight  owl, spaced\nnight owls are loud\nthe night owl slept\nthe night owl slept\nno match\nnight owl!\n",
    )
    .unwrap();
    let set = harvest_contexts(&path, "night owl", 5).unwrap();
    assert_eq!(set.contexts, ["A Night Owl sang.", "the night owl slept", "night owl!"]);
    assert_eq!(harvest_contexts(&path, "night owl", 1).unwrap().contexts.len(), 1);
    assert!(matches!(harvest_contexts(&path, "red tape", 5), Err(CorpusError::NoContexts { .. })));
    assert!(harvest_contexts(&dir.path().join("missing.txt"), "night owl", 5).is_err());
}
