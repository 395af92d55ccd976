use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use idiom_fewshot::corpus::{write_dataset, LabelEncoding};
use idiom_fewshot::synthetic::{idiom_corpus, IdiomCorpusConfig};

fn idiomfs(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idiomfs"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup(dir: &Path) {
    let corpus = idiom_corpus(
        &IdiomCorpusConfig {
            per_train_mwe: 6,
            per_test_mwe: 2,
            cues_per_class: 2,
            fillers_per_sentence: 3,
        },
        2,
    );
    write_dataset(&dir.join("train.tsv"), &corpus.train, &LabelEncoding::default()).unwrap();
    write_dataset(&dir.join("eval.tsv"), &corpus.test, &LabelEncoding::default()).unwrap();
    fs::write(
        dir.join("run.toml"),
        r#"
name = "cli-run"
backend = "tiny"
seeds = [1, 2]
pvps = ["P1", "P4"]
labeled_size = 20
unlabeled_size = 40

[data]
train = "train.tsv"
eval = "eval.tsv"

[train]
steps = 5

[pet.distill]
steps = 30
"#,
    )
    .unwrap();
}

#[test]
fn train_pet_then_report_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let o = idiomfs(&["train-pet", "--config", "run.toml", "--out", "a", "--backend", "oracle", "--seed", "5"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("Setting"), "{}", stdout(&o));
    let snapshot = fs::read_to_string(dir.path().join("a/config.toml")).unwrap();
    assert!(snapshot.contains("backend = \"oracle\""));
    assert!(snapshot.contains("seed = 5"));
    assert!(snapshot.contains("task = \"pet\""));

    let o = idiomfs(&["report", "a/report.json", "renamed=a/report.json"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("Setting"));
    assert!(rows[1].starts_with("a "));
    assert!(rows[2].starts_with("renamed "));

    fs::write(
        dir.path().join("eval.toml"),
        "[data]\neval = \"eval.tsv\"\npredictions = \"a/predictions.tsv\"\n",
    )
    .unwrap();
    let o = idiomfs(&["evaluate", "--config", "eval.toml", "--out", "scored"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let a = fs::read_to_string(dir.path().join("a/report.txt")).unwrap();
    let b = fs::read_to_string(dir.path().join("scored/report.txt")).unwrap();
    assert_eq!(a.lines().nth(1).unwrap().split_whitespace().skip(1).collect::<Vec<_>>(),
               b.lines().nth(1).unwrap().split_whitespace().skip(1).collect::<Vec<_>>());
}

#[test]
fn harvest_writes_tsv() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("corpus.txt"), "a night owl\nred tape\tand more red tape\nnothing\n").unwrap();
    fs::write(dir.path().join("mwes.txt"), "red tape\nblue moon\n").unwrap();
    let o = idiomfs(
        &["harvest", "--corpus", "corpus.txt", "--mwe", "night owl", "--mwes", "mwes.txt", "-k", "3", "--out", "ctx.tsv"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(dir.path().join("ctx.tsv")).unwrap(),
        "mwe\tcontext\nnight owl\ta night owl\nred tape\tred tape and more red tape\n"
    );
}

#[test]
fn errors_are_module_tagged() {
    let dir = tempfile::tempdir().unwrap();
    let o = idiomfs(&["train-pet", "--config", "missing.toml"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error[harness]: "), "{}", stderr(&o));

    fs::write(dir.path().join("c.txt"), "nothing\n").unwrap();
    let o = idiomfs(&["harvest", "--corpus", "c.txt", "--mwe", "night owl", "-k", "0"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error[corpus]: "), "{}", stderr(&o));

    fs::write(dir.path().join("bad.json"), "{").unwrap();
    let o = idiomfs(&["report", "bad.json"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error[harness]: report:"), "{}", stderr(&o));

    let o = idiomfs(&["train-pet", "--config", "x.toml", "--backend", "gpu"], dir.path());
    assert!(!o.status.success());
}
