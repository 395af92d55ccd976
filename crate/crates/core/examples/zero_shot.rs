//! Trains PET on the synthetic zero-shot corpus at three labeled sizes and
//! prints the per-seed test scores.
//!
//! cargo run --release -p idiom-fewshot --example zero_shot

use std::time::Instant;

use idiom_fewshot::corpus::{write_dataset, LabelEncoding};
use idiom_fewshot::harness::{run_experiment, ExperimentConfig, Task};
use idiom_fewshot::synthetic::{idiom_corpus, IdiomCorpusConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let corpus = idiom_corpus(&IdiomCorpusConfig::default(), 7);
    let train = dir.path().join("train.tsv");
    let test = dir.path().join("test.tsv");
    write_dataset(&train, &corpus.train, &LabelEncoding::default())?;
    write_dataset(&test, &corpus.test, &LabelEncoding::default())?;
    for size in [10usize, 100, 1000] {
        for seed in [1u64, 2, 3] {
            let mut c = ExperimentConfig {
                task: Task::Pet,
                name: format!("n{size}-s{seed}"),
                seed,
                seeds: vec![seed],
                pvps: vec!["P1".into(), "P4".into()],
                final_pvp: "P4".into(),
                labeled_size: size,
                unlabeled_size: 400,
                output_dir: dir.path().join(format!("n{size}-s{seed}")),
                ..ExperimentConfig::default()
            };
            c.data.train = Some(train.clone());
            c.data.eval = Some(test.clone());
            c.train.steps = 400;
            c.pet.distill.steps = 300;
            let t = Instant::now();
            let out = run_experiment(&c)?;
            let f1 = out.report.map(|r| r.overall).unwrap_or(f64::NAN);
            println!("n={size:<5} seed={seed} f1={f1:.4} ({:.1}s)", t.elapsed().as_secs_f64());
        }
    }
    Ok(())
}
