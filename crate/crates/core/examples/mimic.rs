//! Mimic-trains the embedding model on the synthetic frequent-word fixture and
//! reports how close inferred vectors get to the gold ones.
//!
//! cargo run --release -p idiom-fewshot --example mimic

use std::time::Instant;

use idiom_fewshot::adapter::{TinyConfig, TinyMlm};
use idiom_fewshot::bertram::{BertramHyper, BertramModel, NGramTable};
use idiom_fewshot::synthetic::mimic_fixture;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dim = 16;
    let fixture = mimic_fixture(100, 20, dim, 10, 11);
    let config = TinyConfig {
        width: dim,
        depth: 1,
        ffn_width: 2 * dim,
        ..TinyConfig::default()
    };
    let encoder = TinyMlm::from_texts(fixture.texts(), &[], config, 5);
    let forms: Vec<&str> = fixture.words.iter().map(|(w, _)| w.as_str()).collect();
    let table = NGramTable::for_forms(forms, 3, 5, dim, 0.1, 3)?;
    let mut model = BertramModel::new(encoder, table)?;
    let hyper = BertramHyper {
        steps: 200,
        ..BertramHyper::default()
    };
    let t = Instant::now();
    let report = model.train_mimic(&fixture.words, &fixture.contexts, &hyper, 9)?;
    let mut total = 0.0;
    for ((w, gold), ctx) in fixture.words.iter().zip(&fixture.contexts) {
        total += cosine(&model.infer_embedding(w, ctx)?.embedding.vector, gold);
    }
    println!(
        "loss {:.5} -> {:.5}, mean cosine {:.4} ({:.1}s)",
        report.initial_loss,
        report.final_loss,
        total / fixture.words.len() as f64,
        t.elapsed().as_secs_f64()
    );
    Ok(())
}
