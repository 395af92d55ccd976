//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! Set `IDIOMFS_BLESS=1` to rewrite the pattern goldens.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use idiom_fewshot::adapter::{
    class_probs, masked_input, AdapterError, AdapterHandle, BackendKind, LabelTokenIds, MaskedLanguageModel,
    OracleMlm, TinyConfig, TinyMlm, Tokenizer, Vocabulary,
};
use idiom_fewshot::bertram::{
    inject_embeddings, BertramHyper, BertramModel, MWEEmbedding, NGramTable,
};
use idiom_fewshot::corpus::{
    load_dataset, sample_labeled, unlabeled_pool, write_dataset, ContextSet, Example,
    LabelEncoding, SplitName,
};
use idiom_fewshot::harness::{macro_f1, run_experiment, ExperimentConfig, Task};
use idiom_fewshot::ipet::{ipet_run, GenerationPlan};
use idiom_fewshot::pet::{soft_annotate, Ensemble, EnsembleMember};
use idiom_fewshot::pvp::{builtin_pvps, render, MaskedText, PatternVerbalizerPair};
use idiom_fewshot::rng;
use idiom_fewshot::synthetic::{idiom_corpus, mimic_fixture, IdiomCorpusConfig};
use idiom_fewshot::Label;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

type Check = Result<String, String>;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Independent two-term softmax, written as a logistic.
fn softmax_idiom(literal: f64, idiom: f64) -> f64 {
    1.0 / (1.0 + (literal - idiom).exp())
}

fn tokenizer(words: &[&str]) -> Tokenizer {
    Tokenizer::new(Vocabulary::from_tokens(words.iter().copied()))
}

const VERBALIZERS: [&str; 6] = ["literal", "phrase", "actually", "not", "yes", "no"];

/// Returns fixed logits, or pseudo-random ones keyed by example id and salt.
#[derive(Clone)]
struct Scripted {
    tokenizer: Tokenizer,
    fixed: Option<[f64; 2]>,
    salt: u64,
}

fn scripted_logits(salt: u64, id: &str) -> [f64; 2] {
    let mut r = rng::derive(salt, id);
    [r.gen_range(-8.0..8.0), r.gen_range(-8.0..8.0)]
}

impl MaskedLanguageModel for Scripted {
    fn backend_kind(&self) -> BackendKind {
        BackendKind::External
    }
    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }
    fn embedding_dim(&self) -> usize {
        4
    }
    fn state_version(&self) -> u64 {
        0
    }
    fn mask_logits(&self, _: &MaskedText, _: &Example) -> Result<Vec<f64>, AdapterError> {
        Err(AdapterError::Checkpoint("scripted model has no vocabulary head".into()))
    }
    fn label_logits(&self, _: &MaskedText, ex: &Example, _: LabelTokenIds) -> Result<[f64; 2], AdapterError> {
        Ok(self.fixed.unwrap_or_else(|| scripted_logits(self.salt, &ex.id)))
    }
    fn fingerprint(&self) -> String {
        format!("scripted-{}", self.salt)
    }
    fn box_clone(&self) -> AdapterHandle {
        Box::new(self.clone())
    }
}

fn pattern_goldens() -> Check {
    let split = load_dataset(&fixtures().join("patterns_examples.tsv"), SplitName::Eval).map_err(err)?;
    let mut out = String::from("pattern\tprompt_language\texample\trendered\n");
    let mut n = 0;
    for lang in ["EN", "PT", "GL"] {
        for pvp in builtin_pvps(lang).map_err(err)? {
            for ex in &split.examples {
                let r = render(&pvp, ex, "[MASK]").map_err(err)?;
                out.push_str(&format!("{}\t{lang}\t{}\t{}\n", pvp.id(), ex.id, r.text));
                n += 1;
            }
        }
    }
    let path = fixtures().join("patterns_golden.tsv");
    if std::env::var_os("IDIOMFS_BLESS").is_some() {
        fs::write(&path, &out).map_err(err)?;
    }
    let golden = fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    ensure(golden == out.as_bytes(), || {
        let want = String::from_utf8_lossy(&golden);
        let first = want
            .lines()
            .zip(out.lines())
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("expected {a:?}, got {b:?}"))
            .unwrap_or_else(|| "line count differs".into());
        format!("rendering differs from golden: {first}")
    })?;
    ensure(n == 70, || format!("{n} renderings, expected 70"))?;
    Ok(format!("{n} renderings (7 PVPs x 10 examples) byte-identical"))
}

fn probability_law() -> Check {
    let pvp = builtin_pvps("EN").map_err(err)?.remove(3);
    let ex = Example::new("p", "EN", "night owl", "She is a night owl.", None);
    let mut r = rng::derive(2024, "probability-law");
    let (mut worst_sum, mut worst_ref) = (0.0f64, 0.0f64);
    for i in 0..1000 {
        let scale = [1.0, 10.0, 50.0][i % 3];
        let lit = r.gen_range(-scale..scale);
        let idiom = r.gen_range(-scale..scale);
        let model = Scripted {
            tokenizer: tokenizer(&VERBALIZERS),
            fixed: Some([lit, idiom]),
            salt: 0,
        };
        let d = class_probs(&model, &pvp, &ex).map_err(err)?;
        worst_sum = worst_sum.max((d.p_idiomatic + d.p_literal - 1.0).abs());
        let reference = softmax_idiom(lit, idiom);
        worst_ref = worst_ref
            .max((d.p_idiomatic - reference).abs())
            .max((d.p_literal - (1.0 - reference)).abs());
    }
    ensure(worst_sum <= 1e-9, || format!("sum deviates by {worst_sum:e}"))?;
    ensure(worst_ref <= 1e-12, || format!("reference deviates by {worst_ref:e}"))?;
    Ok(format!("1000 pairs: max |sum-1| {worst_sum:.1e}, max |p-ref| {worst_ref:.1e}"))
}

fn distillation_oracle() -> Check {
    let pvps = builtin_pvps("EN").map_err(err)?;
    let members: Vec<EnsembleMember> = pvps
        .iter()
        .enumerate()
        .map(|(i, p)| EnsembleMember {
            pvp: p.clone(),
            seed: i as u64 + 1,
            adapter: Box::new(Scripted {
                tokenizer: tokenizer(&VERBALIZERS),
                fixed: None,
                salt: 100 + i as u64,
            }),
            weight: 1.0,
            report: None,
        })
        .collect();
    let ensemble = Ensemble::new(members).map_err(err)?;
    let pool: Vec<Example> = (0..500)
        .map(|i| Example::new(format!("u{i:03}"), "EN", "red tape", format!("The red tape {i} was cut."), None))
        .collect();
    let annotation = soft_annotate(&ensemble, &pool).map_err(err)?;
    ensure(annotation.failures.is_empty(), || format!("{} failures", annotation.failures.len()))?;
    ensure(annotation.set.entries.len() == 500, || {
        format!("{} annotated examples", annotation.set.entries.len())
    })?;
    let mut worst = 0.0f64;
    for (ex, d) in &annotation.set.entries {
        let expected: f64 = (0..5)
            .map(|i| {
                let [l, id] = scripted_logits(100 + i, &ex.id);
                softmax_idiom(l, id)
            })
            .sum::<f64>()
            / 5.0;
        worst = worst
            .max((d.p_idiomatic - expected).abs())
            .max((d.p_literal - (1.0 - expected)).abs());
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    Ok(format!("500 examples x 5 members, max deviation {worst:.1e}"))
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Result<Self, String> {
        Ok(Workspace {
            dir: tempfile::tempdir().map_err(err)?,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Writes the corpus splits and returns a config over them.
    fn config(&self, tag: &str, config: &IdiomCorpusConfig, corpus_seed: u64) -> Result<ExperimentConfig, String> {
        let corpus = idiom_corpus(config, corpus_seed);
        let train = self.path(&format!("{tag}-train.tsv"));
        let test = self.path(&format!("{tag}-test.tsv"));
        write_dataset(&train, &corpus.train, &LabelEncoding::default()).map_err(err)?;
        write_dataset(&test, &corpus.test, &LabelEncoding::default()).map_err(err)?;
        let mut c = ExperimentConfig {
            name: tag.into(),
            output_dir: self.path(tag),
            ..ExperimentConfig::default()
        };
        c.data.train = Some(train);
        c.data.eval = Some(test);
        Ok(c)
    }
}

fn oracle_config(ws: &Workspace) -> Result<ExperimentConfig, String> {
    let corpus = IdiomCorpusConfig {
        per_train_mwe: 20,
        per_test_mwe: 5,
        cues_per_class: 2,
        fillers_per_sentence: 4,
    };
    let mut c = ws.config("oracle", &corpus, 3)?;
    c.backend = BackendKind::Oracle;
    c.labeled_size = 100;
    c.unlabeled_size = 300;
    Ok(c)
}

fn oracle_end_to_end(ws: &Workspace) -> Check {
    let c = oracle_config(ws)?;
    let out = run_experiment(&c).map_err(err)?;
    let report = out.report.ok_or("no report")?;
    ensure(report.total == 100, || format!("{} held-out examples", report.total))?;
    let pool = report.metadata.settings.get("unlabeled_size").cloned().unwrap_or_default();
    ensure(pool == "300", || format!("unlabeled pool of {pool}"))?;
    ensure(report.overall == 1.0, || format!("macro F1 {:.4}", report.overall))?;
    Ok(format!("5 PVPs x 3 seeds, 100 + 300 examples: held-out macro F1 {:.4}", report.overall))
}

fn tiny_config(ws: &Workspace, size: usize, seed: u64) -> Result<ExperimentConfig, String> {
    let mut c = ws.config(&format!("tiny-n{size}-s{seed}"), &IdiomCorpusConfig::default(), 7)?;
    c.backend = BackendKind::Tiny;
    c.seed = seed;
    c.seeds = vec![seed];
    c.pvps = vec!["P1".into(), "P4".into()];
    c.final_pvp = "P4".into();
    c.labeled_size = size;
    c.unlabeled_size = 400;
    c.train.steps = 400;
    c.pet.distill.steps = 300;
    Ok(c)
}

fn tiny_zero_shot(ws: &Workspace) -> Check {
    let mut means = Vec::new();
    let mut lines = Vec::new();
    let mut large = Vec::new();
    for size in [10usize, 100, 1000] {
        let mut scores = Vec::new();
        for seed in [1u64, 2, 3] {
            let c = tiny_config(ws, size, seed)?;
            let report = run_experiment(&c).map_err(err)?.report.ok_or("no report")?;
            scores.push(report.overall);
        }
        let mean = scores.iter().sum::<f64>() / 3.0;
        lines.push(format!("n={size}: {mean:.3}"));
        means.push(mean);
        if size == 1000 {
            large = scores;
        }
    }
    let summary = lines.join(", ");
    let min_large = large.iter().copied().fold(f64::INFINITY, f64::min);
    ensure(min_large >= 0.90, || format!("F1 at 1000 below 0.90 (min {min_large:.4}); {summary}"))?;
    ensure(means[2] > means[1] && means[1] > means[0], || format!("not monotone: {summary}"))?;
    Ok(format!("test-only MWEs, mean F1 {summary}; min at 1000 {min_large:.4}"))
}

fn ipet_mechanics() -> Check {
    let corpus = idiom_corpus(
        &IdiomCorpusConfig {
            per_train_mwe: 20,
            per_test_mwe: 2,
            cues_per_class: 2,
            fillers_per_sentence: 3,
        },
        5,
    );
    let gold: HashMap<String, Label> = corpus
        .train
        .iter()
        .filter_map(|e| e.label.map(|l| (e.id.clone(), l)))
        .collect();
    let (labeled, rest) = sample_labeled(&corpus.train, 10, 1).map_err(err)?;
    let pool = unlabeled_pool(&rest, 150, 1);
    let words: Vec<&str> = VERBALIZERS.to_vec();
    let tok = tokenizer(&words);
    let factory = |_seed: u64| -> Result<AdapterHandle, AdapterError> {
        Ok(Box::new(OracleMlm::new(tok.clone(), 8, gold.clone())))
    };
    let pvps: Vec<PatternVerbalizerPair> = builtin_pvps("EN").map_err(err)?.into_iter().take(2).collect();
    let plan = GenerationPlan {
        generations: 3,
        ..GenerationPlan::default()
    };
    let outcome = ipet_run(&pvps, &labeled, &pool, &plan, &[1, 2], &factory, &Default::default(), 9).map_err(err)?;
    let mut sizes = Vec::new();
    let mut pseudo = 0;
    for g in &outcome.generations[1..] {
        let expected = (labeled.len() * 5usize.pow(g.generation as u32)).min(labeled.len() + pool.len());
        ensure(g.target_size == expected, || {
            format!("generation {} target {} != {expected}", g.generation, g.target_size)
        })?;
        ensure(g.sizes.iter().all(|s| *s == expected), || {
            format!("generation {} sizes {:?}, expected {expected}", g.generation, g.sizes)
        })?;
        sizes.push(expected);
        for a in &g.audit {
            ensure(a.member != a.labeling_member, || format!("{} labeled its own data", a.member))?;
            ensure(gold[&a.example_id] == a.pseudo_label, || {
                format!("{} pseudo-labeled {} against gold", a.example_id, a.pseudo_label)
            })?;
            pseudo += 1;
        }
        let mut per_member: HashMap<&str, [usize; 2]> = HashMap::new();
        for a in &g.audit {
            let e = per_member.entry(a.member.as_str()).or_default();
            e[(a.pseudo_label == Label::Literal) as usize] += 1;
        }
        for (member, [i, l]) in per_member {
            let n = expected - labeled.len();
            let (want_i, want_l) = plan.class_ratio.split(n);
            ensure(i.abs_diff(want_i) <= 1 && l.abs_diff(want_l) <= 1, || {
                format!("{member}: {i}/{l} against {want_i}/{want_l}")
            })?;
        }
    }
    ensure(sizes == [50, 160, 160], || format!("sizes {sizes:?}"))?;
    Ok(format!("sizes {sizes:?}, {pseudo} pseudo-labels: none self-labeled, all gold, ratios within 1"))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn random_matrix(r: &mut rng::Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.gen_range(-std..std))
}

fn bertram_properties() -> Check {
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
    let table = NGramTable::for_forms(forms, 3, 5, dim, 0.1, 3).map_err(err)?;
    let mut model = BertramModel::new(encoder, table).map_err(err)?;

    let mut probe = model.clone();
    let mut r = rng::derive(17, "bertram-properties");
    let (mut worst_sum, mut worst_perm) = (0.0f64, 0.0f64);
    for i in 0..100 {
        probe
            .set_attention(
                random_matrix(&mut r, 1, dim, 3.0),
                random_matrix(&mut r, dim, dim, 1.0),
                random_matrix(&mut r, 1, dim, 0.5),
            )
            .map_err(err)?;
        let set = &fixture.contexts[i % fixture.contexts.len()];
        let k = r.gen_range(2..=set.contexts.len());
        let mut chosen: Vec<String> = set.contexts.choose_multiple(&mut r, k).cloned().collect();
        let ctx = |contexts: Vec<String>| ContextSet {
            mwe: set.mwe.clone(),
            contexts,
            source: "fixture".into(),
        };
        let a = probe.infer_embedding(&set.mwe, &ctx(chosen.clone())).map_err(err)?;
        worst_sum = worst_sum.max((a.weights.iter().sum::<f64>() - 1.0).abs());
        chosen.shuffle(&mut r);
        let b = probe.infer_embedding(&set.mwe, &ctx(chosen)).map_err(err)?;
        for (x, y) in a.embedding.vector.iter().zip(&b.embedding.vector) {
            worst_perm = worst_perm.max((x - y).abs());
        }
    }
    ensure(worst_sum <= 1e-6, || format!("attention weights off by {worst_sum:e}"))?;
    ensure(worst_perm <= 1e-9, || format!("permutation changes output by {worst_perm:e}"))?;

    let hyper = BertramHyper {
        steps: 200,
        ..BertramHyper::default()
    };
    let report = model.train_mimic(&fixture.words, &fixture.contexts, &hyper, 9).map_err(err)?;
    let mut total = 0.0;
    for ((w, gold), ctx) in fixture.words.iter().zip(&fixture.contexts) {
        total += cosine(&model.infer_embedding(w, ctx).map_err(err)?.embedding.vector, gold);
    }
    let mean = total / fixture.words.len() as f64;
    ensure(report.final_loss <= report.initial_loss / 2.0, || {
        format!("loss {:.4} -> {:.4}", report.initial_loss, report.final_loss)
    })?;
    ensure(mean >= 0.95, || format!("mean cosine {mean:.4}"))?;
    Ok(format!(
        "weights sum err {worst_sum:.1e}, permutation err {worst_perm:.1e}; mimic loss {:.3} -> {:.3}, mean cosine {mean:.4}",
        report.initial_loss, report.final_loss
    ))
}

fn injection_round_trip() -> Check {
    let mwes = &idiom_fewshot::synthetic::MWES[..10];
    let texts: Vec<String> = mwes.iter().map(|m| format!("they said the {m} was here")).collect();
    let encoder = TinyMlm::from_texts(texts.iter().map(String::as_str), &["yes", "no", "literal"], TinyConfig::default(), 4);
    let mut adapter: AdapterHandle = Box::new(encoder);
    let before = adapter.as_tiny().ok_or("not tiny")?.input_embeddings().clone();
    let base = adapter.tokenizer().vocab().len();
    let mut r = rng::derive(3, "injection");
    let dim = adapter.embedding_dim();
    let embs: Vec<MWEEmbedding> = mwes
        .iter()
        .map(|m| MWEEmbedding {
            mwe: m.to_string(),
            vector: (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect(),
            context_count: 5,
        })
        .collect();
    let report = inject_embeddings(adapter.as_mut(), &embs, false).map_err(err)?;
    let tiny = adapter.as_tiny().ok_or("not tiny")?;
    let grown = tiny.tokenizer().vocab().len() - base;
    ensure(grown == 10 && report.added.len() == 10, || format!("vocabulary grew by {grown}"))?;
    let prior = tiny.input_embeddings().slice(ndarray::s![..before.nrows(), ..]).to_owned();
    ensure(
        prior.iter().zip(before.iter()).all(|(a, b)| a.to_bits() == b.to_bits()),
        || "prior rows changed".into(),
    )?;
    for (e, (_, id)) in embs.iter().zip(&report.added) {
        let row = tiny.input_embedding(*id).to_vec();
        ensure(row == e.vector, || format!("row for {} differs", e.mwe))?;
    }
    let pvp = builtin_pvps("EN").map_err(err)?.remove(3);
    let ex = Example::new("x", "EN", mwes[0], format!("She said the {} was here.", mwes[0]), None);
    let d = class_probs(adapter.as_ref(), &pvp, &ex).map_err(err)?;
    ensure(d.is_valid(), || "invalid distribution".into())?;
    let masked = masked_input(adapter.as_ref(), &pvp, &ex).map_err(err)?;
    let tok = adapter.tokenizer();
    let ids = tok.encode(&masked.text).ids;
    let single = report.added[0].1;
    let occurrences = masked.text.matches(mwes[0]).count();
    ensure(ids.iter().filter(|&&t| t == single).count() == occurrences, || {
        format!("{:?} is not one token in {:?}", mwes[0], masked.text)
    })?;
    for part in mwes[0].split(' ') {
        let part_id = tok.vocab().id(part).ok_or("component missing from vocabulary")?;
        ensure(!ids.contains(&part_id), || format!("component {part:?} encoded separately"))?;
    }
    Ok(format!("+{grown} vocabulary, {} prior rows bit-exact, MWE encoded as one token", before.nrows()))
}

fn brute_force_f1(preds: &[Label], golds: &[Label]) -> f64 {
    let mut m = [[0usize; 2]; 2];
    for (p, g) in preds.iter().zip(golds) {
        m[(*g == Label::Literal) as usize][(*p == Label::Literal) as usize] += 1;
    }
    let f = |c: usize| {
        let tp = m[c][c] as f64;
        let predicted = (m[0][c] + m[1][c]) as f64;
        let actual = (m[c][0] + m[c][1]) as f64;
        if tp == 0.0 {
            return 0.0;
        }
        let (p, r) = (tp / predicted, tp / actual);
        2.0 * p * r / (p + r)
    };
    (f(0) + f(1)) / 2.0
}

fn metric_correctness() -> Check {
    use Label::{Idiomatic as I, Literal as L};
    let fixture = macro_f1(&[I, L, L, L], &[I, I, L, L]).map_err(err)?;
    ensure(format!("{fixture:.4}") == "0.7333", || format!("fixture gave {fixture}"))?;
    ensure(fixture == brute_force_f1(&[I, L, L, L], &[I, I, L, L]), || "fixture disagrees".into())?;
    let mut r = rng::derive(99, "metric");
    for i in 0..1000 {
        let n = r.gen_range(1..=40);
        let bias: f64 = r.gen();
        let draw = |r: &mut rng::Rng| if r.gen_bool(bias) { I } else { L };
        let golds: Vec<Label> = (0..n).map(|_| draw(&mut r)).collect();
        let preds: Vec<Label> = (0..n).map(|_| draw(&mut r)).collect();
        let got = macro_f1(&preds, &golds).map_err(err)?;
        let want = brute_force_f1(&preds, &golds);
        ensure(got == want, || format!("vector {i}: {got} != {want}"))?;
    }
    Ok("1000 random vectors agree exactly; [i,l,l,l]/[i,i,l,l] = 0.7333".into())
}

fn determinism(ws: &Workspace) -> Check {
    let mut checked = Vec::new();
    let mut ipet = oracle_config(ws)?;
    ipet.task = Task::Ipet;
    ipet.pvps = vec!["P1".into(), "P2".into()];
    ipet.labeled_size = 20;
    ipet.name = "oracle-ipet".into();
    let configs = [oracle_config(ws)?, tiny_config(ws, 100, 2)?, ipet];
    for base in configs {
        let mut outputs = Vec::new();
        for run in 0..2 {
            let mut c = base.clone();
            c.output_dir = ws.path(&format!("determinism-{}-{run}", base.name));
            let out = run_experiment(&c).map_err(err)?;
            let path = out.predictions.ok_or("no predictions file")?;
            outputs.push(fs::read(&path).map_err(err)?);
        }
        ensure(outputs[0] == outputs[1], || format!("{}: prediction files differ", base.name))?;
        checked.push(base.name.clone());
    }
    Ok(format!("byte-identical predictions on rerun: {}", checked.join(", ")))
}

fn main() -> ExitCode {
    let ws = match Workspace::new() {
        Ok(ws) => ws,
        Err(e) => {
            eprintln!("cannot create workspace: {e}");
            return ExitCode::FAILURE;
        }
    };
    type Criterion<'a> = (&'a str, Duration, Box<dyn Fn() -> Check + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("pattern goldens", Duration::from_secs(1), Box::new(pattern_goldens)),
        ("probability law", Duration::from_secs(1), Box::new(probability_law)),
        ("distillation oracle", Duration::from_secs(5), Box::new(distillation_oracle)),
        ("oracle end-to-end", Duration::from_secs(30), Box::new(|| oracle_end_to_end(&ws))),
        ("tiny zero-shot learning", Duration::from_secs(300), Box::new(|| tiny_zero_shot(&ws))),
        ("iPET mechanics", Duration::from_secs(30), Box::new(ipet_mechanics)),
        ("BERTRAM properties", Duration::from_secs(180), Box::new(bertram_properties)),
        ("injection round-trip", Duration::from_secs(5), Box::new(injection_round_trip)),
        ("metric correctness", Duration::from_secs(1), Box::new(metric_correctness)),
        ("determinism", Duration::from_secs(300), Box::new(|| determinism(&ws))),
    ];
    let mut failed = 0;
    for (name, limit, check) in &criteria {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > *limit => Err(format!("{detail}; took {elapsed:.1?}, limit {limit:?}")),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS {name} ({elapsed:.2?}): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({elapsed:.2?}): {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
