use std::collections::HashMap;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use super::config::{ExperimentConfig, Task};
use super::metrics::{per_language_report, render_table, Report};
use super::HarnessError;
use crate::adapter::{
    pre_tokenize, AdapterError, AdapterHandle, BackendKind, MaskedLanguageModel, OracleMlm,
    TinyConfig, TinyMlm, Tokenizer, Vocabulary,
};
use crate::bertram::{
    inject_embeddings, load_embeddings, read_embeddings, save_embeddings, BertramModel,
    MWEEmbedding, NGramTable,
};
use crate::corpus::{
    harvest_contexts, load_dataset_with, sample_labeled, unlabeled_pool, CorpusError, Example,
    LoadOptions, SplitName,
};
use crate::ipet::{run_ipet, save_audit_log};
use crate::pet::{load_predictions, predict, run_pet, save_predictions, BackendFactory, FinalClassifier, PetOutcome};
use crate::pvp::{select_pvps, PatternVerbalizerPair};
use crate::{Error, Label};

/// Files written by a run.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub output_dir: PathBuf,
    pub predictions: Option<PathBuf>,
    pub report: Option<Report>,
    pub files: Vec<PathBuf>,
}

impl Artifacts {
    fn record(&mut self, path: PathBuf) -> PathBuf {
        self.files.push(path.clone());
        path
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Runs `config` with the built-in backends.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Artifacts, Error> {
    run_experiment_with(config, None)
}

/// Runs `config`; `external` supplies the backend when `backend = "external"`.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    external: Option<&BackendFactory<'_>>,
) -> Result<Artifacts, Error> {
    config.validate()?;
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut artifacts = Artifacts {
        output_dir: out.clone(),
        ..Artifacts::default()
    };
    let started = now();
    let snapshot = artifacts.record(out.join("config.toml"));
    write_file(&snapshot, &config.to_toml())?;
    match config.task {
        Task::Pet | Task::Ipet => run_training(config, external, &mut artifacts)?,
        Task::BertramTrain => run_bertram_train(config, &mut artifacts)?,
        Task::BertramInject => run_bertram_inject(config, &mut artifacts)?,
        Task::Evaluate => {
            let eval = load_split(config, config.data.eval.as_deref(), SplitName::Eval)?;
            let path = config.data.predictions.as_deref().expect("validated");
            let preds = load_predictions(path, &config.labels)?;
            let report = evaluate_predictions(&preds, &eval, config)?;
            artifacts.report = Some(report);
        }
    }
    if let Some(mut report) = artifacts.report.take() {
        report.metadata.config_hash = Some(config.hash());
        report.metadata.seeds = config.seeds.clone();
        report.metadata.started_unix = Some(started);
        report.metadata.finished_unix = Some(now());
        let json = artifacts.record(out.join("report.json"));
        write_file(&json, &report.to_json())?;
        let table = artifacts.record(out.join("report.txt"));
        write_file(&table, &render_table(&[(config.name.as_str(), &report)]))?;
        artifacts.report = Some(report);
    }
    Ok(artifacts)
}

fn load_split(config: &ExperimentConfig, path: Option<&Path>, split: SplitName) -> Result<Vec<Example>, Error> {
    let options = LoadOptions {
        labels: config.labels.clone(),
        ..LoadOptions::default()
    };
    let path = path.expect("validated");
    Ok(load_dataset_with(path, split, &options)?.examples)
}

/// Scores predictions against a labeled split, matching rows by id.
pub fn evaluate_predictions(
    predictions: &[(String, Label)],
    gold: &[Example],
    config: &ExperimentConfig,
) -> Result<Report, HarnessError> {
    let by_id: HashMap<&str, Label> = predictions.iter().map(|(id, l)| (id.as_str(), *l)).collect();
    let mut preds = Vec::with_capacity(gold.len());
    let mut golds = Vec::with_capacity(gold.len());
    let mut langs = Vec::with_capacity(gold.len());
    for ex in gold {
        let label = ex
            .label
            .ok_or_else(|| HarnessError::InvalidArgument(format!("gold example {} has no label", ex.id)))?;
        let pred = by_id
            .get(ex.id.as_str())
            .ok_or_else(|| HarnessError::InvalidArgument(format!("no prediction for example {}", ex.id)))?;
        preds.push(*pred);
        golds.push(label);
        langs.push(ex.language.clone());
    }
    let mut report = per_language_report(&preds, &golds, &langs, config.overall)?;
    report.metadata.settings.insert("task".into(), config.task.to_string());
    Ok(report)
}

pub fn load_report(path: &Path) -> Result<Report, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Report(format!("{}: {e}", path.display())))
}

/// The vocabulary a tiny backend is built with: every word of `texts`, the
/// pattern text and the verbalizer tokens.
pub fn tiny_factory_parts<'a, I>(texts: I, pvps: &[PatternVerbalizerPair]) -> Tokenizer
where
    I: IntoIterator<Item = &'a str>,
{
    let mut extra: Vec<String> = Vec::new();
    for p in pvps {
        extra.extend(pre_tokenize(p.pattern.template()));
        extra.push(p.verbalizer.literal_token().to_string());
        extra.push(p.verbalizer.idiom_token().to_string());
    }
    let extra_refs: Vec<&str> = extra.iter().map(String::as_str).collect();
    Tokenizer::new(Vocabulary::build(texts, &extra_refs, 1))
}

fn run_training(
    config: &ExperimentConfig,
    external: Option<&BackendFactory<'_>>,
    artifacts: &mut Artifacts,
) -> Result<(), Error> {
    let train = load_split(config, config.data.train.as_deref(), SplitName::Train)?;
    let eval = load_split(config, config.data.eval.as_deref(), SplitName::Eval)?;
    let (labeled, rest) = sample_labeled(&train, config.labeled_size, config.seed)?;
    let pool = unlabeled_pool(&rest, config.unlabeled_size, config.seed);
    let available = config.available_pvps()?;
    let pvps = select_pvps(&available, &config.pvps)?;
    let final_pvp = select_pvps(&available, std::slice::from_ref(&config.final_pvp))?.remove(0);

    let tokenizer = tiny_factory_parts(
        train.iter().chain(&eval).map(|e| e.sentence.as_str()),
        &available,
    );
    let tiny_config: TinyConfig = config.tiny.clone();
    let tiny = |seed: u64| -> Result<AdapterHandle, AdapterError> {
        Ok(Box::new(TinyMlm::new(tokenizer.clone(), tiny_config.clone(), seed)))
    };
    let gold: HashMap<String, Label> = train
        .iter()
        .chain(&eval)
        .filter_map(|e| e.label.map(|l| (e.id.clone(), l)))
        .collect();
    let oracle = |_seed: u64| -> Result<AdapterHandle, AdapterError> {
        Ok(Box::new(OracleMlm::new(tokenizer.clone(), tiny_config.width, gold.clone())))
    };
    let (members, distill): (&BackendFactory<'_>, &BackendFactory<'_>) = match config.backend {
        BackendKind::Tiny => (&tiny, &tiny),
        // The oracle cannot be trained, so its soft labels are distilled into
        // a tiny model.
        BackendKind::Oracle => (&oracle, &tiny),
        BackendKind::External => {
            let f = external.ok_or(HarnessError::Backend(BackendKind::External))?;
            (f, f)
        }
    };

    let outcome: PetOutcome = match config.task {
        Task::Pet => run_pet(
            &pvps,
            &labeled,
            &pool,
            &config.seeds,
            members,
            distill,
            &config.train,
            &final_pvp,
            &config.pet,
            config.seed,
        )?,
        _ => {
            let result = run_ipet(
                &pvps,
                &labeled,
                &pool,
                &config.ipet,
                &config.seeds,
                members,
                distill,
                &config.train,
                &final_pvp,
                &config.pet,
                config.seed,
            )?;
            let audit: Vec<_> = result
                .ipet
                .generations
                .iter()
                .flat_map(|g| g.audit.iter().cloned())
                .collect();
            let path = artifacts.record(config.output_dir.join("ipet_audit.tsv"));
            save_audit_log(&path, &audit, &config.labels)?;
            for g in &result.ipet.generations {
                for w in &g.warnings {
                    log::warn!("generation {}: {w}", g.generation);
                }
            }
            result.pet
        }
    };

    let failures: Vec<String> = outcome
        .annotations
        .iter()
        .flat_map(|a| &a.failures)
        .map(|f| format!("{}\t{}\t{}", f.example_id, f.member, f.error))
        .collect();
    if !failures.is_empty() {
        let path = artifacts.record(config.output_dir.join("annotation_failures.tsv"));
        write_file(&path, &format!("example_id\tmember\terror\n{}\n", failures.join("\n")))?;
    }
    save_classifier(&outcome.classifier, config, artifacts)?;

    let mut predictions = Vec::with_capacity(eval.len());
    for ex in &eval {
        predictions.push((ex.id.clone(), predict(&outcome.classifier, ex)?));
    }
    let path = artifacts.record(config.output_dir.join("predictions.tsv"));
    save_predictions(&path, &predictions, &config.labels)?;
    artifacts.predictions = Some(path);

    if eval.iter().all(|e| e.label.is_some()) {
        let mut report = evaluate_predictions(&predictions, &eval, config)?;
        let s = &mut report.metadata.settings;
        s.insert("backend".into(), config.backend.to_string());
        s.insert("pvps".into(), config.pvps.join(","));
        s.insert("final_pvp".into(), config.final_pvp.clone());
        s.insert("labeled_size".into(), config.labeled_size.to_string());
        s.insert("unlabeled_size".into(), pool.len().to_string());
        s.insert("ensemble_weighting".into(), format!("{:?}", config.pet.weighting));
        s.insert("seed_combination".into(), format!("{:?}", config.pet.seed_combination));
        s.insert("distill_temperature".into(), config.pet.temperature.to_string());
        if config.task == Task::Ipet {
            s.insert("ipet_generations".into(), config.ipet.generations.to_string());
            s.insert("ipet_growth_factor".into(), config.ipet.growth_factor.to_string());
        }
        artifacts.report = Some(report);
    }
    Ok(())
}

fn save_classifier(
    classifier: &FinalClassifier,
    config: &ExperimentConfig,
    artifacts: &mut Artifacts,
) -> Result<(), Error> {
    let dir = config.output_dir.join("checkpoints");
    for (i, adapter) in classifier.adapters.iter().enumerate() {
        if let Some(tiny) = adapter.as_tiny() {
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let path = artifacts.record(dir.join(format!("final-{i}.bin")));
            tiny.save_checkpoint(&path)?;
        }
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>, HarnessError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    std::io::BufReader::new(file)
        .lines()
        .map(|l| l.map(|s| s.trim().to_string()).map_err(io_err(path)))
        .filter(|l| !matches!(l, Ok(s) if s.is_empty()))
        .collect()
}

/// Gold vectors for mimic training. The words file either lists one word per
/// line (gold = the encoder's own input embedding) or is an embedding TSV.
fn gold_words(path: &Path, encoder: &TinyMlm) -> Result<Vec<(String, Vec<f64>)>, Error> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    if text.starts_with("mwe\tdim") {
        return Ok(read_embeddings(text.as_bytes())?
            .into_iter()
            .map(|e| (e.mwe, e.vector))
            .collect());
    }
    let mut out = Vec::new();
    for word in read_lines(path)? {
        match encoder.tokenizer().vocab().id(&word) {
            Some(id) => out.push((word, encoder.input_embedding(id).to_vec())),
            None => log::warn!("training word {word:?} is not an encoder token and is skipped"),
        }
    }
    Ok(out)
}

fn run_bertram_train(config: &ExperimentConfig, artifacts: &mut Artifacts) -> Result<(), Error> {
    let corpus = config.data.corpus.as_deref().expect("validated");
    let encoder = match &config.data.encoder {
        Some(p) => TinyMlm::load_checkpoint(p)?,
        None => {
            let lines = read_lines(corpus)?;
            TinyMlm::from_texts(lines.iter().map(String::as_str), &[], config.tiny.clone(), config.seed)
        }
    };
    let words = gold_words(config.data.words.as_deref().expect("validated"), &encoder)?;
    let mwes = match &config.data.mwes {
        Some(p) => read_lines(p)?,
        None => Vec::new(),
    };
    let b = &config.bertram;
    let table = NGramTable::for_forms(
        words.iter().map(|(w, _)| w.as_str()).chain(mwes.iter().map(String::as_str)),
        b.n_min,
        b.n_max,
        encoder.embedding_dim(),
        b.ngram_init_std,
        config.seed,
    )?;
    let mut model = BertramModel::new(encoder, table)?;
    let report = model.train_mimic_from_corpus(&words, corpus, b.train.max_contexts, &b.train, config.seed)?;
    log::info!(
        "mimic loss {:.6} -> {:.6} over {} words",
        report.initial_loss,
        report.final_loss,
        words.len() - report.excluded.len()
    );
    let path = artifacts.record(config.output_dir.join("bertram.bin"));
    model.save(&path)?;
    let path = artifacts.record(config.output_dir.join("encoder.bin"));
    model.encoder().save_checkpoint(&path)?;
    let summary = serde_json::json!({
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
        "steps": report.step_losses.len(),
        "excluded": report.excluded,
    });
    let path = artifacts.record(config.output_dir.join("mimic_report.json"));
    write_file(&path, &serde_json::to_string_pretty(&summary).expect("json"))?;

    if !mwes.is_empty() {
        let mut embeddings: Vec<MWEEmbedding> = Vec::new();
        for mwe in &mwes {
            let contexts = match harvest_contexts(corpus, mwe, b.contexts_per_mwe) {
                Ok(c) => c,
                Err(CorpusError::NoContexts { .. }) => {
                    log::warn!("no contexts for {mwe:?}; not embedded");
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            embeddings.push(model.infer_embedding(mwe, &contexts)?.embedding);
        }
        let path = artifacts.record(config.output_dir.join("embeddings.tsv"));
        save_embeddings(&path, &embeddings)?;
    }
    Ok(())
}

fn run_bertram_inject(config: &ExperimentConfig, artifacts: &mut Artifacts) -> Result<(), Error> {
    let encoder = TinyMlm::load_checkpoint(config.data.encoder.as_deref().expect("validated"))?;
    let embeddings = load_embeddings(config.data.embeddings.as_deref().expect("validated"))?;
    let mut adapter: AdapterHandle = Box::new(encoder);
    let report = inject_embeddings(adapter.as_mut(), &embeddings, config.bertram.overwrite)?;
    let tiny = adapter.as_tiny().expect("tiny backend");
    let path = artifacts.record(config.output_dir.join("encoder_injected.bin"));
    tiny.save_checkpoint(&path)?;
    let summary = serde_json::json!({
        "base_vocabulary": report.base_len,
        "vocabulary": tiny.tokenizer().vocab().len(),
        "added": report.added.iter().map(|(f, id)| serde_json::json!({"token": f, "id": id})).collect::<Vec<_>>(),
        "replaced": report.replaced.iter().map(|(f, id)| serde_json::json!({"token": f, "id": id})).collect::<Vec<_>>(),
    });
    let path = artifacts.record(config.output_dir.join("injection.json"));
    write_file(&path, &serde_json::to_string_pretty(&summary).expect("json"))?;
    Ok(())
}
