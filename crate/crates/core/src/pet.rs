//! Pattern-exploiting training: one model per PVP and seed, soft labels over
//! an unlabeled pool from the ensemble mean, and distillation into a single
//! classifier.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{
    class_probs, fine_tune, fine_tune_soft, AdapterError, AdapterHandle, ClassDistribution,
    TrainHyper, TrainReport, TrainTarget,
};
use crate::corpus::{Example, LabelEncoding};
use crate::pvp::PatternVerbalizerPair;
use crate::Label;

#[derive(Debug, Error)]
pub enum PetError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("member {member}: {source}")]
    Member {
        member: String,
        #[source]
        source: AdapterError,
    },
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error("every example failed under every ensemble member")]
    NothingAnnotated,
    #[error("prediction file: {0}")]
    Predictions(String),
    #[error("prediction file I/O: {0}")]
    Io(#[from] io::Error),
}

/// Creates a fresh backend instance for a seed.
pub type BackendFactory<'a> = dyn Fn(u64) -> Result<AdapterHandle, AdapterError> + Sync + 'a;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Unweighted mean over members.
    #[default]
    Uniform,
    /// Each member weighted by its accuracy on the labeled training set.
    TrainAccuracy,
}

/// How the per-seed repetitions are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedCombination {
    /// All members (every PVP × seed) label one pool; one classifier is distilled.
    #[default]
    Pooled,
    /// One classifier distilled per seed; their distributions are averaged.
    PerSeed,
}

#[derive(Debug, Clone)]
pub struct EnsembleMember {
    pub pvp: PatternVerbalizerPair,
    pub seed: u64,
    pub adapter: AdapterHandle,
    pub weight: f64,
    /// `None` when the backend is not trainable and the member is used as is.
    pub report: Option<TrainReport>,
}

impl EnsembleMember {
    pub fn name(&self) -> String {
        format!("{}/seed{}", self.pvp.id(), self.seed)
    }
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub members: Vec<EnsembleMember>,
}

impl Ensemble {
    pub fn new(members: Vec<EnsembleMember>) -> Result<Self, PetError> {
        if members.is_empty() {
            return Err(PetError::InvalidArgument("ensemble has no members".into()));
        }
        let mut seen = HashSet::new();
        for m in &members {
            if !seen.insert((m.pvp.id().to_string(), m.seed)) {
                return Err(PetError::InvalidArgument(format!(
                    "duplicate member {}",
                    m.name()
                )));
            }
        }
        Ok(Ensemble { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Sets member weights to their accuracy on `labeled` (or 1 for uniform).
    pub fn apply_weighting(
        &mut self,
        weighting: Weighting,
        labeled: &[Example],
    ) -> Result<(), PetError> {
        for m in &mut self.members {
            m.weight = match weighting {
                Weighting::Uniform => 1.0,
                Weighting::TrainAccuracy => {
                    let mut correct = 0usize;
                    for ex in labeled {
                        let p = class_probs(m.adapter.as_ref(), &m.pvp, ex)?;
                        correct += usize::from(Some(p.argmax()) == ex.label);
                    }
                    correct as f64 / labeled.len().max(1) as f64
                }
            };
        }
        Ok(())
    }
}

fn check_unique_seeds(seeds: &[u64]) -> Result<(), PetError> {
    let mut seen = HashSet::new();
    for s in seeds {
        if !seen.insert(*s) {
            return Err(PetError::InvalidArgument(format!("duplicate seed {s}")));
        }
    }
    Ok(())
}

/// Trains one member per (PVP, seed), each from a fresh backend instance.
///
/// Backends that cannot be trained (the oracle) are used as is.
pub fn train_ensemble(
    pvps: &[PatternVerbalizerPair],
    labeled: &[Example],
    seeds: &[u64],
    factory: &BackendFactory<'_>,
    hyper: &TrainHyper,
) -> Result<Ensemble, PetError> {
    if pvps.is_empty() {
        return Err(PetError::InvalidArgument("no PVPs given".into()));
    }
    if seeds.is_empty() {
        return Err(PetError::InvalidArgument("no seeds given".into()));
    }
    if labeled.is_empty() {
        return Err(PetError::InvalidArgument("labeled set is empty".into()));
    }
    check_unique_seeds(seeds)?;
    let mut members = Vec::with_capacity(pvps.len() * seeds.len());
    for pvp in pvps {
        for &seed in seeds {
            let member = format!("{}/seed{seed}", pvp.id());
            let wrap = |source| PetError::Member {
                member: member.clone(),
                source,
            };
            let mut adapter = factory(seed).map_err(wrap)?;
            let report = if adapter.is_trainable() {
                Some(fine_tune(adapter.as_mut(), pvp, labeled, hyper, seed).map_err(wrap)?)
            } else {
                log::debug!("{member}: {} backend is not trainable, used as is", adapter.backend_kind());
                None
            };
            members.push(EnsembleMember {
                pvp: pvp.clone(),
                seed,
                adapter,
                weight: 1.0,
                report,
            });
        }
    }
    Ensemble::new(members)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabeledSet {
    pub entries: Vec<(Example, ClassDistribution)>,
}

impl SoftLabeledSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationFailure {
    pub example_id: String,
    pub member: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub set: SoftLabeledSet,
    /// Every (example, member) pair that failed. Examples appear in `set`
    /// unless they failed under all members.
    pub failures: Vec<AnnotationFailure>,
}

/// Weighted mean of member distributions. With uniform weights this is the
/// plain arithmetic mean.
fn combine(dists: &[(f64, ClassDistribution)]) -> ClassDistribution {
    let total: f64 = dists.iter().map(|(w, _)| w).sum();
    if total <= 0.0 {
        return ClassDistribution::uniform();
    }
    let p_idiomatic = dists.iter().map(|(w, d)| w * d.p_idiomatic).sum::<f64>() / total;
    let p_literal = dists.iter().map(|(w, d)| w * d.p_literal).sum::<f64>() / total;
    ClassDistribution {
        p_idiomatic,
        p_literal,
    }
}

/// Soft labels for `unlabeled` from the ensemble, in input order.
pub fn soft_annotate(ensemble: &Ensemble, unlabeled: &[Example]) -> Result<Annotation, PetError> {
    if ensemble.is_empty() {
        return Err(PetError::InvalidArgument("ensemble has no members".into()));
    }
    let mut ids = HashSet::new();
    for ex in unlabeled {
        if !ids.insert(ex.id.as_str()) {
            return Err(PetError::InvalidArgument(format!(
                "duplicate example id {}",
                ex.id
            )));
        }
    }
    let mut entries = Vec::with_capacity(unlabeled.len());
    let mut failures = Vec::new();
    for ex in unlabeled {
        let mut dists = Vec::with_capacity(ensemble.len());
        for m in &ensemble.members {
            match class_probs(m.adapter.as_ref(), &m.pvp, ex) {
                Ok(d) => dists.push((m.weight, d)),
                Err(e) => failures.push(AnnotationFailure {
                    example_id: ex.id.clone(),
                    member: m.name(),
                    error: e.to_string(),
                }),
            }
        }
        if !dists.is_empty() {
            entries.push((ex.clone(), combine(&dists)));
        }
    }
    Ok(Annotation {
        set: SoftLabeledSet { entries },
        failures,
    })
}

/// The distilled model: it reads the cloze format of one designated PVP.
/// Holding several adapters means their distributions are averaged.
#[derive(Debug, Clone)]
pub struct FinalClassifier {
    pub adapters: Vec<AdapterHandle>,
    pub pvp: PatternVerbalizerPair,
    pub reports: Vec<TrainReport>,
}

impl FinalClassifier {
    pub fn distribution(&self, example: &Example) -> Result<ClassDistribution, PetError> {
        let dists = self
            .adapters
            .iter()
            .map(|a| Ok((1.0, class_probs(a.as_ref(), &self.pvp, example)?)))
            .collect::<Result<Vec<_>, PetError>>()?;
        Ok(combine(&dists))
    }

    pub fn fingerprint(&self) -> String {
        self.adapters
            .iter()
            .map(|a| a.fingerprint())
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// Trains `backend` against the soft targets with cross entropy.
pub fn distill(
    softset: &SoftLabeledSet,
    mut backend: AdapterHandle,
    pvp: &PatternVerbalizerPair,
    hyper: &TrainHyper,
    temperature: f64,
    seed: u64,
) -> Result<FinalClassifier, PetError> {
    if softset.is_empty() {
        return Err(PetError::InvalidArgument("soft-labeled set is empty".into()));
    }
    if temperature <= 0.0 {
        return Err(PetError::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let targets: Vec<TrainTarget> = softset
        .entries
        .iter()
        .map(|(ex, d)| TrainTarget {
            example: ex.clone(),
            target: d.with_temperature(temperature),
        })
        .collect();
    let report = fine_tune_soft(backend.as_mut(), pvp, &targets, hyper, seed)?;
    Ok(FinalClassifier {
        adapters: vec![backend],
        pvp: pvp.clone(),
        reports: vec![report],
    })
}

/// Argmax of the classifier's distribution; an exact tie is literal.
pub fn predict(classifier: &FinalClassifier, example: &Example) -> Result<Label, PetError> {
    Ok(classifier.distribution(example)?.argmax())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PetOptions {
    pub weighting: Weighting,
    pub temperature: f64,
    pub seed_combination: SeedCombination,
    pub distill: TrainHyper,
}

impl Default for PetOptions {
    fn default() -> Self {
        PetOptions {
            weighting: Weighting::Uniform,
            temperature: 1.0,
            seed_combination: SeedCombination::Pooled,
            distill: TrainHyper::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PetOutcome {
    pub ensemble: Ensemble,
    pub annotations: Vec<Annotation>,
    pub classifier: FinalClassifier,
}

/// Distills an already trained ensemble according to `options`.
pub fn distill_ensemble(
    mut ensemble: Ensemble,
    labeled: &[Example],
    unlabeled: &[Example],
    final_pvp: &PatternVerbalizerPair,
    distill_factory: &BackendFactory<'_>,
    options: &PetOptions,
    seed: u64,
) -> Result<PetOutcome, PetError> {
    ensemble.apply_weighting(options.weighting, labeled)?;
    let groups: Vec<Ensemble> = match options.seed_combination {
        SeedCombination::Pooled => vec![ensemble.clone()],
        SeedCombination::PerSeed => {
            let mut seeds: Vec<u64> = ensemble.members.iter().map(|m| m.seed).collect();
            seeds.dedup();
            let mut unique = Vec::new();
            for s in seeds {
                if !unique.contains(&s) {
                    unique.push(s);
                }
            }
            unique
                .into_iter()
                .map(|s| {
                    Ensemble::new(
                        ensemble
                            .members
                            .iter()
                            .filter(|m| m.seed == s)
                            .cloned()
                            .collect(),
                    )
                })
                .collect::<Result<_, _>>()?
        }
    };
    let mut annotations = Vec::new();
    let mut adapters = Vec::new();
    let mut reports = Vec::new();
    for (i, group) in groups.iter().enumerate() {
        let annotation = soft_annotate(group, unlabeled)?;
        if annotation.set.is_empty() {
            return Err(PetError::NothingAnnotated);
        }
        let distill_seed = crate::rng::derive_seed(seed, &format!("distill-{i}"));
        let backend = distill_factory(distill_seed)?;
        let mut classifier = distill(
            &annotation.set,
            backend,
            final_pvp,
            &options.distill,
            options.temperature,
            distill_seed,
        )?;
        adapters.append(&mut classifier.adapters);
        reports.append(&mut classifier.reports);
        annotations.push(annotation);
    }
    Ok(PetOutcome {
        ensemble,
        annotations,
        classifier: FinalClassifier {
            adapters,
            pvp: final_pvp.clone(),
            reports,
        },
    })
}

/// The full PET recipe: train the ensemble, label the pool, distill.
///
/// `distill_factory` builds the final classifier's backend; it is usually the
/// member factory, except for non-trainable member backends.
#[allow(clippy::too_many_arguments)]
pub fn run_pet(
    pvps: &[PatternVerbalizerPair],
    labeled: &[Example],
    unlabeled: &[Example],
    seeds: &[u64],
    factory: &BackendFactory<'_>,
    distill_factory: &BackendFactory<'_>,
    member_hyper: &TrainHyper,
    final_pvp: &PatternVerbalizerPair,
    options: &PetOptions,
    seed: u64,
) -> Result<PetOutcome, PetError> {
    let ensemble = train_ensemble(pvps, labeled, seeds, factory, member_hyper)?;
    distill_ensemble(ensemble, labeled, unlabeled, final_pvp, distill_factory, options, seed)
}

pub fn write_predictions<W: Write>(
    out: &mut W,
    predictions: &[(String, Label)],
    labels: &LabelEncoding,
) -> io::Result<()> {
    writeln!(out, "id\tlabel")?;
    for (id, label) in predictions {
        writeln!(out, "{id}\t{}", labels.encode(*label))?;
    }
    Ok(())
}

pub fn save_predictions(
    path: &Path,
    predictions: &[(String, Label)],
    labels: &LabelEncoding,
) -> Result<(), PetError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_predictions(&mut out, predictions, labels)?;
    out.flush()?;
    Ok(())
}

pub fn read_predictions<R: BufRead>(
    reader: R,
    labels: &LabelEncoding,
) -> Result<Vec<(String, Label)>, PetError> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| PetError::Predictions("empty file".into()))??;
    if header.trim_end_matches('\r') != "id\tlabel" {
        return Err(PetError::Predictions(format!(
            "expected header `id<TAB>label`, found {header:?}"
        )));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let (id, value) = line
            .split_once('\t')
            .ok_or_else(|| PetError::Predictions(format!("row {}: expected two fields", i + 2)))?;
        let label = labels
            .decode(value)
            .ok_or_else(|| PetError::Predictions(format!("row {}: bad label {value:?}", i + 2)))?;
        out.push((id.to_string(), label));
    }
    Ok(out)
}

pub fn load_predictions(path: &Path, labels: &LabelEncoding) -> Result<Vec<(String, Label)>, PetError> {
    read_predictions(BufReader::new(File::open(path)?), labels)
}
