//! Iterative PET: members retrain over generations on training sets grown
//! from the confident predictions of other members.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{class_probs, fine_tune, AdapterError, ClassDistribution, TrainHyper};
use crate::corpus::{Example, LabelEncoding};
use crate::pet::{
    distill_ensemble, train_ensemble, BackendFactory, Ensemble, EnsembleMember, PetError,
    PetOptions, PetOutcome,
};
use crate::pvp::PatternVerbalizerPair;
use crate::rng;
use crate::Label;

#[derive(Debug, Error)]
pub enum IpetError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Pet(#[from] PetError),
    #[error("generation {generation}, member {member}: {source}")]
    Member {
        generation: usize,
        member: String,
        #[source]
        source: AdapterError,
    },
    #[error("audit log I/O: {0}")]
    Io(#[from] io::Error),
}

/// Target idiomatic:literal ratio of generated training sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassRatio {
    pub idiomatic: f64,
    pub literal: f64,
}

impl Default for ClassRatio {
    fn default() -> Self {
        ClassRatio {
            idiomatic: 1.0,
            literal: 1.0,
        }
    }
}

impl ClassRatio {
    fn validate(&self) -> Result<(), IpetError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.idiomatic) && ok(self.literal) {
            Ok(())
        } else {
            Err(IpetError::InvalidArgument(format!(
                "class ratio entries must be positive, got {}:{}",
                self.idiomatic, self.literal
            )))
        }
    }

    /// Splits `n` into (idiomatic, literal) counts.
    pub fn split(&self, n: usize) -> (usize, usize) {
        let share = self.idiomatic / (self.idiomatic + self.literal);
        let idiomatic = ((n as f64) * share).round() as usize;
        let idiomatic = idiomatic.min(n);
        (idiomatic, n - idiomatic)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationPlan {
    /// Rounds of self-training after generation 0.
    pub generations: usize,
    pub growth_factor: f64,
    pub class_ratio: ClassRatio,
}

impl Default for GenerationPlan {
    fn default() -> Self {
        GenerationPlan {
            generations: 2,
            growth_factor: 5.0,
            class_ratio: ClassRatio::default(),
        }
    }
}

impl GenerationPlan {
    pub fn validate(&self) -> Result<(), IpetError> {
        if self.generations == 0 {
            return Err(IpetError::InvalidArgument("generations must be at least 1".into()));
        }
        if !(self.growth_factor.is_finite() && self.growth_factor > 1.0) {
            return Err(IpetError::InvalidArgument(format!(
                "growth factor must exceed 1, got {}",
                self.growth_factor
            )));
        }
        self.class_ratio.validate()
    }

    /// `min(|L|·d^g, |L| + |pool|)`.
    pub fn target_size(&self, labeled: usize, pool: usize, generation: usize) -> usize {
        let grown = labeled as f64 * self.growth_factor.powi(generation as i32);
        let cap = labeled + pool;
        if grown >= cap as f64 {
            cap
        } else {
            grown.round() as usize
        }
    }
}

/// Provenance of one pseudo-labeled example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub generation: usize,
    pub member: String,
    pub example_id: String,
    pub pseudo_label: Label,
    pub confidence: f64,
    pub labeling_member: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSet {
    /// Seed set first, then pseudo-labeled examples in pool order.
    pub examples: Vec<Example>,
    pub audit: Vec<AuditRecord>,
    pub warnings: Vec<String>,
}

/// Frozen predictions of every member on the pool; `None` where rendering
/// or inference failed.
#[derive(Debug, Clone)]
pub struct PoolPredictions {
    pub by_member: Vec<Vec<Option<ClassDistribution>>>,
}

impl PoolPredictions {
    pub fn compute(ensemble: &Ensemble, unlabeled: &[Example]) -> Self {
        let by_member = ensemble
            .members
            .iter()
            .map(|m| {
                unlabeled
                    .iter()
                    .map(|ex| class_probs(m.adapter.as_ref(), &m.pvp, ex).ok())
                    .collect()
            })
            .collect();
        PoolPredictions { by_member }
    }
}

struct Candidate {
    index: usize,
    label: Label,
    confidence: f64,
    labeler: usize,
}

/// Builds the training set of member `self_index` for `generation`.
#[allow(clippy::too_many_arguments)]
pub fn next_training_set(
    models: &Ensemble,
    self_index: usize,
    unlabeled: &[Example],
    labeled_seed_set: &[Example],
    target_size: usize,
    ratio: ClassRatio,
    seed: u64,
    generation: usize,
) -> Result<GeneratedSet, IpetError> {
    let preds = PoolPredictions::compute(models, unlabeled);
    next_training_set_from(
        models,
        &preds,
        self_index,
        unlabeled,
        labeled_seed_set,
        target_size,
        ratio,
        seed,
        generation,
    )
}

/// As [`next_training_set`], reading precomputed pool predictions.
#[allow(clippy::too_many_arguments)]
pub fn next_training_set_from(
    models: &Ensemble,
    preds: &PoolPredictions,
    self_index: usize,
    unlabeled: &[Example],
    labeled_seed_set: &[Example],
    target_size: usize,
    ratio: ClassRatio,
    seed: u64,
    generation: usize,
) -> Result<GeneratedSet, IpetError> {
    let m = models.len();
    if m < 2 {
        return Err(IpetError::InvalidArgument(
            "iPET needs at least two members so none labels its own data".into(),
        ));
    }
    if self_index >= m {
        return Err(IpetError::InvalidArgument(format!(
            "member index {self_index} out of range for {m} members"
        )));
    }
    if target_size < labeled_seed_set.len() {
        return Err(IpetError::InvalidArgument(format!(
            "target size {target_size} is below the seed set size {}",
            labeled_seed_set.len()
        )));
    }
    ratio.validate()?;
    let target_size = target_size.min(labeled_seed_set.len() + unlabeled.len());
    let needed = target_size - labeled_seed_set.len();

    let member_name = models.members[self_index].name();
    let mut rng = rng::derive(seed, &format!("ipet/gen{generation}/member{self_index}"));
    let mut by_class: [Vec<Candidate>; 2] = [Vec::new(), Vec::new()];
    let mut warnings = Vec::new();
    let mut failed = 0usize;
    for index in 0..unlabeled.len() {
        // Uniform over the other m-1 members.
        let mut labeler = rng.gen_range(0..m - 1);
        if labeler >= self_index {
            labeler += 1;
        }
        match preds.by_member[labeler][index] {
            Some(d) => {
                let label = d.argmax();
                by_class[class_slot(label)].push(Candidate {
                    index,
                    label,
                    confidence: d.confidence(),
                    labeler,
                });
            }
            None => failed += 1,
        }
    }
    if failed > 0 {
        warnings.push(format!(
            "{member_name}: {failed} pool examples could not be labeled and were skipped"
        ));
    }
    for pool in &mut by_class {
        pool.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.index.cmp(&b.index)));
    }

    let (want_i, want_l) = ratio.split(needed);
    let mut take = [want_i.min(by_class[0].len()), want_l.min(by_class[1].len())];
    let shortfall = needed - take[0] - take[1];
    if shortfall > 0 {
        for (slot, want) in [(0, want_i), (1, want_l)] {
            if take[slot] < want {
                warnings.push(format!(
                    "{member_name}: only {} {} candidates for {want} requested",
                    take[slot],
                    Label::ALL[slot]
                ));
            }
        }
        // Backfill from whichever class has candidates left.
        let mut remaining = shortfall;
        for slot in 0..2 {
            let extra = remaining.min(by_class[slot].len() - take[slot]);
            take[slot] += extra;
            remaining -= extra;
        }
        if remaining > 0 {
            warnings.push(format!(
                "{member_name}: pool exhausted, training set is {remaining} short of {target_size}"
            ));
        } else {
            warnings.push(format!(
                "{member_name}: filled {shortfall} slots from the other class"
            ));
        }
    }

    let mut chosen: Vec<&Candidate> = by_class
        .iter()
        .zip(take)
        .flat_map(|(pool, n)| pool.iter().take(n))
        .collect();
    chosen.sort_by_key(|c| c.index);

    let mut examples = labeled_seed_set.to_vec();
    let mut audit = Vec::with_capacity(chosen.len());
    for c in chosen {
        examples.push(unlabeled[c.index].clone().with_label(c.label));
        audit.push(AuditRecord {
            generation,
            member: member_name.clone(),
            example_id: unlabeled[c.index].id.clone(),
            pseudo_label: c.label,
            confidence: c.confidence,
            labeling_member: models.members[c.labeler].name(),
        });
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(GeneratedSet {
        examples,
        audit,
        warnings,
    })
}

fn class_slot(label: Label) -> usize {
    match label {
        Label::Idiomatic => 0,
        Label::Literal => 1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRecord {
    pub generation: usize,
    pub target_size: usize,
    /// Training-set size per member, in member order.
    pub sizes: Vec<usize>,
    pub audit: Vec<AuditRecord>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct IpetOutcome {
    /// Members of the final generation.
    pub ensemble: Ensemble,
    /// One record per generation, starting with generation 0.
    pub generations: Vec<GenerationRecord>,
}

/// Trains generation 0 on the seed set, then `plan.generations` further rounds.
#[allow(clippy::too_many_arguments)]
pub fn ipet_run(
    pvps: &[PatternVerbalizerPair],
    labeled: &[Example],
    unlabeled: &[Example],
    plan: &GenerationPlan,
    seeds: &[u64],
    factory: &BackendFactory<'_>,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<IpetOutcome, IpetError> {
    plan.validate()?;
    if pvps.len() * seeds.len() < 2 {
        return Err(IpetError::InvalidArgument(
            "iPET needs at least two members per generation".into(),
        ));
    }
    let mut ensemble = train_ensemble(pvps, labeled, seeds, factory, hyper)?;
    let mut generations = vec![GenerationRecord {
        generation: 0,
        target_size: labeled.len(),
        sizes: vec![labeled.len(); ensemble.len()],
        audit: Vec::new(),
        warnings: Vec::new(),
    }];
    for generation in 1..=plan.generations {
        let target_size = plan.target_size(labeled.len(), unlabeled.len(), generation);
        let preds = PoolPredictions::compute(&ensemble, unlabeled);
        let mut members = Vec::with_capacity(ensemble.len());
        let mut record = GenerationRecord {
            generation,
            target_size,
            sizes: Vec::new(),
            audit: Vec::new(),
            warnings: Vec::new(),
        };
        for (i, old) in ensemble.members.iter().enumerate() {
            let set = next_training_set_from(
                &ensemble,
                &preds,
                i,
                unlabeled,
                labeled,
                target_size,
                plan.class_ratio,
                seed,
                generation,
            )?;
            let wrap = |source| IpetError::Member {
                generation,
                member: old.name(),
                source,
            };
            let mut adapter = factory(old.seed).map_err(wrap)?;
            let report = if adapter.is_trainable() {
                Some(fine_tune(adapter.as_mut(), &old.pvp, &set.examples, hyper, old.seed).map_err(wrap)?)
            } else {
                None
            };
            record.sizes.push(set.examples.len());
            record.audit.extend(set.audit);
            record.warnings.extend(set.warnings);
            members.push(EnsembleMember {
                pvp: old.pvp.clone(),
                seed: old.seed,
                adapter,
                weight: 1.0,
                report,
            });
        }
        ensemble = Ensemble::new(members)?;
        generations.push(record);
    }
    Ok(IpetOutcome {
        ensemble,
        generations,
    })
}

#[derive(Debug, Clone)]
pub struct IpetPipelineOutcome {
    pub ipet: IpetOutcome,
    pub pet: PetOutcome,
}

/// iPET followed by the unchanged PET soft-labelling and distillation recipe.
#[allow(clippy::too_many_arguments)]
pub fn run_ipet(
    pvps: &[PatternVerbalizerPair],
    labeled: &[Example],
    unlabeled: &[Example],
    plan: &GenerationPlan,
    seeds: &[u64],
    factory: &BackendFactory<'_>,
    distill_factory: &BackendFactory<'_>,
    member_hyper: &TrainHyper,
    final_pvp: &PatternVerbalizerPair,
    options: &PetOptions,
    seed: u64,
) -> Result<IpetPipelineOutcome, IpetError> {
    let ipet = ipet_run(pvps, labeled, unlabeled, plan, seeds, factory, member_hyper, seed)?;
    let pet = distill_ensemble(
        ipet.ensemble.clone(),
        labeled,
        unlabeled,
        final_pvp,
        distill_factory,
        options,
        seed,
    )?;
    Ok(IpetPipelineOutcome { ipet, pet })
}

pub const AUDIT_COLUMNS: [&str; 6] = [
    "generation",
    "member",
    "example_id",
    "pseudo_label",
    "confidence",
    "labeling_member",
];

pub fn write_audit_log<W: Write>(
    out: &mut W,
    records: &[AuditRecord],
    labels: &LabelEncoding,
) -> io::Result<()> {
    writeln!(out, "{}", AUDIT_COLUMNS.join("\t"))?;
    for r in records {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.6}\t{}",
            r.generation,
            r.member,
            r.example_id,
            labels.encode(r.pseudo_label),
            r.confidence,
            r.labeling_member
        )?;
    }
    Ok(())
}

pub fn save_audit_log(
    path: &Path,
    records: &[AuditRecord],
    labels: &LabelEncoding,
) -> Result<(), IpetError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_audit_log(&mut out, records, labels)?;
    out.flush()?;
    Ok(())
}
