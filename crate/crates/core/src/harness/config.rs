use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::OverallMode;
use super::HarnessError;
use crate::adapter::{BackendKind, TinyConfig, TrainHyper};
use crate::bertram::BertramHyper;
use crate::corpus::LabelEncoding;
use crate::ipet::GenerationPlan;
use crate::pet::PetOptions;
use crate::pvp::{builtin_pvps, load_patterns, PatternVerbalizerPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Pet,
    Ipet,
    BertramTrain,
    BertramInject,
    Evaluate,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Pet => "pet",
            Task::Ipet => "ipet",
            Task::BertramTrain => "bertram-train",
            Task::BertramInject => "bertram-inject",
            Task::Evaluate => "evaluate",
        })
    }
}

impl FromStr for Task {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pet" => Ok(Task::Pet),
            "ipet" => Ok(Task::Ipet),
            "bertram-train" => Ok(Task::BertramTrain),
            "bertram-inject" => Ok(Task::BertramInject),
            "evaluate" => Ok(Task::Evaluate),
            other => Err(HarnessError::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// Labeled training split; the labeled subset and unlabeled pool come from it.
    pub train: Option<PathBuf>,
    /// Split to predict on and score.
    pub eval: Option<PathBuf>,
    /// Extra pattern file; its PVPs are added to the built-in ones.
    pub patterns: Option<PathBuf>,
    /// Raw text, one sentence per line, for context harvesting.
    pub corpus: Option<PathBuf>,
    /// Frequent words for mimic training, one per line.
    pub words: Option<PathBuf>,
    /// MWEs to embed, one per line.
    pub mwes: Option<PathBuf>,
    /// Tiny encoder checkpoint.
    pub encoder: Option<PathBuf>,
    /// Embedding TSV to inject.
    pub embeddings: Option<PathBuf>,
    /// Prediction file to score.
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BertramSection {
    pub n_min: usize,
    pub n_max: usize,
    /// Contexts harvested per MWE at inference time.
    pub contexts_per_mwe: usize,
    pub ngram_init_std: f64,
    /// Replace MWEs already in the vocabulary instead of failing.
    pub overwrite: bool,
    pub train: BertramHyper,
}

impl Default for BertramSection {
    fn default() -> Self {
        BertramSection {
            n_min: 3,
            n_max: 5,
            contexts_per_mwe: 150,
            ngram_init_std: 0.1,
            overwrite: false,
            train: BertramHyper::default(),
        }
    }
}

/// One run, read from TOML. Relative data paths resolve against the config
/// file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub name: String,
    /// Base seed for sampling and every derived stream.
    pub seed: u64,
    /// One ensemble member per PVP per seed.
    pub seeds: Vec<u64>,
    pub backend: BackendKind,
    pub prompt_language: String,
    pub pvps: Vec<String>,
    pub final_pvp: String,
    pub labeled_size: usize,
    pub unlabeled_size: usize,
    pub output_dir: PathBuf,
    pub overall: OverallMode,
    pub labels: LabelEncoding,
    pub data: DataPaths,
    pub train: TrainHyper,
    pub pet: PetOptions,
    pub ipet: GenerationPlan,
    pub tiny: TinyConfig,
    pub bertram: BertramSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::Pet,
            name: "run".into(),
            seed: 42,
            seeds: vec![1, 2, 3],
            backend: BackendKind::Tiny,
            prompt_language: "EN".into(),
            pvps: ["P1", "P2", "P3", "P4", "P5"].iter().map(|s| s.to_string()).collect(),
            final_pvp: "P4".into(),
            labeled_size: 100,
            unlabeled_size: 3000,
            output_dir: PathBuf::from("out"),
            overall: OverallMode::Pooled,
            labels: LabelEncoding::default(),
            data: DataPaths::default(),
            train: TrainHyper::default(),
            pet: PetOptions::default(),
            ipet: GenerationPlan::default(),
            tiny: TinyConfig::default(),
            bertram: BertramSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = ExperimentConfig::from_toml(&text)?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let d = &mut self.data;
        for p in [
            &mut d.train,
            &mut d.eval,
            &mut d.patterns,
            &mut d.corpus,
            &mut d.words,
            &mut d.mwes,
            &mut d.encoder,
            &mut d.embeddings,
            &mut d.predictions,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
    }

    /// Built-in PVPs for the prompt language plus any from the pattern file.
    pub fn available_pvps(&self) -> Result<Vec<PatternVerbalizerPair>, HarnessError> {
        let mut all = builtin_pvps(&self.prompt_language).map_err(|e| HarnessError::Config(e.to_string()))?;
        if let Some(path) = &self.data.patterns {
            let extra = load_patterns(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
            for p in extra {
                all.retain(|q| q.id() != p.id());
                all.push(p);
            }
        }
        Ok(all)
    }

    fn require(&self, field: &str, value: &Option<PathBuf>) -> Result<(), HarnessError> {
        match value {
            None => Err(HarnessError::Config(format!(
                "task {} needs data.{field}",
                self.task
            ))),
            Some(p) if !p.exists() => Err(HarnessError::Config(format!(
                "data.{field} {} does not exist",
                p.display()
            ))),
            Some(_) => Ok(()),
        }
    }

    /// Checks every field the task reads, before any compute.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let mut seen = HashSet::new();
        for s in &self.seeds {
            if !seen.insert(s) {
                return bad(format!("seed {s} listed twice"));
            }
        }
        match self.task {
            Task::Pet | Task::Ipet => {
                if self.labeled_size == 0 || !self.labeled_size.is_multiple_of(2) {
                    return bad(format!(
                        "labeled_size must be even and positive, got {}",
                        self.labeled_size
                    ));
                }
                if self.seeds.is_empty() {
                    return bad("seeds must not be empty".into());
                }
                if self.pvps.is_empty() {
                    return bad("pvps must not be empty".into());
                }
                let available = self.available_pvps()?;
                for id in self.pvps.iter().chain(std::iter::once(&self.final_pvp)) {
                    if !available.iter().any(|p| p.id() == id) {
                        return bad(format!(
                            "PVP {id:?} is not defined for prompt language {}",
                            self.prompt_language
                        ));
                    }
                }
                if self.pet.temperature <= 0.0 {
                    return bad("pet.temperature must be positive".into());
                }
                if self.task == Task::Ipet {
                    self.ipet.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
                    if self.pvps.len() * self.seeds.len() < 2 {
                        return bad("ipet needs at least two members (PVPs × seeds)".into());
                    }
                }
                self.require("train", &self.data.train)?;
                self.require("eval", &self.data.eval)?;
            }
            Task::BertramTrain => {
                if self.bertram.n_min == 0 || self.bertram.n_min > self.bertram.n_max {
                    return bad("bertram n-gram bounds must satisfy 1 <= n_min <= n_max".into());
                }
                if self.bertram.contexts_per_mwe == 0 {
                    return bad("bertram.contexts_per_mwe must be positive".into());
                }
                self.require("corpus", &self.data.corpus)?;
                self.require("words", &self.data.words)?;
                if let Some(p) = &self.data.encoder {
                    self.require("encoder", &Some(p.clone()))?;
                }
                if let Some(p) = &self.data.mwes {
                    self.require("mwes", &Some(p.clone()))?;
                }
            }
            Task::BertramInject => {
                self.require("encoder", &self.data.encoder)?;
                self.require("embeddings", &self.data.embeddings)?;
            }
            Task::Evaluate => {
                self.require("predictions", &self.data.predictions)?;
                self.require("eval", &self.data.eval)?;
            }
        }
        if self.backend == BackendKind::External && matches!(self.task, Task::Pet | Task::Ipet) {
            log::info!("external backend: a backend factory must be supplied by the caller");
        }
        Ok(())
    }
}
