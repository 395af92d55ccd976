use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::Label;

/// Per-class F1 with the zero-division convention (undefined P or R is 0).
pub fn class_f1(preds: &[Label], golds: &[Label], class: Label) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (p, g) in preds.iter().zip(golds) {
        match (*p == class, *g == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Unweighted mean of the idiomatic and literal F1 scores.
pub fn macro_f1(preds: &[Label], golds: &[Label]) -> Result<f64, HarnessError> {
    if preds.len() != golds.len() {
        return Err(HarnessError::InvalidArgument(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(HarnessError::InvalidArgument("no predictions to score".into()));
    }
    Ok(Label::ALL.iter().map(|c| class_f1(preds, golds, *c)).sum::<f64>() / 2.0)
}

/// How the overall score combines languages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverallMode {
    /// Macro F1 over all predictions pooled.
    #[default]
    Pooled,
    /// Mean of the per-language scores.
    LanguageMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageScore {
    pub language: String,
    pub macro_f1: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_hash: Option<String>,
    pub seeds: Vec<u64>,
    pub started_unix: Option<u64>,
    pub finished_unix: Option<u64>,
    /// Free-form settings worth surfacing next to the scores.
    pub settings: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Ordered EN, PT, GL, then any other language alphabetically.
    pub per_language: Vec<LanguageScore>,
    pub overall: f64,
    pub overall_mode: OverallMode,
    pub total: usize,
    pub metadata: RunMetadata,
}

fn language_rank(lang: &str) -> (usize, String) {
    let rank = match lang {
        "EN" => 0,
        "PT" => 1,
        "GL" => 2,
        _ => 3,
    };
    (rank, lang.to_string())
}

pub fn per_language_report(
    preds: &[Label],
    golds: &[Label],
    languages: &[String],
    mode: OverallMode,
) -> Result<Report, HarnessError> {
    if preds.len() != golds.len() || preds.len() != languages.len() {
        return Err(HarnessError::InvalidArgument(format!(
            "misaligned inputs: {} predictions, {} golds, {} languages",
            preds.len(),
            golds.len(),
            languages.len()
        )));
    }
    let pooled = macro_f1(preds, golds)?;
    let mut groups: BTreeMap<(usize, String), (Vec<Label>, Vec<Label>)> = BTreeMap::new();
    for ((p, g), l) in preds.iter().zip(golds).zip(languages) {
        let e = groups.entry(language_rank(l)).or_default();
        e.0.push(*p);
        e.1.push(*g);
    }
    let per_language = groups
        .into_iter()
        .map(|((_, language), (p, g))| {
            Ok(LanguageScore {
                language,
                macro_f1: macro_f1(&p, &g)?,
                count: p.len(),
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let overall = match mode {
        OverallMode::Pooled => pooled,
        OverallMode::LanguageMean => {
            per_language.iter().map(|s| s.macro_f1).sum::<f64>() / per_language.len() as f64
        }
    };
    Ok(Report {
        per_language,
        overall,
        overall_mode: mode,
        total: preds.len(),
        metadata: RunMetadata::default(),
    })
}

impl Report {
    pub fn language(&self, lang: &str) -> Option<&LanguageScore> {
        self.per_language.iter().find(|s| s.language == lang)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Renders named reports as rows under EN / PT / GL / Overall columns. Cells
/// for languages a report lacks are `-`.
pub fn render_table(rows: &[(&str, &Report)]) -> String {
    let mut extra: Vec<String> = Vec::new();
    for (_, r) in rows {
        for s in &r.per_language {
            if !["EN", "PT", "GL"].contains(&s.language.as_str()) && !extra.contains(&s.language) {
                extra.push(s.language.clone());
            }
        }
    }
    let mut columns: Vec<String> = ["EN", "PT", "GL"].iter().map(|s| s.to_string()).collect();
    columns.extend(extra);
    let name_width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("Setting".len());
    let mut out = String::new();
    let _ = write!(out, "{:<name_width$}", "Setting");
    for c in &columns {
        let _ = write!(out, "  {c:>7}");
    }
    let _ = writeln!(out, "  {:>7}", "Overall");
    for (name, report) in rows {
        let _ = write!(out, "{name:<name_width$}");
        for c in &columns {
            match report.language(c) {
                Some(s) => {
                    let _ = write!(out, "  {:>7.4}", s.macro_f1);
                }
                None => {
                    let _ = write!(out, "  {:>7}", "-");
                }
            }
        }
        let _ = writeln!(out, "  {:>7.4}", report.overall);
    }
    out
}
