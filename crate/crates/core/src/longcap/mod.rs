//! Caption augmentation: contextualize a figure caption with a generation
//! backend, split it into atomic features, keep only the visually checkable
//! ones, then expand acronyms by rule.
//!
//! Prompts live in `prompts/` and are versioned together under
//! [`TEMPLATE_VERSION`]; every output records the version and the backend
//! that produced it.

mod backend;
mod pipeline;
mod steps;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{
    BackendError, GenerationBackend, HttpBackend, MockBackend, RecordingBackend, Request, ScriptedBackend,
    TOKEN_ENV,
};
pub use pipeline::{
    load_caption_records, load_journal, run_pipeline, save_caption_records, write_outputs, JournalEntry,
    LongCapOutput, PipelineOptions, PipelineReport, RecordStatus, Status,
};
pub use steps::{
    assess_feasibility, augment_caption, parse_feasibility_xml, refine_caption, Assessment, Refinement,
    StepOutput,
};

pub const TEMPLATE_VERSION: &str = "longcap-v1";

pub(crate) const AUGMENT_TEMPLATE: &str = include_str!("prompts/augment.txt");
pub(crate) const ASSESS_TEMPLATE: &str = include_str!("prompts/assess.txt");
pub(crate) const REFINE_TEMPLATE: &str = include_str!("prompts/refine.txt");
pub(crate) const REPAIR_XML_TEMPLATE: &str = include_str!("prompts/repair_xml.txt");
pub(crate) const REPAIR_REFINE_TEMPLATE: &str = include_str!("prompts/repair_refine.txt");

const FIXTURE: &str = include_str!("../../data/longcap_fixture.jsonl");

#[derive(Debug, Error)]
pub enum LongCapError {
    #[error("{0}")]
    Usage(String),
    #[error("{stage}: backend failed after {attempts} attempt(s): {detail}")]
    Backend {
        stage: Stage,
        attempts: usize,
        detail: String,
    },
    #[error("{stage}: unparseable response after repair: {detail}")]
    Parse { stage: Stage, detail: String },
    #[error("{stage}: output failed validation after repair: {detail}")]
    Validation { stage: Stage, detail: String },
    #[error("{source_name}:{line}: {detail}")]
    Format {
        source_name: String,
        line: usize,
        detail: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl LongCapError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            Self::Backend { stage, .. } | Self::Parse { stage, .. } | Self::Validation { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Augment,
    Assess,
    Refine,
    Expand,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Augment => "augment",
            Stage::Assess => "assess",
            Stage::Refine => "refine",
            Stage::Expand => "expand",
        })
    }
}

/// A caption with the article context used to augment it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub id: String,
    pub image_ref: String,
    pub caption: String,
    #[serde(default)]
    pub inline_mentions: Vec<String>,
    #[serde(rename = "abstract", default)]
    pub abstract_text: String,
    /// Acronym to expansion.
    #[serde(default)]
    pub acronym_map: BTreeMap<String, String>,
}

impl CaptionRecord {
    pub fn validate(&self) -> Result<(), LongCapError> {
        if self.id.is_empty() {
            return Err(LongCapError::Usage("caption record with empty id".into()));
        }
        if self.caption.trim().is_empty() {
            return Err(LongCapError::Usage(format!("record '{}' has an empty caption", self.id)));
        }
        for (acronym, expansion) in &self.acronym_map {
            if acronym.is_empty() || expansion.trim().is_empty() {
                return Err(LongCapError::Usage(format!(
                    "record '{}' has an empty acronym or expansion ('{acronym}')",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "FEASIBLE")]
    Feasible,
    #[serde(rename = "NOT_FEASIBLE")]
    NotFeasible,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Feasible => "FEASIBLE",
            Label::NotFeasible => "NOT_FEASIBLE",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "FEASIBLE" => Some(Label::Feasible),
            "NOT_FEASIBLE" => Some(Label::NotFeasible),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub text: String,
    pub label: Label,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub features: Vec<Feature>,
}

impl FeasibilityReport {
    pub fn with_label(&self, label: Label) -> impl Iterator<Item = &Feature> {
        self.features.iter().filter(move |f| f.label == label)
    }

    /// NOT_FEASIBLE feature texts that occur verbatim in `caption`.
    pub fn leaked_in<'a>(&'a self, caption: &str) -> Vec<&'a str> {
        self.with_label(Label::NotFeasible)
            .map(|f| f.text.as_str())
            .filter(|t| caption.contains(t))
            .collect()
    }
}

/// The ten-record caption corpus bundled for tests and demos.
pub fn fixture_records() -> Vec<CaptionRecord> {
    FIXTURE
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("bundled fixture parses"))
        .collect()
}

/// Substitutes `{name}` placeholders in one pass, so values that happen to
/// contain placeholder syntax are left alone.
pub(crate) fn render(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open + 1..];
        let hit = tail
            .find('}')
            .and_then(|close| values.iter().find(|(k, _)| *k == &tail[..close]).map(|(_, v)| (close, *v)));
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &tail[close + 1..];
            }
            None => {
                out.push('{');
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    out
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Byte offset of the first occurrence of `needle` not flanked by word
/// characters.
fn find_word(haystack: &str, needle: &str) -> Option<usize> {
    haystack.match_indices(needle).map(|(i, _)| i).find(|&i| {
        let before = haystack[..i].chars().next_back();
        let after = haystack[i + needle.len()..].chars().next();
        !before.is_some_and(is_word_char) && !after.is_some_and(is_word_char)
    })
}

/// Replaces the first whole-word, case-sensitive occurrence of each acronym
/// with `expansion (ACRONYM)`. Later occurrences stay as they are, and an
/// acronym whose expanded form is already present is skipped.
///
/// Matches are located in the input text, so expansions never feed into
/// one another.
pub fn expand_acronyms(caption: &str, acronym_map: &BTreeMap<String, String>) -> String {
    let mut hits: Vec<(usize, &str, &str)> = acronym_map
        .iter()
        .filter(|(acronym, expansion)| !acronym.is_empty() && !caption.contains(&format!("{expansion} ({acronym})")))
        .filter_map(|(acronym, expansion)| find_word(caption, acronym).map(|i| (i, acronym.as_str(), expansion.as_str())))
        .collect();
    hits.sort_by_key(|&(i, acronym, _)| (i, std::cmp::Reverse(acronym.len())));

    let mut out = String::with_capacity(caption.len() + 32 * hits.len());
    let mut cursor = 0;
    for (start, acronym, expansion) in hits {
        if start < cursor {
            continue;
        }
        out.push_str(&caption[cursor..start]);
        out.push_str(expansion);
        out.push_str(" (");
        out.push_str(acronym);
        out.push(')');
        cursor = start + acronym.len();
    }
    out.push_str(&caption[cursor..]);
    out
}

#[cfg(test)]
mod tests;
