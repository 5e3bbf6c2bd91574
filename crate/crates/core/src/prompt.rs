//! Sectioned prompts ("meta-prompts") and optimization candidates.
//!
//! A [`MetaPrompt`] is an ordered list of named sections. Operators edit one
//! section at a time; everything else about the prompt is carried over
//! unchanged. Values are immutable: every edit returns a new prompt.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::metrics::{Objective, Scores};
use crate::operators::OperatorId;
use crate::task::TaskKind;

pub const DEFAULT_PLACEHOLDER: &str = "{{Input}}";

/// Rendered sections are joined with exactly one blank line.
pub const SECTION_SEPARATOR: &str = "\n\n";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PromptError {
    #[error("input placeholder `{0}` does not occur in any section")]
    MissingPlaceholder(String),
    #[error("input placeholder `{0}` occurs {1} times; exactly one is required")]
    DuplicatePlaceholder(String, usize),
    #[error("new order is not a permutation of the section ids")]
    NotAPermutation,
    #[error("template parse error: {0}")]
    Parse(String),
    #[error("duplicate section id `{0}`")]
    DuplicateId(String),
    #[error("section positions are not a permutation of 0..{0}")]
    BadPositions(usize),
    #[error("unknown section `{0}`")]
    UnknownSection(String),
    #[error("section `{0}` is not editable")]
    NotEditable(String),
    #[error("a prompt needs at least one section")]
    Empty,
    #[error("score {0} for `{1}` is outside [0, 1]")]
    ScoreOutOfRange(f64, &'static str),
}

/// Stable identifier of a section within one prompt lineage.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SectionId(pub String);

impl SectionId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SectionId {
    fn from(s: &str) -> Self {
        SectionId(s.into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub id: SectionId,
    pub name: String,
    pub body: String,
    pub editable: bool,
    pub position: usize,
}

impl Section {
    /// Label attached to a section named `label:<name>`, if any.
    pub fn label(&self) -> Option<&str> {
        self.name.strip_prefix("label:")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawMetaPrompt")]
pub struct MetaPrompt {
    sections: Vec<Section>,
    input_placeholder: String,
    output_contract: String,
}

#[derive(Deserialize)]
struct RawMetaPrompt {
    sections: Vec<Section>,
    input_placeholder: String,
    output_contract: String,
}

impl TryFrom<RawMetaPrompt> for MetaPrompt {
    type Error = PromptError;

    fn try_from(raw: RawMetaPrompt) -> Result<Self, Self::Error> {
        MetaPrompt::new(raw.sections, raw.input_placeholder, raw.output_contract)
    }
}

/// On-disk template layout: sections as authored, ids assigned on load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateFile {
    pub sections: Vec<TemplateSection>,
    #[serde(default = "default_placeholder")]
    pub input_placeholder: String,
    #[serde(default)]
    pub output_contract: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSection {
    pub name: String,
    pub body: String,
    #[serde(default = "default_true")]
    pub editable: bool,
}

fn default_placeholder() -> String {
    DEFAULT_PLACEHOLDER.into()
}

fn default_true() -> bool {
    true
}

impl MetaPrompt {
    /// Builds a prompt, checking id uniqueness, positions and the placeholder.
    pub fn new(
        mut sections: Vec<Section>,
        input_placeholder: String,
        output_contract: String,
    ) -> Result<Self, PromptError> {
        if sections.is_empty() {
            return Err(PromptError::Empty);
        }
        let mut ids = BTreeSet::new();
        for s in &sections {
            if !ids.insert(s.id.clone()) {
                return Err(PromptError::DuplicateId(s.id.0.clone()));
            }
        }
        sections.sort_by_key(|s| s.position);
        if sections.iter().enumerate().any(|(i, s)| s.position != i) {
            return Err(PromptError::BadPositions(sections.len()));
        }
        let prompt = Self { sections, input_placeholder, output_contract };
        prompt.check_placeholder()?;
        Ok(prompt)
    }

    pub fn from_template(file: TemplateFile) -> Result<Self, PromptError> {
        let sections = file
            .sections
            .into_iter()
            .enumerate()
            .map(|(i, s)| Section {
                id: SectionId(format!("s{i}")),
                name: s.name,
                body: s.body,
                editable: s.editable,
                position: i,
            })
            .collect();
        Self::new(sections, file.input_placeholder, file.output_contract)
    }

    pub fn from_template_json(text: &str) -> Result<Self, PromptError> {
        if text.trim().is_empty() {
            return Err(PromptError::Parse("empty template".into()));
        }
        let file: TemplateFile =
            serde_json::from_str(text).map_err(|e| PromptError::Parse(e.to_string()))?;
        Self::from_template(file)
    }

    /// Template view of this prompt (sections in position order, ids dropped).
    pub fn to_template(&self) -> TemplateFile {
        TemplateFile {
            sections: self
                .sections
                .iter()
                .map(|s| TemplateSection {
                    name: s.name.clone(),
                    body: s.body.clone(),
                    editable: s.editable,
                })
                .collect(),
            input_placeholder: self.input_placeholder.clone(),
            output_contract: self.output_contract.clone(),
        }
    }

    /// Canonical template serialization: UTF-8, LF endings, fixed key order.
    pub fn to_template_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_template())
            .expect("template serialization is infallible");
        s.push('\n');
        s
    }

    /// Skeleton for optimizing from nothing: a task description, one
    /// definition per label, a few-shot block (all empty and editable) and a
    /// fixed output section holding the input slot and the answer contract.
    pub fn scratch(task: TaskKind, labels: &[String]) -> Self {
        let contract = output_contract_for(task, labels);
        let mut names: Vec<String> = Vec::new();
        names.push("task_description".into());
        for l in labels {
            names.push(format!("label:{l}"));
        }
        names.push("few_shot".into());
        let mut sections: Vec<Section> = names
            .into_iter()
            .enumerate()
            .map(|(i, name)| Section {
                id: SectionId(format!("s{i}")),
                name,
                body: String::new(),
                editable: true,
                position: i,
            })
            .collect();
        let pos = sections.len();
        sections.push(Section {
            id: SectionId(format!("s{pos}")),
            name: "output_format".into(),
            body: format!("Input:\n{DEFAULT_PLACEHOLDER}\n\nOutput:\n{contract}"),
            editable: false,
            position: pos,
        });
        Self::new(sections, DEFAULT_PLACEHOLDER.into(), contract)
            .expect("scratch skeleton is well formed")
    }

    /// Sections in position order.
    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    pub fn input_placeholder(&self) -> &str {
        &self.input_placeholder
    }

    pub fn output_contract(&self) -> &str {
        &self.output_contract
    }

    pub fn section(&self, id: &SectionId) -> Option<&Section> {
        self.sections.iter().find(|s| &s.id == id)
    }

    pub fn section_by_name(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn editable_ids(&self) -> Vec<SectionId> {
        self.sections.iter().filter(|s| s.editable).map(|s| s.id.clone()).collect()
    }

    pub fn ids(&self) -> Vec<SectionId> {
        self.sections.iter().map(|s| s.id.clone()).collect()
    }

    fn check_placeholder(&self) -> Result<(), PromptError> {
        let n: usize = self
            .sections
            .iter()
            .map(|s| s.body.matches(self.input_placeholder.as_str()).count())
            .sum();
        match n {
            0 => Err(PromptError::MissingPlaceholder(self.input_placeholder.clone())),
            1 => Ok(()),
            n => Err(PromptError::DuplicatePlaceholder(self.input_placeholder.clone(), n)),
        }
    }

    /// Bodies in position order, joined by one blank line, with the input
    /// substituted. Empty sections contribute nothing.
    pub fn render(&self, input: &str) -> Result<String, PromptError> {
        self.check_placeholder()?;
        let mut out = String::new();
        for s in self.sections.iter().filter(|s| !s.body.is_empty()) {
            if !out.is_empty() {
                out.push_str(SECTION_SEPARATOR);
            }
            out.push_str(&s.body.replace(self.input_placeholder.as_str(), input));
        }
        Ok(out)
    }

    /// Same sections, new positions. Bodies and ids are untouched.
    pub fn reorder(&self, new_order: &[SectionId]) -> Result<Self, PromptError> {
        if new_order.len() != self.sections.len() {
            return Err(PromptError::NotAPermutation);
        }
        let mut seen = BTreeSet::new();
        let mut sections = Vec::with_capacity(new_order.len());
        for (pos, id) in new_order.iter().enumerate() {
            if !seen.insert(id) {
                return Err(PromptError::NotAPermutation);
            }
            let mut s = self.section(id).ok_or(PromptError::NotAPermutation)?.clone();
            s.position = pos;
            sections.push(s);
        }
        Ok(Self {
            sections,
            input_placeholder: self.input_placeholder.clone(),
            output_contract: self.output_contract.clone(),
        })
    }

    /// Replaces one section body. The result must still carry exactly one
    /// input placeholder.
    pub fn with_body(&self, id: &SectionId, body: String) -> Result<Self, PromptError> {
        let mut next = self.clone();
        let s = next
            .sections
            .iter_mut()
            .find(|s| &s.id == id)
            .ok_or_else(|| PromptError::UnknownSection(id.0.clone()))?;
        s.body = body;
        next.check_placeholder()?;
        Ok(next)
    }

    /// Hex SHA-256 over the length-prefixed section bodies in position order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.sections {
            h.update((s.body.len() as u64).to_le_bytes());
            h.update(s.body.as_bytes());
        }
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for b in digest.iter() {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

/// Answer-shape text for each task kind.
pub fn output_contract_for(task: TaskKind, labels: &[String]) -> String {
    match task {
        TaskKind::Cls => "{\"label\":\"\"}".into(),
        TaskKind::Mrc => "{\"answer\":\"\"}".into(),
        TaskKind::Ner => {
            let mut s = String::from(
                "Return the results directly in JSON format, mapping each entity type to its \
                 mentions and their [start, end) character offsets:\n{",
            );
            for (i, l) in labels.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                s.push_str(&format!("\"{l}\":{{\"<mention>\":[[start,end]]}}"));
            }
            s.push('}');
            s
        }
    }
}

/// One accepted edit in a candidate's history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub iteration: u32,
    pub section: SectionId,
    pub operator: OperatorId,
    /// Objective change the edit produced against its base.
    pub gain: f64,
}

/// A prompt under optimization with its score history and edit lineage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub prompt: MetaPrompt,
    pub scores: BTreeMap<u32, Scores>,
    pub lineage: Vec<LineageEntry>,
    pub fingerprint: String,
}

impl Candidate {
    pub fn new(prompt: MetaPrompt) -> Self {
        let fingerprint = prompt.fingerprint();
        Self { prompt, scores: BTreeMap::new(), lineage: Vec::new(), fingerprint }
    }

    /// Child of `self` holding `prompt`, with one more lineage entry.
    pub fn child(&self, prompt: MetaPrompt, entry: LineageEntry) -> Self {
        let mut lineage = self.lineage.clone();
        lineage.push(entry);
        let fingerprint = prompt.fingerprint();
        Self { prompt, scores: BTreeMap::new(), lineage, fingerprint }
    }

    pub fn record_score(&mut self, iteration: u32, scores: Scores) -> Result<(), PromptError> {
        for (v, name) in [
            (scores.precision, "precision"),
            (scores.recall, "recall"),
            (scores.f1, "f1"),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PromptError::ScoreOutOfRange(v, name));
            }
        }
        self.scores.insert(iteration, scores);
        Ok(())
    }

    /// Latest recorded value of the objective, if the candidate was scored.
    pub fn objective(&self, objective: Objective) -> Option<f64> {
        self.scores.values().next_back().map(|s| s.get(objective))
    }
}
