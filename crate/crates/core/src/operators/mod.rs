//! Prompt-edit operators.
//!
//! Most operators are a request template plus a response parser: the
//! request asks a model to rewrite one section and answer in JSON, and the
//! parser pulls the new body back out. A few are computed locally
//! (`few_shot`, `repeat_instructions`, deterministic `merge`) or pick
//! between several model samples (`self_consistency`).

mod consistency;
mod evolution;
mod few_shot;
mod merge;
mod rag;
pub mod templates;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::generation::GenerationRequest;
use crate::json::{first_object, first_object_or_array};
use crate::metrics::BadCase;
use crate::prompt::{Candidate, MetaPrompt, PromptError, Section, SectionId};

pub use consistency::{jaccard, self_consistency};
pub use evolution::{diff_evolution, format_parents};
pub use few_shot::{
    apply_few_shot, few_shot_block, few_shot_indices, FewShotError, FewShotItem, FewShotStrategy,
};
pub use merge::{merge_deterministic, merge_llm_requests, MergeMode};
pub use rag::{rag_augment, Retriever, ToyRetriever, RAG_TOP_K};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorId {
    Rewrite,
    Refine,
    Reflect,
    Cot,
    FewShot,
    DiffEvolution,
    DefineSort,
    Merge,
    ShortInstruction,
    SelfConsistency,
    RepeatInstructions,
    Rag,
}

impl OperatorId {
    pub const ALL: [OperatorId; 12] = [
        OperatorId::Rewrite,
        OperatorId::Refine,
        OperatorId::Reflect,
        OperatorId::Cot,
        OperatorId::FewShot,
        OperatorId::DiffEvolution,
        OperatorId::DefineSort,
        OperatorId::Merge,
        OperatorId::ShortInstruction,
        OperatorId::SelfConsistency,
        OperatorId::RepeatInstructions,
        OperatorId::Rag,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OperatorId::Rewrite => "rewrite",
            OperatorId::Refine => "refine",
            OperatorId::Reflect => "reflect",
            OperatorId::Cot => "cot",
            OperatorId::FewShot => "few_shot",
            OperatorId::DiffEvolution => "diff_evolution",
            OperatorId::DefineSort => "define_sort",
            OperatorId::Merge => "merge",
            OperatorId::ShortInstruction => "short_instruction",
            OperatorId::SelfConsistency => "self_consistency",
            OperatorId::RepeatInstructions => "repeat_instructions",
            OperatorId::Rag => "rag",
        }
    }

    /// Operators that talk to the model through a template.
    pub fn uses_template(self) -> bool {
        !matches!(self, OperatorId::FewShot | OperatorId::RepeatInstructions)
    }

    /// Built-in template text, if the operator has one.
    pub fn default_template(self) -> Option<&'static str> {
        Some(match self {
            OperatorId::Rewrite => templates::REWRITE,
            OperatorId::Refine => templates::REFINE,
            OperatorId::Reflect => templates::REFLECT,
            OperatorId::Cot => templates::COT,
            OperatorId::ShortInstruction => templates::SHORT_INSTRUCTION,
            OperatorId::DiffEvolution => templates::DIFF_EVOLUTION,
            OperatorId::DefineSort => templates::DEFINE_SORT,
            OperatorId::Merge => templates::MERGE,
            OperatorId::SelfConsistency => templates::SELF_CONSISTENCY,
            OperatorId::Rag => templates::RAG,
            OperatorId::FewShot | OperatorId::RepeatInstructions => return None,
        })
    }
}

impl fmt::Display for OperatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown operator `{0}`")]
pub struct UnknownOperator(pub String);

impl FromStr for OperatorId {
    type Err = UnknownOperator;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OperatorId::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| UnknownOperator(s.into()))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OperatorError {
    #[error("missing context: {0}")]
    MissingContext(&'static str),
    #[error("section `{0}` is not editable")]
    NotEditable(String),
    #[error("unknown section `{0}`")]
    UnknownSection(String),
    #[error("parents carry identical bodies for the target section")]
    IdenticalParents,
    #[error("parents do not share the same section ids")]
    SectionSetMismatch,
    #[error("no retriever is registered")]
    RetrieverUnavailable,
    #[error("operator `{0}` is computed locally and has no request")]
    NotRequestBased(OperatorId),
    #[error("no template registered for `{0}`")]
    NoTemplate(OperatorId),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Everything an operator may need besides the template.
#[derive(Debug, Clone, Copy)]
pub struct OperatorContext<'a> {
    pub prompt: &'a MetaPrompt,
    pub target: &'a SectionId,
    /// Scored candidates for merge and differential evolution.
    pub siblings: &'a [Candidate],
    pub bad_cases: &'a [BadCase],
    /// Retrieved passages for `rag`.
    pub snippets: &'a [String],
    pub objective: crate::metrics::Objective,
    pub rng_seed: u64,
}

impl<'a> OperatorContext<'a> {
    pub fn new(prompt: &'a MetaPrompt, target: &'a SectionId) -> Self {
        Self {
            prompt,
            target,
            siblings: &[],
            bad_cases: &[],
            snippets: &[],
            objective: crate::metrics::Objective::F1,
            rng_seed: 0,
        }
    }

    pub fn target_section(&self) -> Result<&'a Section, OperatorError> {
        self.prompt
            .section(self.target)
            .ok_or_else(|| OperatorError::UnknownSection(self.target.0.clone()))
    }
}

/// Parsed result of one operator call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorOutcome {
    pub new_body: Option<String>,
    pub new_order: Option<Vec<SectionId>>,
    pub raw_response: String,
    pub parse_ok: bool,
}

impl OperatorOutcome {
    fn failed(raw: &str) -> Self {
        Self { new_body: None, new_order: None, raw_response: raw.into(), parse_ok: false }
    }

    fn body(raw: &str, body: String) -> Self {
        if body.trim().is_empty() {
            return Self::failed(raw);
        }
        Self { new_body: Some(body), new_order: None, raw_response: raw.into(), parse_ok: true }
    }
}

/// Operator id -> template text. Starts from the built-ins; a registry
/// manifest can replace any entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<OperatorId, String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        let templates = OperatorId::ALL
            .into_iter()
            .filter_map(|op| op.default_template().map(|t| (op, t.to_string())))
            .collect();
        Self { templates }
    }
}

impl TemplateSet {
    pub fn set(&mut self, op: OperatorId, template: String) {
        self.templates.insert(op, template);
    }

    pub fn get(&self, op: OperatorId) -> Result<&str, OperatorError> {
        self.templates.get(&op).map(String::as_str).ok_or(OperatorError::NoTemplate(op))
    }
}

/// Default sampling temperature for operator calls; merge asks for 0.
pub const DEFAULT_OPERATOR_TEMPERATURE: f64 = 0.7;

/// Operators that rewrite a single section body.
fn edits_section(op: OperatorId) -> bool {
    !matches!(op, OperatorId::DefineSort)
}

/// Builds the model request for applying `op` to the context's target section.
pub fn build_request(
    op: OperatorId,
    ctx: &OperatorContext<'_>,
    templates: &TemplateSet,
) -> Result<GenerationRequest, OperatorError> {
    if !op.uses_template() {
        return Err(OperatorError::NotRequestBased(op));
    }
    let section = ctx.target_section()?;
    if edits_section(op) && !section.editable {
        return Err(OperatorError::NotEditable(section.name.clone()));
    }
    let template = templates.get(op)?;
    let text = match op {
        OperatorId::Reflect => {
            if ctx.bad_cases.is_empty() {
                return Err(OperatorError::MissingContext("reflect needs at least one bad case"));
            }
            let reasons: Vec<String> = ctx.bad_cases.iter().map(BadCase::reason_text).collect();
            let list = serde_json::to_string(&reasons).expect("string list serializes");
            templates::fill(
                template,
                &[
                    ("Module", &section.name),
                    ("Module_Desc", &section.body),
                    ("Bad_Case_Reason_List", &list),
                ],
            )
        }
        OperatorId::DiffEvolution | OperatorId::Merge => {
            if ctx.siblings.len() < 2 {
                return Err(OperatorError::MissingContext(
                    "merge and diff_evolution need at least two candidates",
                ));
            }
            let parents = evolution::distinct_parents(ctx.siblings, ctx.target, ctx.objective)?;
            templates::fill(
                template,
                &[
                    ("Module", &section.name),
                    ("Module_Desc", &section.body),
                    ("Parents", &format_parents(&parents)),
                ],
            )
        }
        OperatorId::Rag => {
            let mut listing = String::new();
            for (i, s) in ctx.snippets.iter().enumerate() {
                listing.push_str(&format!("[{}] {}\n", i + 1, s));
            }
            templates::fill(
                template,
                &[("Module", &section.name), ("Module_Desc", &section.body), ("Snippets", &listing)],
            )
        }
        OperatorId::DefineSort => {
            let mut listing = String::new();
            for s in ctx.prompt.sections() {
                let first = s.body.lines().next().unwrap_or("");
                listing.push_str(&format!("{}: {} | {}\n", s.id, s.name, first));
            }
            templates::fill(template, &[("Sections", &listing)])
        }
        _ => templates::fill(template, &[("Module", &section.name), ("Module_Desc", &section.body)]),
    };
    let mut req = GenerationRequest::user(text);
    req.temperature = if op == OperatorId::Merge { 0.0 } else { DEFAULT_OPERATOR_TEMPERATURE };
    Ok(req)
}

/// Pulls the operator's result out of a model response. Never fails: an
/// unreadable response yields `parse_ok == false`, which callers treat as
/// a no-op edit.
pub fn parse_operator_response(op: OperatorId, section_name: &str, raw: &str) -> OperatorOutcome {
    if op == OperatorId::DefineSort {
        return parse_order(raw);
    }
    let Some(obj) = first_object(raw) else {
        return OperatorOutcome::failed(raw);
    };
    let key = if op == OperatorId::Reflect {
        format!("Improved {section_name} description")
    } else {
        section_name.to_string()
    };
    if let Some(Value::String(body)) = obj.get(&key) {
        return OperatorOutcome::body(raw, body.clone());
    }
    // Models sometimes normalise the key; accept a lone string field, or for
    // reflect any "Improved ... description" field.
    if op == OperatorId::Reflect {
        let found = obj.iter().find_map(|(k, v)| match v {
            Value::String(s) if k.starts_with("Improved") && k.ends_with("description") => {
                Some(s.clone())
            }
            _ => None,
        });
        return match found {
            Some(body) => OperatorOutcome::body(raw, body),
            None => OperatorOutcome::failed(raw),
        };
    }
    if obj.len() == 1 {
        if let Some(Value::String(body)) = obj.values().next() {
            return OperatorOutcome::body(raw, body.clone());
        }
    }
    OperatorOutcome::failed(raw)
}

fn parse_order(raw: &str) -> OperatorOutcome {
    let ids = match first_object_or_array(raw) {
        Some(Value::Array(a)) => Some(a),
        Some(Value::Object(o)) => match o.get("order") {
            Some(Value::Array(a)) => Some(a.clone()),
            _ => None,
        },
        _ => None,
    };
    let order: Option<Vec<SectionId>> = ids.and_then(|a| {
        a.iter().map(|v| v.as_str().map(|s| SectionId(s.to_string()))).collect()
    });
    match order {
        Some(order) if !order.is_empty() => OperatorOutcome {
            new_body: None,
            new_order: Some(order),
            raw_response: raw.into(),
            parse_ok: true,
        },
        _ => OperatorOutcome::failed(raw),
    }
}

/// Copies the first sentence of the target section to the end of the
/// section that sits directly before the first non-editable (output)
/// section, so the key instruction is repeated right before the answer
/// contract.
pub fn repeat_instructions(
    prompt: &MetaPrompt,
    target: &SectionId,
) -> Result<MetaPrompt, OperatorError> {
    let section =
        prompt.section(target).ok_or_else(|| OperatorError::UnknownSection(target.0.clone()))?;
    if !section.editable {
        return Err(OperatorError::NotEditable(section.name.clone()));
    }
    let sentence = first_sentence(&section.body)
        .ok_or(OperatorError::MissingContext("target section has no sentence to repeat"))?;
    let sections = prompt.sections();
    let output_pos = sections.iter().position(|s| !s.editable).unwrap_or(sections.len());
    let host = output_pos
        .checked_sub(1)
        .map(|p| &sections[p])
        .filter(|s| s.editable)
        .ok_or(OperatorError::MissingContext("no editable section precedes the output section"))?;
    let mut body = host.body.clone();
    if !body.is_empty() {
        body.push('\n');
    }
    body.push_str(&format!("Remember: {sentence}"));
    Ok(prompt.with_body(&host.id, body)?)
}

/// Text up to and including the first sentence terminator.
pub fn first_sentence(text: &str) -> Option<&str> {
    let text = text.trim();
    if text.is_empty() {
        return None;
    }
    let end = text
        .char_indices()
        .find(|(_, c)| matches!(c, '.' | '!' | '?' | '。' | '！' | '？' | '\n'))
        .map(|(i, c)| if c == '\n' { i } else { i + c.len_utf8() })
        .unwrap_or(text.len());
    let s = text[..end].trim();
    (!s.is_empty()).then_some(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{TemplateFile, TemplateSection};
    use alloc::vec;

    fn prompt() -> MetaPrompt {
        MetaPrompt::from_template(TemplateFile {
            sections: vec![
                TemplateSection {
                    name: "horoscope".into(),
                    body: "Focus on astrology, horoscope analysis, fortune prediction and other horoscope-related content.".into(),
                    editable: true,
                },
                TemplateSection { name: "few_shot".into(), body: "Example: none.".into(), editable: true },
                TemplateSection {
                    name: "output_format".into(),
                    body: "Input: {{Input}}\nOutput: {\"label\":\"\"}".into(),
                    editable: false,
                },
            ],
            input_placeholder: "{{Input}}".into(),
            output_contract: "{\"label\":\"\"}".into(),
        })
        .unwrap()
    }

    fn bad(reason: &str) -> BadCase {
        BadCase {
            example_id: "x".into(),
            input: "in".into(),
            expected: "a".into(),
            predicted: "b".into(),
            reason: reason.into(),
        }
    }

    #[test]
    fn refine_request_substitutes_both_placeholders() {
        let p = prompt();
        let id = p.sections()[0].id.clone();
        let req = build_request(OperatorId::Refine, &OperatorContext::new(&p, &id), &TemplateSet::default()).unwrap();
        let text = &req.messages[0].content;
        assert!(text.starts_with("You are an excellent prompt engineer, and you are familiar with the \"Refine\" optimization method"));
        assert!(text.contains("Below is a horoscope of a Prompt, the original expression is as follows:\nFocus on astrology, horoscope analysis"));
        assert!(text.ends_with("{\n\"horoscope\":\"\"\n}"));
        assert!(!text.contains("{{"));
    }

    #[test]
    fn reflect_lists_reasons_as_json_array() {
        let p = prompt();
        let id = p.sections()[0].id.clone();
        let cases = [
            bad("The text is about Feng Shui, not astrology."),
            bad("The text discusses marriage psychology."),
        ];
        let mut ctx = OperatorContext::new(&p, &id);
        ctx.bad_cases = &cases;
        let req = build_request(OperatorId::Reflect, &ctx, &TemplateSet::default()).unwrap();
        let text = &req.messages[0].content;
        assert!(text.contains(
            r#"["The text is about Feng Shui, not astrology.","The text discusses marriage psychology."]"#
        ));
        assert!(text.contains("\"Improved horoscope description\":\"\""));
    }

    #[test]
    fn reflect_without_bad_cases_is_rejected() {
        let p = prompt();
        let id = p.sections()[0].id.clone();
        let err = build_request(OperatorId::Reflect, &OperatorContext::new(&p, &id), &TemplateSet::default());
        assert!(matches!(err, Err(OperatorError::MissingContext(_))));
    }

    #[test]
    fn non_editable_rejected_before_any_call() {
        let p = prompt();
        let id = p.sections()[2].id.clone();
        for op in [OperatorId::Rewrite, OperatorId::Refine, OperatorId::ShortInstruction] {
            let err = build_request(op, &OperatorContext::new(&p, &id), &TemplateSet::default());
            assert!(matches!(err, Err(OperatorError::NotEditable(_))));
        }
    }

    #[test]
    fn build_request_is_deterministic() {
        let p = prompt();
        let id = p.sections()[0].id.clone();
        let t = TemplateSet::default();
        for op in [OperatorId::Rewrite, OperatorId::Cot, OperatorId::DefineSort, OperatorId::SelfConsistency] {
            let a = build_request(op, &OperatorContext::new(&p, &id), &t).unwrap();
            let b = build_request(op, &OperatorContext::new(&p, &id), &t).unwrap();
            assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        }
    }

    #[test]
    fn local_operators_have_no_request() {
        let p = prompt();
        let id = p.sections()[0].id.clone();
        let err = build_request(OperatorId::FewShot, &OperatorContext::new(&p, &id), &TemplateSet::default());
        assert_eq!(err, Err(OperatorError::NotRequestBased(OperatorId::FewShot)));
    }

    #[test]
    fn parse_refine_output() {
        let o = parse_operator_response(
            OperatorId::Refine,
            "horoscope",
            r#"{"horoscope":"Dedicated to the fields of astrology..."}"#,
        );
        assert!(o.parse_ok);
        assert_eq!(o.new_body.as_deref(), Some("Dedicated to the fields of astrology..."));
    }

    #[test]
    fn parse_fenced_output() {
        let o = parse_operator_response(OperatorId::Rewrite, "x", "Here you go: ```json {\"x\":\"y\"}```");
        assert_eq!(o.new_body.as_deref(), Some("y"));
    }

    #[test]
    fn parse_failures() {
        let o = parse_operator_response(OperatorId::Refine, "x", "no json here");
        assert!(!o.parse_ok && o.new_body.is_none());
        let o = parse_operator_response(OperatorId::Refine, "x", r#"{"x":""}"#);
        assert!(!o.parse_ok);
        let o = parse_operator_response(OperatorId::Refine, "x", r#"{"a":"1","b":"2"}"#);
        assert!(!o.parse_ok);
    }

    #[test]
    fn parse_reflect_reads_improved_key() {
        let raw = r#"{"Common problem extraction":"p","Root cause analysis":"r","Improved horoscope description":"new"}"#;
        let o = parse_operator_response(OperatorId::Reflect, "horoscope", raw);
        assert_eq!(o.new_body.as_deref(), Some("new"));
    }

    #[test]
    fn parse_define_sort_order() {
        let o = parse_operator_response(OperatorId::DefineSort, "", r#"{"order":["s2","s0","s1"]}"#);
        assert_eq!(o.new_order.unwrap(), vec![SectionId::from("s2"), SectionId::from("s0"), SectionId::from("s1")]);
        let o = parse_operator_response(OperatorId::DefineSort, "", r#"sure: ["s1","s0"]"#);
        assert!(o.parse_ok);
        let o = parse_operator_response(OperatorId::DefineSort, "", r#"{"order":[1,2]}"#);
        assert!(!o.parse_ok);
    }

    #[test]
    fn repeat_instructions_places_sentence_before_output() {
        let p = prompt();
        let target = p.sections()[0].id.clone();
        let next = repeat_instructions(&p, &target).unwrap();
        assert_eq!(next.sections()[0].body, p.sections()[0].body);
        assert_eq!(
            next.sections()[1].body,
            "Example: none.\nRemember: Focus on astrology, horoscope analysis, fortune prediction and other horoscope-related content."
        );
        assert_eq!(next.sections()[2], p.sections()[2]);
    }

    #[test]
    fn first_sentence_variants() {
        assert_eq!(first_sentence("One. Two."), Some("One."));
        assert_eq!(first_sentence("no terminator"), Some("no terminator"));
        assert_eq!(first_sentence("line one\nline two"), Some("line one"));
        assert_eq!(first_sentence("   "), None);
        assert_eq!(first_sentence("你好。世界"), Some("你好。"));
    }

    #[test]
    fn operator_ids_round_trip_through_strings() {
        for op in OperatorId::ALL {
            assert_eq!(op.as_str().parse::<OperatorId>().unwrap(), op);
            assert_eq!(serde_json::to_string(&op).unwrap(), format!("\"{}\"", op.as_str()));
        }
        assert!("telepathy".parse::<OperatorId>().is_err());
    }
}
