#![allow(dead_code)]

use std::path::PathBuf;

use promptflow::backend::{BackendError, FnBackend};
use promptflow::config::RunConfig;
use promptflow::dataset::ExampleRecord;
use promptflow::engine::Datasets;
use promptflow_core::prompt::{TemplateFile, TemplateSection};
use promptflow_core::{Answer, GenerationRequest, MetaPrompt, TaskKind};

pub const OUTPUT_SECTION: &str = "Input:\n{{Input}}\n\nOutput:\n{\"label\":\"\"}";

pub fn gold(i: usize) -> &'static str {
    if i.is_multiple_of(2) {
        "A"
    } else {
        "B"
    }
}

pub fn examples(range: std::ops::Range<usize>) -> Vec<ExampleRecord> {
    range
        .map(|i| ExampleRecord {
            id: format!("d{i:03}"),
            task: TaskKind::Cls,
            input: format!("doc {i}"),
            gold: Answer::Cls(gold(i).into()),
        })
        .collect()
}

pub fn datasets(train: usize, test: usize) -> Datasets {
    Datasets {
        train: examples(0..train),
        test: examples(train..train + test),
        labels: vec!["A".into(), "B".into()],
    }
}

/// Editable sections with the given bodies, followed by a fixed output
/// section.
pub fn template(editable: &[(&str, &str)]) -> MetaPrompt {
    let mut sections: Vec<TemplateSection> = editable
        .iter()
        .map(|(name, body)| TemplateSection { name: (*name).into(), body: (*body).into(), editable: true })
        .collect();
    sections.push(TemplateSection { name: "output_format".into(), body: OUTPUT_SECTION.into(), editable: false });
    MetaPrompt::from_template(TemplateFile {
        sections,
        input_placeholder: "{{Input}}".into(),
        output_contract: "{\"label\":\"\"}".into(),
    })
    .unwrap()
}

pub fn config(iterations: u32) -> RunConfig {
    let mut c = RunConfig { iterations, beam_init: 1, convergence_patience: 1000, ..RunConfig::default() };
    c.labels = vec!["A".into(), "B".into()];
    c.dataset.train = PathBuf::from("unused.jsonl");
    c.backend.mock_script = Some(PathBuf::from("unused.json"));
    c
}

/// The example index of an evaluation request, or `None` for operator calls.
pub fn example_index(text: &str) -> Option<usize> {
    let start = text.rfind("Input:\ndoc ")? + "Input:\ndoc ".len();
    let end = text[start..].find("\n\nOutput:")? + start;
    text[start..end].parse().ok()
}

pub fn label_json(i: usize, correct: bool) -> String {
    let l = gold(i);
    let l = if correct { l } else if l == "A" { "B" } else { "A" };
    format!("{{\"label\":\"{l}\"}}")
}

/// The section body quoted in a refine request.
pub fn refine_body(text: &str) -> Option<String> {
    let start = text.find(REFINE_BEFORE)? + REFINE_BEFORE.len();
    let end = text[start..].find(REFINE_AFTER)? + start;
    Some(text[start..end].to_string())
}

const REFINE_BEFORE: &str = "the original expression is as follows:\n";
const REFINE_AFTER: &str = "\n\nPlease use the \"Refine\" method";

pub fn is_refine(text: &str) -> bool {
    text.contains("\"Refine\" optimization method")
}

/// A backend that answers evaluation requests with `answer(text, index)`
/// and operator requests with `edit(text)`.
pub fn environment(
    answer: impl Fn(&str, usize) -> bool + Send + Sync + 'static,
    edit: impl Fn(&str) -> Result<String, BackendError> + Send + Sync + 'static,
) -> FnBackend {
    FnBackend::new(move |req: &GenerationRequest| {
        let text = req.text();
        match example_index(&text) {
            Some(i) => Ok(label_json(i, answer(&text, i))),
            None => edit(&text),
        }
    })
}

pub fn body_response(body: &str) -> String {
    serde_json::json!({ "section": body }).to_string()
}
