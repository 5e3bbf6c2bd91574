//! Runs a prompt over a dataset slice and scores the answers.

use promptflow_core::metrics::{self, is_correct, Average, ScoreOptions};
use promptflow_core::operators::templates::fill;
use promptflow_core::{
    BadCase, GenerationRequest, MetaPrompt, MetricReport, Objective, Prediction, PromptError, TaskKind,
};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError};
use crate::dataset::ExampleRecord;

pub const DEFAULT_BAD_CASE_CAP: usize = 20;

pub const DIAGNOSIS_TEMPLATE: &str = r#"A model was given the prompt below and answered one example incorrectly.

Prompt:
{{Prompt}}

Expected output:
{{Expected}}

Model output:
{{Predicted}}

In one or two sentences, state the most likely reason the prompt led to this mistake. Reply with the reason only."#;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub task: TaskKind,
    pub objective: Objective,
    pub cls_average: Average,
    pub bad_case_cap: usize,
    pub diagnose: bool,
    pub seed: u64,
    pub model: String,
    pub max_tokens: u32,
}

impl EvalOptions {
    pub fn new(task: TaskKind) -> Self {
        Self {
            task,
            objective: Objective::F1,
            cls_average: Average::Micro,
            bad_case_cap: DEFAULT_BAD_CASE_CAP,
            diagnose: false,
            seed: 0,
            model: String::new(),
            max_tokens: 1024,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("dataset slice is empty")]
    EmptyDataset,
    #[error("example {id}: {source}")]
    Backend { id: String, source: BackendError },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Metric(#[from] promptflow_core::MetricError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricReport,
    pub bad_cases: Vec<BadCase>,
    /// Raw model output per example, in dataset order.
    pub outputs: Vec<String>,
}

impl Evaluation {
    pub fn objective(&self) -> f64 {
        self.report.objective_value()
    }
}

/// The request sent for one example.
pub fn example_request(
    prompt: &MetaPrompt,
    example: &ExampleRecord,
    opts: &EvalOptions,
) -> Result<GenerationRequest, PromptError> {
    let mut req = GenerationRequest::user(prompt.render(&example.input)?);
    req.model = opts.model.clone();
    req.max_tokens = opts.max_tokens;
    Ok(req)
}

/// Renders the prompt for every example, generates, parses and scores.
/// Up to `bad_case_cap` failures are sampled uniformly with the seed.
pub fn evaluate(
    prompt: &MetaPrompt,
    examples: &[ExampleRecord],
    backend: &dyn Backend,
    opts: &EvalOptions,
) -> Result<Evaluation, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let reqs = examples
        .iter()
        .map(|e| example_request(prompt, e, opts))
        .collect::<Result<Vec<_>, _>>()?;
    let results = backend.generate_batch(&reqs);
    let mut outputs = Vec::with_capacity(examples.len());
    for (e, r) in examples.iter().zip(results) {
        let r = r.map_err(|source| EvalError::Backend { id: e.id.clone(), source })?;
        outputs.push(r.text);
    }
    let predictions: Vec<(String, Prediction)> = examples
        .iter()
        .zip(&outputs)
        .map(|(e, raw)| (e.id.clone(), metrics::parse_prediction(opts.task, raw)))
        .collect();
    let gold: Vec<(String, promptflow_core::Answer)> =
        examples.iter().map(|e| (e.id.clone(), e.gold.clone())).collect();
    let report = metrics::score(
        opts.task,
        &gold,
        &predictions,
        ScoreOptions { objective: opts.objective, cls_average: opts.cls_average },
    )?;

    let failures: Vec<usize> =
        (0..examples.len()).filter(|&i| !is_correct(&examples[i].gold, &predictions[i].1)).collect();
    let take = failures.len().min(opts.bad_case_cap);
    let mut rng = promptflow_core::rng::seeded(opts.seed);
    let mut chosen: Vec<usize> = sample(&mut rng, failures.len(), take).into_iter().map(|i| failures[i]).collect();
    chosen.sort_unstable();
    let mut bad_cases: Vec<BadCase> = chosen
        .into_iter()
        .map(|i| {
            let e = &examples[i];
            BadCase {
                example_id: e.id.clone(),
                input: e.input.clone(),
                expected: e.gold.to_contract_json(&e.input),
                predicted: outputs[i].trim().to_string(),
                reason: String::new(),
            }
        })
        .collect();
    if opts.diagnose && !bad_cases.is_empty() {
        diagnose(prompt, &mut bad_cases, backend, opts)?;
    }
    Ok(Evaluation { report, bad_cases, outputs })
}

/// Fills each bad case's reason with a one-call diagnosis.
pub fn diagnose(
    prompt: &MetaPrompt,
    bad_cases: &mut [BadCase],
    backend: &dyn Backend,
    opts: &EvalOptions,
) -> Result<(), EvalError> {
    let reqs = bad_cases
        .iter()
        .map(|b| {
            let rendered = prompt.render(&b.input)?;
            let text = fill(
                DIAGNOSIS_TEMPLATE,
                &[("Prompt", &rendered), ("Expected", &b.expected), ("Predicted", &b.predicted)],
            );
            let mut req = GenerationRequest::user(text);
            req.model = opts.model.clone();
            req.max_tokens = opts.max_tokens;
            Ok(req)
        })
        .collect::<Result<Vec<_>, PromptError>>()?;
    for (b, r) in bad_cases.iter_mut().zip(backend.generate_batch(&reqs)) {
        let r = r.map_err(|source| EvalError::Backend { id: b.example_id.clone(), source })?;
        b.reason = r.text.trim().to_string();
    }
    Ok(())
}
