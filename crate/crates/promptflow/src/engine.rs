//! The training loop: beam initialization, per-epoch operator edits scored
//! against the current best prompt, matrix updates, retention, checkpoints
//! and the final report.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use promptflow_core::matrix::{SelectionPair, TransitionMatrix};
use promptflow_core::msgd::{self, EditEvaluator, EpochError, GradientObservation, MsgdConfig};
use promptflow_core::operators::{
    apply_few_shot, build_request, few_shot_block, few_shot_indices, merge_deterministic,
    merge_llm_requests, parse_operator_response, rag_augment, repeat_instructions,
    self_consistency, FewShotItem, MergeMode, OperatorContext, Retriever, TemplateSet, ToyRetriever,
};
use promptflow_core::rng::{derive_seed, seeded, Rng as ChaRng};
use promptflow_core::sarsa::{self, SarsaConfig, TrajectoryStep};
use promptflow_core::{
    retention, Answer, BadCase, Candidate, ExperienceStore, GenerationRequest, LineageEntry,
    MetaPrompt, OperatorError, OperatorId, SectionId,
};

use crate::backend::{Backend, BackendError};
use crate::config::{OptimizerKind, RunConfig};
use crate::dataset::{self, DatasetError, ExampleRecord};
use crate::evaluation::{evaluate, EvalError, EvalOptions, Evaluation};
use crate::report::{
    to_json_pretty, EditRecord, IterationRecord, RunReport, SelectionCounts, StopReason, TestResult,
};

const SEED_SELECTION: u64 = 1;
const SEED_RETENTION: u64 = 2;
const SEED_BAD_CASES: u64 = 3;
const SEED_MINIBATCH: u64 = 4;
const SEED_OPERATORS: u64 = 5;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("operator call failed: {0}")]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] promptflow_core::PromptError),
    #[error(transparent)]
    Matrix(#[from] promptflow_core::MatrixError),
    #[error(transparent)]
    Experience(#[from] promptflow_core::ExperienceError),
    #[error("optimizer update failed: {0}")]
    Update(String),
    #[error("template has no editable sections")]
    NothingToEdit,
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Registry(#[from] crate::registry::RegistryError),
}

fn read_file(path: &Path) -> Result<String, EngineError> {
    std::fs::read_to_string(path).map_err(|source| EngineError::Read { path: path.to_path_buf(), source })
}

fn write_file(path: &Path, contents: &str) -> Result<(), EngineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|source| EngineError::Write { path: parent.to_path_buf(), source })?;
    }
    std::fs::write(path, contents).map_err(|source| EngineError::Write { path: path.to_path_buf(), source })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub train: Vec<ExampleRecord>,
    pub test: Vec<ExampleRecord>,
    pub labels: Vec<String>,
}

/// Loads and splits the configured dataset files.
pub fn load_datasets(cfg: &RunConfig) -> Result<Datasets, EngineError> {
    let d = &cfg.dataset;
    let mut all = dataset::load(&d.train, d.format)?;
    let (train, test) = match &d.test {
        Some(path) => {
            let mut test = dataset::load(path, d.format)?;
            if let Some(n) = d.train_size {
                all.truncate(n);
            }
            if let Some(n) = d.test_size {
                test.truncate(n);
            }
            (all, test)
        }
        None => match (d.train_size, d.test_size) {
            (None, None) => (all, Vec::new()),
            (Some(n), t) => {
                let n = n.min(all.len());
                let mut test = all.split_off(n);
                if let Some(t) = t {
                    test.truncate(t);
                }
                (all, test)
            }
            (None, Some(t)) => {
                let cut = all.len().saturating_sub(t);
                let test = all.split_off(cut);
                (all, test)
            }
        },
    };
    let labels = if cfg.labels.is_empty() {
        let mut both = train.clone();
        both.extend(test.iter().cloned());
        dataset::labels_of(&both)
    } else {
        cfg.labels.clone()
    };
    dataset::validate(&train, cfg.task, &labels)?;
    if !test.is_empty() {
        dataset::validate(&test, cfg.task, &labels)?;
    }
    Ok(Datasets { train, test, labels })
}

/// The configured template, or a skeleton built from task and labels.
pub fn load_template(cfg: &RunConfig, labels: &[String]) -> Result<MetaPrompt, EngineError> {
    match &cfg.template {
        Some(path) => Ok(MetaPrompt::from_template_json(&read_file(path)?)?),
        None => Ok(MetaPrompt::scratch(cfg.task, labels)),
    }
}

/// Matrix rows are the names of the editable sections.
pub fn section_rows(prompt: &MetaPrompt) -> Vec<String> {
    prompt.sections().iter().filter(|s| s.editable).map(|s| s.name.clone()).collect()
}

/// Uniform matrix, or the experience file lined up with this prompt.
pub fn initial_matrix(
    cfg: &RunConfig,
    prompt: &MetaPrompt,
) -> Result<(TransitionMatrix, Option<ExperienceStore>), EngineError> {
    let rows = section_rows(prompt);
    if rows.is_empty() {
        return Err(EngineError::NothingToEdit);
    }
    match &cfg.experience_in {
        Some(path) => {
            let store = ExperienceStore::parse(&read_file(path)?)?;
            if store.task_kind != cfg.task {
                log::warn!(
                    "experience file was trained on {} but this run is {}; loading it anyway",
                    store.task_kind,
                    cfg.task
                );
            }
            let m = store.align(&rows, &cfg.operators)?;
            Ok((m, Some(store)))
        }
        None => Ok((TransitionMatrix::init_uniform(rows, cfg.operators.clone())?, None)),
    }
}

pub struct TrainOutcome {
    pub best: Candidate,
    pub report: RunReport,
    pub matrix: TransitionMatrix,
    pub experience: ExperienceStore,
    pub run_dir: Option<PathBuf>,
}

struct Engine<'a> {
    cfg: &'a RunConfig,
    backend: &'a dyn Backend,
    templates: TemplateSet,
    retriever: Option<ToyRetriever>,
    train: Vec<ExampleRecord>,
    eval_opts: EvalOptions,
    cache: BTreeMap<String, Evaluation>,
}

impl<'a> Engine<'a> {
    fn objective(&self) -> promptflow_core::Objective {
        self.cfg.objective
    }

    fn evaluate(&mut self, prompt: &MetaPrompt) -> Result<&Evaluation, EngineError> {
        let fp = prompt.fingerprint();
        if !self.cache.contains_key(&fp) {
            let ev = evaluate(prompt, &self.train, self.backend, &self.eval_opts)?;
            self.cache.insert(fp.clone(), ev);
        }
        Ok(&self.cache[&fp])
    }

    fn score_candidate(&mut self, c: &mut Candidate, iteration: u32) -> Result<f64, EngineError> {
        let objective = self.objective();
        let ev = self.evaluate(&c.prompt)?;
        let scores = ev.report.overall.scores();
        c.record_score(iteration, scores)?;
        Ok(scores.get(objective))
    }

    fn request(&self, mut req: GenerationRequest, temperature: f64) -> GenerationRequest {
        req.model = self.cfg.backend.model.clone();
        req.max_tokens = self.cfg.backend.max_tokens;
        req.temperature = temperature;
        req
    }

    fn generate(&self, req: GenerationRequest, temperature: f64) -> Result<String, EngineError> {
        Ok(self.backend.generate(&self.request(req, temperature))?.text)
    }

    /// Beam initialization: `beam_init` variants of every editable section,
    /// the i-th candidate taking the i-th variant of each.
    fn initialize(&mut self, template: &MetaPrompt) -> Result<Vec<Candidate>, EngineError> {
        let mut pool = vec![Candidate::new(template.clone())];
        let beam = self.cfg.beam_init;
        if beam > 1 {
            let editable: Vec<_> = template.sections().iter().filter(|s| s.editable).collect();
            let mut reqs = Vec::with_capacity(editable.len() * beam);
            let mut ops = Vec::with_capacity(editable.len());
            for s in &editable {
                let op = if s.body.trim().is_empty() { OperatorId::Rewrite } else { OperatorId::Refine };
                ops.push(op);
                let req = build_request(op, &OperatorContext::new(template, &s.id), &self.templates)
                    .map_err(|e| EngineError::Update(e.to_string()))?;
                let req = self.request(req, self.cfg.beam_temperature);
                reqs.extend(std::iter::repeat_n(req, beam));
            }
            let results = self.backend.generate_batch(&reqs);
            let mut variants: Vec<Vec<Option<String>>> = vec![Vec::with_capacity(beam); editable.len()];
            for (k, r) in results.into_iter().enumerate() {
                let s = k / beam;
                let raw = r?.text;
                let outcome = parse_operator_response(ops[s], &editable[s].name, &raw);
                variants[s].push(outcome.new_body);
            }
            pool.clear();
            #[allow(clippy::needless_range_loop)]
            for i in 0..beam {
                let mut p = template.clone();
                for (s, section) in editable.iter().enumerate() {
                    if let Some(body) = &variants[s][i] {
                        match p.with_body(&section.id, body.clone()) {
                            Ok(next) => p = next,
                            Err(e) => log::debug!("variant {i} of `{}` rejected: {e}", section.name),
                        }
                    }
                }
                pool.push(Candidate::new(p));
            }
            let before = pool.len();
            let mut seen = BTreeSet::new();
            pool.retain(|c| seen.insert(c.fingerprint.clone()));
            if pool.len() < before {
                log::warn!("beam initialization produced {} distinct candidates out of {before}", pool.len());
            }
        }
        for c in pool.iter_mut() {
            self.score_candidate(c, 0)?;
        }
        Ok(pool)
    }

    /// Applies `op` to `target` of `base`. `Ok(None)` is a no-op edit with
    /// the reason; backend failures abort.
    fn apply_operator(
        &mut self,
        op: OperatorId,
        base: &Candidate,
        target: &SectionId,
        pool: &[Candidate],
        bad_cases: &[BadCase],
        seed: u64,
    ) -> Result<Result<MetaPrompt, String>, EngineError> {
        let prompt = &base.prompt;
        let name = prompt.section(target).map(|s| s.name.clone()).unwrap_or_default();
        let temp = self.cfg.operator_temperature;
        let skip = |e: OperatorError| Ok(Err(e.to_string()));
        let body_edit = |raw: &str, op: OperatorId| -> Result<MetaPrompt, String> {
            let outcome = parse_operator_response(op, &name, raw);
            let body = outcome.new_body.ok_or_else(|| "unparseable operator response".to_string())?;
            prompt.with_body(target, body).map_err(|e| e.to_string())
        };
        match op {
            OperatorId::Rewrite
            | OperatorId::Refine
            | OperatorId::Reflect
            | OperatorId::Cot
            | OperatorId::ShortInstruction
            | OperatorId::DiffEvolution => {
                let mut ctx = OperatorContext::new(prompt, target);
                ctx.bad_cases = bad_cases;
                ctx.siblings = pool;
                ctx.objective = self.objective();
                ctx.rng_seed = seed;
                let req = match build_request(op, &ctx, &self.templates) {
                    Ok(r) => r,
                    Err(e) => return skip(e),
                };
                let raw = self.generate(req, temp)?;
                Ok(body_edit(&raw, op))
            }
            OperatorId::SelfConsistency => {
                let req = match build_request(op, &OperatorContext::new(prompt, target), &self.templates) {
                    Ok(r) => r,
                    Err(e) => return skip(e),
                };
                let reqs = vec![self.request(req, temp); self.cfg.self_consistency_samples];
                let mut bodies = Vec::new();
                for r in self.backend.generate_batch(&reqs) {
                    if let Some(b) = parse_operator_response(op, &name, &r?.text).new_body {
                        bodies.push(b);
                    }
                }
                match self_consistency(&bodies) {
                    Some(b) => Ok(prompt.with_body(target, b.clone()).map_err(|e| e.to_string())),
                    None => Ok(Err("no parseable samples".into())),
                }
            }
            OperatorId::DefineSort => {
                let req = match build_request(op, &OperatorContext::new(prompt, target), &self.templates) {
                    Ok(r) => r,
                    Err(e) => return skip(e),
                };
                let raw = self.generate(req, temp)?;
                let outcome = parse_operator_response(op, &name, &raw);
                match outcome.new_order {
                    Some(order) => Ok(prompt.reorder(&order).map_err(|e| e.to_string())),
                    None => Ok(Err("unparseable order".into())),
                }
            }
            OperatorId::Rag => {
                let retriever = self.retriever.as_ref().map(|r| r as &dyn Retriever);
                let req = match rag_augment(prompt, target, retriever, &self.templates) {
                    Ok(r) => r,
                    Err(e) => return skip(e),
                };
                let raw = self.generate(req, temp)?;
                Ok(body_edit(&raw, op))
            }
            OperatorId::RepeatInstructions => match repeat_instructions(prompt, target) {
                Ok(p) => Ok(Ok(p)),
                Err(e) => skip(e),
            },
            OperatorId::FewShot => {
                let items: Vec<FewShotItem> = self
                    .train
                    .iter()
                    .map(|e| FewShotItem {
                        id: e.id.clone(),
                        input: e.input.clone(),
                        output: e.gold.to_contract_json(&e.input),
                        label: match &e.gold {
                            Answer::Cls(l) => Some(l.clone()),
                            _ => None,
                        },
                    })
                    .collect();
                let hard: BTreeSet<String> = bad_cases.iter().map(|b| b.example_id.clone()).collect();
                let k = self.cfg.few_shot_k.min(items.len());
                let idx = match few_shot_indices(&items, k, self.cfg.few_shot_strategy, Some(&hard), seed) {
                    Ok(i) => i,
                    Err(e) => return Ok(Err(e.to_string())),
                };
                let chosen: Vec<&FewShotItem> = idx.iter().map(|&i| &items[i]).collect();
                match apply_few_shot(prompt, target, &few_shot_block(&chosen)) {
                    Ok(p) => Ok(Ok(p)),
                    Err(e) => skip(e),
                }
            }
            OperatorId::Merge => {
                let mut parents: Vec<Candidate> = vec![base.clone()];
                parents.extend(pool.iter().filter(|c| c.fingerprint != base.fingerprint).cloned());
                if parents.len() < 2 {
                    return Ok(Err("merge needs at least two candidates".into()));
                }
                match self.cfg.merge_mode {
                    MergeMode::Deterministic => match merge_deterministic(&parents, self.objective()) {
                        Ok(p) => Ok(Ok(p)),
                        Err(e) => skip(e),
                    },
                    MergeMode::Llm => {
                        let reqs = match merge_llm_requests(&parents, self.objective(), &self.templates) {
                            Ok(r) => r,
                            Err(e) => return skip(e),
                        };
                        let mut merged = prompt.clone();
                        for (id, req) in reqs {
                            let raw = self.generate(req, 0.0)?;
                            let section_name = merged.section(&id).map(|s| s.name.clone()).unwrap_or_default();
                            if let Some(body) = parse_operator_response(op, &section_name, &raw).new_body {
                                if let Ok(next) = merged.with_body(&id, body) {
                                    merged = next;
                                }
                            }
                        }
                        Ok(Ok(merged))
                    }
                }
            }
        }
    }
}

/// Scores every selected edit of one epoch against the same base.
struct EpochEvaluator<'e, 'a> {
    engine: &'e mut Engine<'a>,
    base: &'e Candidate,
    base_score: f64,
    pool: &'e [Candidate],
    bad_cases: &'e [BadCase],
    iteration: u32,
    epoch_seed: u64,
    children: Vec<Candidate>,
    edits: Vec<EditRecord>,
}

impl EditEvaluator for EpochEvaluator<'_, '_> {
    type Error = EngineError;

    fn evaluate_pairs(&mut self, pairs: &[SelectionPair]) -> Result<Vec<(f64, f64)>, EngineError> {
        let mut out = Vec::with_capacity(pairs.len());
        for (k, pair) in pairs.iter().enumerate() {
            let target = self
                .base
                .prompt
                .section_by_name(&pair.section)
                .map(|s| s.id.clone())
                .ok_or_else(|| EngineError::Update(format!("section `{}` vanished", pair.section)))?;
            let seed = derive_seed(self.epoch_seed, k as u64);
            let applied = self.engine.apply_operator(
                pair.operator,
                self.base,
                &target,
                self.pool,
                self.bad_cases,
                seed,
            )?;
            let (cur, child_fp, note) = match applied {
                Ok(p) if p.fingerprint() != self.base.fingerprint => {
                    let entry = LineageEntry {
                        iteration: self.iteration,
                        section: target,
                        operator: pair.operator,
                        gain: 0.0,
                    };
                    let mut child = self.base.child(p, entry);
                    let cur = self.engine.score_candidate(&mut child, self.iteration)?;
                    child.lineage.last_mut().expect("child has an entry").gain = cur - self.base_score;
                    let fp = child.fingerprint.clone();
                    self.children.push(child);
                    (cur, Some(fp), None)
                }
                Ok(_) => (self.base_score, None, Some("edit left the prompt unchanged".to_string())),
                Err(reason) => (self.base_score, None, Some(reason)),
            };
            self.edits.push(EditRecord {
                section: pair.section.clone(),
                operator: pair.operator,
                score_prev: self.base_score,
                score_cur: cur,
                gradient: cur - self.base_score,
                applied: child_fp.is_some(),
                child_fingerprint: child_fp,
                note,
            });
            out.push((self.base_score, cur));
        }
        Ok(out)
    }
}

fn epoch_error(e: EpochError<EngineError>) -> EngineError {
    match e {
        EpochError::Evaluate(e) => e,
        other => EngineError::Update(other.to_string()),
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Current UTC time, or `SOURCE_DATE_EPOCH` when set so that reruns
/// produce identical files.
fn now() -> String {
    let fixed = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| chrono::DateTime::from_timestamp(secs, 0));
    fixed.unwrap_or_else(chrono::Utc::now).to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Runs the optimization. With `out_root` set, checkpoints and reports go
/// to `out_root/<run_id>/`.
pub fn train(
    cfg: &RunConfig,
    data: &Datasets,
    template: MetaPrompt,
    backend: &dyn Backend,
    out_root: Option<&Path>,
) -> Result<TrainOutcome, EngineError> {
    let started = std::time::Instant::now();
    let run_dir = out_root.map(|r| r.join(cfg.run_id()));
    let templates = match &cfg.operator_registry {
        Some(p) => crate::registry::load(p)?,
        None => TemplateSet::default(),
    };
    let retriever = match &cfg.rag_corpus {
        Some(p) => Some(ToyRetriever::new(
            read_file(p)?.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect(),
        )),
        None => None,
    };
    let mut eval_opts = EvalOptions::new(cfg.task);
    eval_opts.objective = cfg.objective;
    eval_opts.cls_average = cfg.cls_average;
    eval_opts.bad_case_cap = cfg.bad_case_cap;
    eval_opts.diagnose = cfg.diagnose_bad_cases;
    eval_opts.seed = derive_seed(cfg.seed, SEED_BAD_CASES);
    eval_opts.model = cfg.backend.model.clone();
    eval_opts.max_tokens = cfg.backend.max_tokens;
    let train = dataset::minibatch(&data.train, cfg.minibatch_fraction, derive_seed(cfg.seed, SEED_MINIBATCH));
    if train.is_empty() {
        return Err(DatasetError::Empty.into());
    }

    let (mut matrix, prior) = initial_matrix(cfg, &template)?;
    let mut engine = Engine {
        cfg,
        backend,
        templates,
        retriever,
        train,
        eval_opts: eval_opts.clone(),
        cache: BTreeMap::new(),
    };
    let objective = cfg.objective;
    let mut pool = engine.initialize(&template)?;
    retention::rank(&mut pool, objective);
    let initial_best = pool[0].objective(objective).unwrap_or(0.0);
    let initial_mean = mean(pool.iter().map(|c| c.objective(objective).unwrap_or(0.0)));
    let initial_pool_size = pool.len();

    let mut select_rng: ChaRng = seeded(derive_seed(cfg.seed, SEED_SELECTION));
    let mut retain_rng: ChaRng = seeded(derive_seed(cfg.seed, SEED_RETENTION));
    let msgd_cfg = MsgdConfig {
        alpha: cfg.learning_rate_alpha,
        rule: cfg.update_rule,
        q_floor: cfg.q_floor,
        pairs_per_epoch: cfg.pairs_per_epoch().min(matrix.rows() * matrix.cols()),
        selection: cfg.selection,
    };
    let sarsa_cfg = SarsaConfig {
        alpha: cfg.sarsa_alpha,
        gamma: cfg.sarsa_gamma,
        q_floor: cfg.q_floor,
        pairs_per_epoch: msgd_cfg.pairs_per_epoch,
        selection: cfg.selection,
        reward_mode: cfg.reward_mode,
    };

    let mut records: Vec<IterationRecord> = Vec::new();
    let mut stop_reason = StopReason::Completed;
    let mut previous_best = initial_best;
    let mut stale = 0;
    for t in 1..=cfg.iterations {
        let temperature = cfg.anneal_temperature_start * cfg.anneal_decay.powi(t as i32 - 1);
        let mut selections = SelectionCounts::new();
        let mut edits = Vec::new();
        let mut trajectory: Vec<TrajectoryStep> = Vec::new();
        let mut base_info = None;
        for g in 0..cfg.g_steps {
            retention::rank(&mut pool, objective);
            let base = pool[0].clone();
            let base_score = base.objective(objective).unwrap_or(0.0);
            base_info.get_or_insert((base.fingerprint.clone(), base_score));
            let bad_cases = engine.evaluate(&base.prompt)?.bad_cases.clone();
            let epoch_seed = derive_seed(cfg.seed, SEED_OPERATORS ^ ((t as u64) << 32 | g as u64));
            let snapshot = pool.clone();
            let mut ev = EpochEvaluator {
                engine: &mut engine,
                base: &base,
                base_score,
                pool: &snapshot,
                bad_cases: &bad_cases,
                iteration: t,
                epoch_seed,
                children: Vec::new(),
                edits: Vec::new(),
            };
            let observations: Vec<GradientObservation> = match cfg.optimizer {
                OptimizerKind::Msgd => msgd::msgd_epoch(&mut matrix, &msgd_cfg, &mut ev, &mut select_rng)
                    .map_err(epoch_error)?,
                OptimizerKind::MsgdRl => {
                    let (obs, steps) =
                        sarsa::rl_epoch(&mut matrix, &base.fingerprint, &sarsa_cfg, &mut ev, &mut select_rng)
                            .map_err(epoch_error)?;
                    trajectory.extend(steps);
                    obs
                }
            };
            for o in &observations {
                *selections.entry(o.pair.section.clone()).or_default().entry(o.pair.operator).or_insert(0) += 1;
            }
            let children = std::mem::take(&mut ev.children);
            edits.extend(std::mem::take(&mut ev.edits));
            pool.extend(children);
        }
        for _ in 0..cfg.d_steps {
            pool = retention::retain(pool, objective, cfg.top_k, cfg.anneal_count, temperature, &mut retain_rng);
        }
        let best = pool[0].objective(objective).unwrap_or(0.0);
        let (base_fingerprint, base_score) = base_info.expect("g_steps >= 1");
        let record = IterationRecord {
            iteration: t,
            base_fingerprint,
            base_score,
            best,
            mean: mean(pool.iter().map(|c| c.objective(objective).unwrap_or(0.0))),
            pool_size: pool.len(),
            anneal_temperature: temperature,
            selections,
            edits,
            trajectory,
            usage: backend.usage(),
        };
        if let Some(dir) = &run_dir {
            let it_dir = dir.join(format!("iter_{t:03}"));
            write_file(&it_dir.join("candidates.json"), &to_json_pretty(&pool))?;
            write_file(&it_dir.join("matrix.json"), &to_json_pretty(&matrix))?;
            write_file(&it_dir.join("report.json"), &to_json_pretty(&record))?;
        }
        log::info!("iteration {t}: best {best:.5}, pool {}", pool.len());
        records.push(record);
        if best >= 1.0 {
            stop_reason = StopReason::PerfectScore;
            break;
        }
        if best - previous_best < cfg.convergence_threshold {
            stale += 1;
        } else {
            stale = 0;
        }
        previous_best = best;
        if stale >= cfg.convergence_patience {
            stop_reason = StopReason::Converged;
            break;
        }
    }

    retention::rank(&mut pool, objective);
    let best = pool[0].clone();
    let best_train = best.objective(objective).unwrap_or(0.0);
    let test = if data.test.is_empty() {
        log::warn!("no test examples; skipping the final test evaluation");
        None
    } else {
        let ev = evaluate(&best.prompt, &data.test, backend, &eval_opts)?;
        Some(TestResult { objective: ev.objective(), report: ev.report })
    };
    let report = RunReport {
        run_id: cfg.run_id(),
        task: cfg.task,
        optimizer: cfg.optimizer,
        objective,
        seed: cfg.seed,
        operators: cfg.operators.clone(),
        initial_pool_size,
        initial_best,
        initial_mean,
        best_train,
        best_fingerprint: best.fingerprint.clone(),
        iterations: records,
        test,
        usage: backend.usage(),
        stop_reason,
    };
    let stamp = now();
    let experience = ExperienceStore::from_matrix(
        &matrix,
        cfg.task,
        prior.as_ref().map_or(0, |p| p.epochs_trained) + report.iterations.len() as u64,
        prior.as_ref().map_or_else(|| stamp.clone(), |p| p.created_at.clone()),
        stamp,
    );
    if let Some(dir) = &run_dir {
        write_file(&dir.join("report.json"), &to_json_pretty(&report))?;
        write_file(&dir.join("report.csv"), &report.csv())?;
        write_file(&dir.join("best_prompt.json"), &best.prompt.to_template_json())?;
        write_file(&dir.join("best_candidate.json"), &to_json_pretty(&best))?;
        write_file(&dir.join("matrix.json"), &to_json_pretty(&matrix))?;
        write_file(&dir.join("experience.json"), &experience.to_json())?;
        let timing = serde_json::json!({ "wall_clock_ms": started.elapsed().as_millis() as u64 });
        write_file(&dir.join("timing.json"), &to_json_pretty(&timing))?;
    }
    if let Some(path) = &cfg.experience_out {
        write_file(path, &experience.to_json())?;
    }
    Ok(TrainOutcome { best, report, matrix, experience, run_dir })
}
