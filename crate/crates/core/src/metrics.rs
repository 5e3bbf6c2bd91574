//! Prediction parsing and precision/recall/F1 scoring for NER, CLS and MRC.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::json::first_object;
use crate::task::TaskKind;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("prediction ids do not line up with gold ids (missing or extra `{0}`)")]
    Alignment(String),
    #[error("answer for `{0}` does not match the task kind")]
    TaskMismatch(String),
    #[error("score {0} is outside [0, 1]")]
    OutOfRange(f64),
}

/// Which metric the optimizer maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[default]
    F1,
    Precision,
    Recall,
}

/// How the CLS overall row aggregates per-label cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Average {
    #[default]
    Micro,
    Macro,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Scores {
    pub fn get(&self, objective: Objective) -> f64 {
        match objective {
            Objective::F1 => self.f1,
            Objective::Precision => self.precision,
            Objective::Recall => self.recall,
        }
    }
}

/// Character span `[start, end)`.
pub type Span = (usize, usize);

/// A task-typed answer, gold or predicted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "task", content = "value")]
pub enum Answer {
    /// Entity label -> spans.
    Ner(BTreeMap<String, BTreeSet<Span>>),
    Cls(String),
    /// Acceptable answer strings; empty means unanswerable. Predictions carry
    /// at most one.
    Mrc(Vec<String>),
}

impl Answer {
    pub fn task(&self) -> TaskKind {
        match self {
            Answer::Ner(_) => TaskKind::Ner,
            Answer::Cls(_) => TaskKind::Cls,
            Answer::Mrc(_) => TaskKind::Mrc,
        }
    }

    /// Renders the answer in the shape the output contract asks for. NER
    /// mentions are cut out of `input` by character offset.
    pub fn to_contract_json(&self, input: &str) -> String {
        let v = match self {
            Answer::Cls(l) => json!({ "label": l }),
            Answer::Mrc(a) => json!({ "answer": a.first().cloned().unwrap_or_default() }),
            Answer::Ner(map) => {
                let chars: Vec<char> = input.chars().collect();
                let mut out = serde_json::Map::new();
                for (label, spans) in map {
                    let mut mentions = serde_json::Map::new();
                    for &(s, e) in spans {
                        let mention: String =
                            chars.get(s..e.min(chars.len())).unwrap_or(&[]).iter().collect();
                        let entry = mentions.entry(mention).or_insert_with(|| json!([]));
                        if let Value::Array(a) = entry {
                            a.push(json!([s, e]));
                        }
                    }
                    out.insert(label.clone(), Value::Object(mentions));
                }
                Value::Object(out)
            }
        };
        v.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Answer(Answer),
    /// The model output could not be read; scored as a total miss.
    FormatFailure,
}

/// An example the prompt got wrong, optionally with a diagnosed reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BadCase {
    pub example_id: String,
    pub input: String,
    pub expected: String,
    pub predicted: String,
    #[serde(default)]
    pub reason: String,
}

impl BadCase {
    /// The diagnosed reason, or a factual expected/predicted line when no
    /// diagnosis was run.
    pub fn reason_text(&self) -> String {
        if self.reason.is_empty() {
            alloc::format!(
                "Input: {} | expected: {} | predicted: {}",
                self.input,
                self.expected,
                self.predicted
            )
        } else {
            self.reason.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricCell {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// Gold count (tp + fn) for span/label cells, example count for MRC.
    pub support: u64,
}

impl MetricCell {
    /// Cell from raw counts. A cell with nothing to find and nothing
    /// predicted counts as perfect agreement.
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        if tp + fp + fn_ == 0 {
            return Self { precision: 1.0, recall: 1.0, f1: 1.0, tp, fp, fn_, support: 0 };
        }
        let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1, tp, fp, fn_, support: tp + fn_ }
    }

    pub fn scores(&self) -> Scores {
        Scores { precision: self.precision, recall: self.recall, f1: self.f1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: TaskKind,
    pub objective: Objective,
    pub overall: MetricCell,
    pub per_label: BTreeMap<String, MetricCell>,
    pub examples: usize,
    pub format_failures: usize,
}

impl MetricReport {
    pub fn objective_value(&self) -> f64 {
        self.overall.scores().get(self.objective)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ScoreOptions {
    pub objective: Objective,
    pub cls_average: Average,
}

/// Loss as the complement of a score in `[0, 1]`.
pub fn loss(score: f64) -> Result<f64, MetricError> {
    if !(0.0..=1.0).contains(&score) {
        return Err(MetricError::OutOfRange(score));
    }
    Ok(1.0 - score)
}

/// Reads a model answer according to the task's output contract.
pub fn parse_prediction(task: TaskKind, raw: &str) -> Prediction {
    let Some(obj) = first_object(raw) else {
        return Prediction::FormatFailure;
    };
    match task {
        TaskKind::Cls => match obj.get("label") {
            Some(Value::String(l)) => Prediction::Answer(Answer::Cls(l.trim().to_string())),
            _ => Prediction::FormatFailure,
        },
        TaskKind::Mrc => match obj.get("answer") {
            Some(Value::String(a)) => {
                let a = a.trim();
                let answers = if a.is_empty() { Vec::new() } else { alloc::vec![a.to_string()] };
                Prediction::Answer(Answer::Mrc(answers))
            }
            _ => Prediction::FormatFailure,
        },
        TaskKind::Ner => {
            let mut spans: BTreeMap<String, BTreeSet<Span>> = BTreeMap::new();
            for (label, mentions) in obj {
                let Value::Object(mentions) = mentions else { continue };
                for offsets in mentions.values() {
                    let Value::Array(pairs) = offsets else { continue };
                    for pair in pairs {
                        if let Some((s, e)) = span_of(pair) {
                            spans.entry(label.clone()).or_default().insert((s, e));
                        }
                    }
                }
            }
            Prediction::Answer(Answer::Ner(spans))
        }
    }
}

fn span_of(v: &Value) -> Option<Span> {
    let a = v.as_array()?;
    if a.len() != 2 {
        return None;
    }
    let s = a[0].as_u64()? as usize;
    let e = a[1].as_u64()? as usize;
    (s < e).then_some((s, e))
}

/// True when the prediction fully matches gold.
pub fn is_correct(gold: &Answer, pred: &Prediction) -> bool {
    match (gold, pred) {
        (_, Prediction::FormatFailure) => false,
        (Answer::Mrc(g), Prediction::Answer(Answer::Mrc(p))) => {
            mrc_example(g, p.first().map(String::as_str)).f1 >= 1.0
        }
        (g, Prediction::Answer(p)) => g == p,
    }
}

/// Scores predictions against gold, matched by example id.
pub fn score(
    task: TaskKind,
    gold: &[(String, Answer)],
    predictions: &[(String, Prediction)],
    options: ScoreOptions,
) -> Result<MetricReport, MetricError> {
    let mut by_id: BTreeMap<&str, &Prediction> = BTreeMap::new();
    for (id, p) in predictions {
        if by_id.insert(id.as_str(), p).is_some() {
            return Err(MetricError::Alignment(id.clone()));
        }
    }
    if by_id.len() != gold.len() {
        let gold_ids: BTreeSet<&str> = gold.iter().map(|(id, _)| id.as_str()).collect();
        let stray = by_id.keys().find(|k| !gold_ids.contains(*k)).copied().unwrap_or("?");
        return Err(MetricError::Alignment(stray.into()));
    }
    let mut pairs = Vec::with_capacity(gold.len());
    for (id, g) in gold {
        if g.task() != task {
            return Err(MetricError::TaskMismatch(id.clone()));
        }
        let p = by_id.get(id.as_str()).ok_or_else(|| MetricError::Alignment(id.clone()))?;
        if let Prediction::Answer(a) = p {
            if a.task() != task {
                return Err(MetricError::TaskMismatch(id.clone()));
            }
        }
        pairs.push((g, *p));
    }
    let format_failures =
        pairs.iter().filter(|(_, p)| matches!(p, Prediction::FormatFailure)).count();
    let (overall, per_label) = match task {
        TaskKind::Ner => score_ner(&pairs),
        TaskKind::Cls => score_cls(&pairs, options.cls_average),
        TaskKind::Mrc => (score_mrc(&pairs), BTreeMap::new()),
    };
    Ok(MetricReport {
        task,
        objective: options.objective,
        overall,
        per_label,
        examples: gold.len(),
        format_failures,
    })
}

type Counts = BTreeMap<String, (u64, u64, u64)>;

fn cells(counts: &Counts) -> BTreeMap<String, MetricCell> {
    counts
        .iter()
        .map(|(l, &(tp, fp, fn_))| (l.clone(), MetricCell::from_counts(tp, fp, fn_)))
        .collect()
}

fn totals(counts: &Counts) -> (u64, u64, u64) {
    counts.values().fold((0, 0, 0), |acc, c| (acc.0 + c.0, acc.1 + c.1, acc.2 + c.2))
}

fn score_ner(pairs: &[(&Answer, &Prediction)]) -> (MetricCell, BTreeMap<String, MetricCell>) {
    let empty = BTreeMap::new();
    let mut counts: Counts = BTreeMap::new();
    for (g, p) in pairs {
        let Answer::Ner(gold) = g else { continue };
        let pred = match p {
            Prediction::Answer(Answer::Ner(m)) => m,
            _ => &empty,
        };
        let labels: BTreeSet<&String> = gold.keys().chain(pred.keys()).collect();
        for label in labels {
            let gs = gold.get(label);
            let ps = pred.get(label);
            let c = counts.entry(label.clone()).or_default();
            for span in gs.into_iter().flatten() {
                if ps.is_some_and(|ps| ps.contains(span)) {
                    c.0 += 1;
                } else {
                    c.2 += 1;
                }
            }
            for span in ps.into_iter().flatten() {
                if !gs.is_some_and(|gs| gs.contains(span)) {
                    c.1 += 1;
                }
            }
        }
    }
    counts.retain(|_, c| c.0 + c.1 + c.2 > 0);
    let (tp, fp, fn_) = totals(&counts);
    (MetricCell::from_counts(tp, fp, fn_), cells(&counts))
}

fn score_cls(
    pairs: &[(&Answer, &Prediction)],
    average: Average,
) -> (MetricCell, BTreeMap<String, MetricCell>) {
    let mut counts: Counts = BTreeMap::new();
    for (g, p) in pairs {
        let Answer::Cls(gold) = g else { continue };
        match p {
            Prediction::Answer(Answer::Cls(pred)) if pred == gold => {
                counts.entry(gold.clone()).or_default().0 += 1;
            }
            Prediction::Answer(Answer::Cls(pred)) => {
                counts.entry(pred.clone()).or_default().1 += 1;
                counts.entry(gold.clone()).or_default().2 += 1;
            }
            _ => counts.entry(gold.clone()).or_default().2 += 1,
        }
    }
    let per_label = cells(&counts);
    let (tp, fp, fn_) = totals(&counts);
    let overall = match average {
        Average::Micro => MetricCell::from_counts(tp, fp, fn_),
        Average::Macro => {
            let n = per_label.len().max(1) as f64;
            let mut cell = MetricCell::from_counts(tp, fp, fn_);
            cell.precision = per_label.values().map(|c| c.precision).sum::<f64>() / n;
            cell.recall = per_label.values().map(|c| c.recall).sum::<f64>() / n;
            cell.f1 = per_label.values().map(|c| c.f1).sum::<f64>() / n;
            cell
        }
    };
    (overall, per_label)
}

/// Lowercased tokens with punctuation stripped. CJK characters are tokens on
/// their own since those scripts do not separate words with spaces.
pub fn mrc_tokens(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            if is_cjk(ch) {
                if !cur.is_empty() {
                    tokens.push(core::mem::take(&mut cur));
                }
                tokens.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        } else if !cur.is_empty() {
            tokens.push(core::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

fn is_cjk(ch: char) -> bool {
    matches!(ch as u32, 0x2E80..=0x9FFF | 0xAC00..=0xD7AF | 0xF900..=0xFAFF | 0x20000..=0x2FA1F)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct TokenScore {
    precision: f64,
    recall: f64,
    f1: f64,
    overlap: u64,
    pred_len: u64,
    gold_len: u64,
}

fn token_score(gold: &str, pred: &str) -> TokenScore {
    let g = mrc_tokens(gold);
    let p = mrc_tokens(pred);
    let mut remaining: BTreeMap<&str, u64> = BTreeMap::new();
    for t in &g {
        *remaining.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0u64;
    for t in &p {
        if let Some(c) = remaining.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    let (pl, gl) = (p.len() as u64, g.len() as u64);
    let (precision, recall, f1) = match (pl, gl) {
        (0, 0) => (1.0, 1.0, 1.0),
        (0, _) | (_, 0) => (0.0, 0.0, 0.0),
        _ if overlap == 0 => (0.0, 0.0, 0.0),
        _ => {
            let p = overlap as f64 / pl as f64;
            let r = overlap as f64 / gl as f64;
            (p, r, 2.0 * p * r / (p + r))
        }
    };
    TokenScore { precision, recall, f1, overlap, pred_len: pl, gold_len: gl }
}

fn mrc_example(gold: &[String], pred: Option<&str>) -> TokenScore {
    let pred = pred.unwrap_or("");
    if gold.is_empty() {
        return token_score("", pred);
    }
    gold.iter()
        .map(|g| token_score(g, pred))
        .fold(None, |best: Option<TokenScore>, s| match best {
            Some(b) if b.f1 >= s.f1 => Some(b),
            _ => Some(s),
        })
        .expect("gold is nonempty")
}

fn score_mrc(pairs: &[(&Answer, &Prediction)]) -> MetricCell {
    let n = pairs.len();
    if n == 0 {
        return MetricCell::from_counts(0, 0, 0);
    }
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (g, p) in pairs {
        let Answer::Mrc(gold) = g else { continue };
        let s = match p {
            Prediction::Answer(Answer::Mrc(a)) => mrc_example(gold, a.first().map(String::as_str)),
            _ => {
                let gold_len = gold.first().map(|g| mrc_tokens(g).len() as u64).unwrap_or(0);
                TokenScore {
                    precision: 0.0,
                    recall: 0.0,
                    f1: 0.0,
                    overlap: 0,
                    pred_len: 0,
                    gold_len,
                }
            }
        };
        p_sum += s.precision;
        r_sum += s.recall;
        f_sum += s.f1;
        tp += s.overlap;
        fp += s.pred_len - s.overlap;
        fn_ += s.gold_len - s.overlap;
    }
    let n_f = n as f64;
    MetricCell {
        precision: p_sum / n_f,
        recall: r_sum / n_f,
        f1: f_sum / n_f,
        tp,
        fp,
        fn_,
        support: n as u64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;

    fn ner(spans: &[(&str, usize, usize)]) -> Answer {
        let mut m: BTreeMap<String, BTreeSet<Span>> = BTreeMap::new();
        for &(l, s, e) in spans {
            m.entry(l.into()).or_default().insert((s, e));
        }
        Answer::Ner(m)
    }

    fn ids<T: Clone>(xs: &[T]) -> Vec<(String, T)> {
        xs.iter().enumerate().map(|(i, x)| (format!("e{i}"), x.clone())).collect()
    }

    #[test]
    fn parses_cls_label() {
        assert_eq!(
            parse_prediction(TaskKind::Cls, r#"{"label":"Games"}"#),
            Prediction::Answer(Answer::Cls("Games".into()))
        );
    }

    #[test]
    fn parses_ner_spans() {
        assert_eq!(
            parse_prediction(TaskKind::Ner, r#"{"name":{"张三":[[0,2]]}}"#),
            Prediction::Answer(ner(&[("name", 0, 2)]))
        );
    }

    #[test]
    fn prose_without_json_is_format_failure() {
        for task in [TaskKind::Cls, TaskKind::Ner, TaskKind::Mrc] {
            assert_eq!(
                parse_prediction(task, "I think the answer is..."),
                Prediction::FormatFailure
            );
        }
    }

    #[test]
    fn mrc_answer_parse_and_unanswerable() {
        assert_eq!(
            parse_prediction(TaskKind::Mrc, "```json\n{\"answer\":\"Paris\"}\n```"),
            Prediction::Answer(Answer::Mrc(vec!["Paris".into()]))
        );
        assert_eq!(
            parse_prediction(TaskKind::Mrc, r#"{"answer":""}"#),
            Prediction::Answer(Answer::Mrc(vec![]))
        );
    }

    #[test]
    fn identity_predictions_are_perfect() {
        let gold = ids(&[ner(&[("a", 0, 2), ("b", 3, 5)]), ner(&[("a", 1, 4)])]);
        let preds: Vec<_> =
            gold.iter().map(|(i, g)| (i.clone(), Prediction::Answer(g.clone()))).collect();
        let r = score(TaskKind::Ner, &gold, &preds, ScoreOptions::default()).unwrap();
        assert_eq!(r.overall.f1, 1.0);
        assert!(r.per_label.values().all(|c| c.precision == 1.0 && c.recall == 1.0));
    }

    #[test]
    fn ner_one_correct_one_spurious() {
        let gold = ids(&[ner(&[("a", 0, 2), ("b", 3, 5)])]);
        let preds = ids(&[Prediction::Answer(ner(&[("a", 0, 2), ("b", 6, 8)]))]);
        let r = score(TaskKind::Ner, &gold, &preds, ScoreOptions::default()).unwrap();
        assert_eq!((r.overall.precision, r.overall.recall, r.overall.f1), (0.5, 0.5, 0.5));
        let b = r.per_label["b"];
        assert_eq!((b.tp, b.fp, b.fn_), (0, 1, 1));
    }

    #[test]
    fn cls_three_wrong_of_ten() {
        let gold: Vec<_> = (0..10)
            .map(|i| (format!("e{i}"), Answer::Cls(if i % 2 == 0 { "A" } else { "B" }.into())))
            .collect();
        let preds: Vec<_> = gold
            .iter()
            .enumerate()
            .map(|(i, (id, g))| {
                let Answer::Cls(l) = g else { unreachable!() };
                let p = if i < 3 { if l == "A" { "B" } else { "A" } } else { l.as_str() };
                (id.clone(), Prediction::Answer(Answer::Cls(p.into())))
            })
            .collect();
        let r = score(TaskKind::Cls, &gold, &preds, ScoreOptions::default()).unwrap();
        assert!((r.overall.f1 - 0.7).abs() < 1e-12);
    }

    #[test]
    fn cls_macro_switch() {
        let gold = ids(&[Answer::Cls("A".into()), Answer::Cls("A".into()), Answer::Cls("B".into())]);
        let preds = ids(&[
            Prediction::Answer(Answer::Cls("A".into())),
            Prediction::Answer(Answer::Cls("A".into())),
            Prediction::Answer(Answer::Cls("A".into())),
        ]);
        let opts = ScoreOptions { cls_average: Average::Macro, ..Default::default() };
        let r = score(TaskKind::Cls, &gold, &preds, opts).unwrap();
        // A: P=2/3 R=1 F1=0.8; B: 0.
        assert!((r.overall.f1 - 0.4).abs() < 1e-12);
    }

    #[test]
    fn alignment_errors() {
        let gold = ids(&[Answer::Cls("A".into())]);
        let preds = vec![("other".into(), Prediction::Answer(Answer::Cls("A".into())))];
        assert!(matches!(
            score(TaskKind::Cls, &gold, &preds, ScoreOptions::default()),
            Err(MetricError::Alignment(_))
        ));
        let preds = vec![
            ("e0".into(), Prediction::FormatFailure),
            ("e0".into(), Prediction::FormatFailure),
        ];
        assert!(score(TaskKind::Cls, &gold, &preds, ScoreOptions::default()).is_err());
    }

    #[test]
    fn mrc_token_f1_and_unanswerable() {
        let gold = ids(&[
            Answer::Mrc(vec!["The Eiffel Tower".into()]),
            Answer::Mrc(vec![]),
            Answer::Mrc(vec![]),
        ]);
        let preds = ids(&[
            Prediction::Answer(Answer::Mrc(vec!["eiffel tower!".into()])),
            Prediction::Answer(Answer::Mrc(vec![])),
            Prediction::Answer(Answer::Mrc(vec!["something".into()])),
        ]);
        let r = score(TaskKind::Mrc, &gold, &preds, ScoreOptions::default()).unwrap();
        // example 0: P=1, R=2/3, F1=0.8; example 1: 1; example 2: 0.
        assert!((r.overall.f1 - (0.8 + 1.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn mrc_cjk_tokens() {
        assert_eq!(mrc_tokens("北京 Capital!"), vec!["北", "京", "capital"]);
    }

    #[test]
    fn loss_values() {
        assert_eq!(loss(0.64513).unwrap(), 0.35487);
        assert_eq!(loss(1.0).unwrap(), 0.0);
        assert_eq!(loss(0.0).unwrap(), 1.0);
        assert!(loss(1.5).is_err());
    }

    #[test]
    fn contract_json_for_ner_uses_char_offsets() {
        let a = ner(&[("name", 0, 2)]);
        assert_eq!(a.to_contract_json("张三去北京"), r#"{"name":{"张三":[[0,2]]}}"#);
        assert_eq!(
            parse_prediction(TaskKind::Ner, &a.to_contract_json("张三去北京")),
            Prediction::Answer(a)
        );
    }
}
