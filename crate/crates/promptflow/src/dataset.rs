//! JSONL datasets and importers for common public formats.
//!
//! Native lines are serialized [`ExampleRecord`]s. The importers accept
//! Cluener-style NER (`{"text", "label": {type: {mention: [[s, e]]}}}`),
//! classification (`{"text", "label"}`) and reading comprehension
//! (`{"context", "question", "answers"}`) lines.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use promptflow_core::metrics::Span;
use promptflow_core::{Answer, TaskKind};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    pub task: TaskKind,
    pub input: String,
    pub gold: Answer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// Decide per line from the keys present.
    #[default]
    Auto,
    Native,
    Cluener,
    Cls,
    Mrc,
}

impl std::str::FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| format!("unknown dataset format `{s}` (auto, native, cluener, cls, mrc)"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("dataset is empty")]
    Empty,
    #[error("example {id} has task {found}, expected {expected}")]
    TaskMismatch { id: String, found: TaskKind, expected: TaskKind },
    #[error("example {id} uses label `{label}` which is not in the configured label set")]
    UnknownLabel { id: String, label: String },
    #[error("duplicate example id `{0}`")]
    DuplicateId(String),
}

fn line_err(line: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::Line { line, message: message.into() }
}

pub fn load(path: &Path, format: DatasetFormat) -> Result<Vec<ExampleRecord>, DatasetError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    parse_jsonl(&text, format)
}

pub fn parse_jsonl(text: &str, format: DatasetFormat) -> Result<Vec<ExampleRecord>, DatasetError> {
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(raw).map_err(|e| line_err(line, e.to_string()))?;
        let record = parse_record(&value, format, out.len(), line)?;
        check_record(&record, line)?;
        if !ids.insert(record.id.clone()) {
            return Err(DatasetError::DuplicateId(record.id));
        }
        out.push(record);
    }
    Ok(out)
}

fn detect(value: &Value) -> DatasetFormat {
    if value.get("gold").is_some() {
        DatasetFormat::Native
    } else if value.get("context").is_some() {
        DatasetFormat::Mrc
    } else if value.get("label").is_some_and(Value::is_object) {
        DatasetFormat::Cluener
    } else {
        DatasetFormat::Cls
    }
}

fn id_of(value: &Value, index: usize) -> String {
    match value.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => format!("ex{index:05}"),
    }
}

fn str_field<'a>(value: &'a Value, key: &str, line: usize) -> Result<&'a str, DatasetError> {
    value.get(key).and_then(Value::as_str).ok_or_else(|| line_err(line, format!("missing string field `{key}`")))
}

fn parse_record(
    value: &Value,
    format: DatasetFormat,
    index: usize,
    line: usize,
) -> Result<ExampleRecord, DatasetError> {
    let format = if format == DatasetFormat::Auto { detect(value) } else { format };
    match format {
        DatasetFormat::Auto => unreachable!("resolved above"),
        DatasetFormat::Native => {
            serde_json::from_value(value.clone()).map_err(|e| line_err(line, e.to_string()))
        }
        DatasetFormat::Cls => Ok(ExampleRecord {
            id: id_of(value, index),
            task: TaskKind::Cls,
            input: str_field(value, "text", line)?.to_string(),
            gold: Answer::Cls(str_field(value, "label", line)?.to_string()),
        }),
        DatasetFormat::Mrc => {
            let context = str_field(value, "context", line)?;
            let question = str_field(value, "question", line)?;
            let answers = match value.get("answers") {
                Some(Value::Array(a)) => a
                    .iter()
                    .map(|v| match v {
                        Value::String(s) => Some(s.clone()),
                        Value::Object(o) => o.get("text").and_then(Value::as_str).map(str::to_string),
                        _ => None,
                    })
                    .collect::<Option<Vec<String>>>()
                    .ok_or_else(|| line_err(line, "answers must be strings or {text} objects"))?,
                None | Some(Value::Null) => Vec::new(),
                _ => return Err(line_err(line, "answers must be an array")),
            };
            let answers = answers.into_iter().filter(|a| !a.trim().is_empty()).collect();
            Ok(ExampleRecord {
                id: id_of(value, index),
                task: TaskKind::Mrc,
                input: format!("Context: {context}\nQuestion: {question}"),
                gold: Answer::Mrc(answers),
            })
        }
        DatasetFormat::Cluener => {
            let text = str_field(value, "text", line)?;
            let labels = value
                .get("label")
                .and_then(Value::as_object)
                .ok_or_else(|| line_err(line, "missing object field `label`"))?;
            let chars: Vec<char> = text.chars().collect();
            let mut gold: BTreeMap<String, BTreeSet<Span>> = BTreeMap::new();
            for (label, mentions) in labels {
                let mentions = mentions
                    .as_object()
                    .ok_or_else(|| line_err(line, format!("label `{label}` must map mentions to spans")))?;
                for (mention, spans) in mentions {
                    let spans = spans
                        .as_array()
                        .ok_or_else(|| line_err(line, format!("spans for `{mention}` must be an array")))?;
                    for span in spans {
                        let pair = span
                            .as_array()
                            .filter(|a| a.len() == 2)
                            .and_then(|a| Some((a[0].as_u64()? as usize, a[1].as_u64()? as usize)))
                            .ok_or_else(|| line_err(line, format!("bad span for `{mention}`")))?;
                        let span = normalize_span(&chars, mention, pair)
                            .ok_or_else(|| line_err(line, format!("span {pair:?} does not cover `{mention}`")))?;
                        gold.entry(label.clone()).or_default().insert(span);
                    }
                }
            }
            Ok(ExampleRecord {
                id: id_of(value, index),
                task: TaskKind::Ner,
                input: text.to_string(),
                gold: Answer::Ner(gold),
            })
        }
    }
}

/// Converts a span to half-open character offsets. Cluener files use
/// inclusive ends; spans that already cut out the mention are kept as is.
pub fn normalize_span(chars: &[char], mention: &str, (start, end): (usize, usize)) -> Option<Span> {
    let cut = |s: usize, e: usize| -> Option<String> {
        (s < e && e <= chars.len()).then(|| chars[s..e].iter().collect())
    };
    if cut(start, end + 1).as_deref() == Some(mention) {
        return Some((start, end + 1));
    }
    if cut(start, end).as_deref() == Some(mention) {
        return Some((start, end));
    }
    None
}

fn check_record(r: &ExampleRecord, line: usize) -> Result<(), DatasetError> {
    if r.gold.task() != r.task {
        return Err(line_err(line, "gold answer does not match the task"));
    }
    if let Answer::Ner(m) = &r.gold {
        let len = r.input.chars().count();
        for (label, spans) in m {
            for &(s, e) in spans {
                if !(s < e && e <= len) {
                    return Err(line_err(line, format!("span ({s}, {e}) for `{label}` is outside the input")));
                }
            }
        }
    }
    Ok(())
}

/// Checks task kinds and, when `labels` is non-empty, label membership.
pub fn validate(
    records: &[ExampleRecord],
    task: TaskKind,
    labels: &[String],
) -> Result<(), DatasetError> {
    if records.is_empty() {
        return Err(DatasetError::Empty);
    }
    for r in records {
        if r.task != task {
            return Err(DatasetError::TaskMismatch { id: r.id.clone(), found: r.task, expected: task });
        }
        if labels.is_empty() {
            continue;
        }
        let used: Vec<&String> = match &r.gold {
            Answer::Cls(l) => vec![l],
            Answer::Ner(m) => m.keys().collect(),
            Answer::Mrc(_) => vec![],
        };
        if let Some(bad) = used.into_iter().find(|l| !labels.contains(l)) {
            return Err(DatasetError::UnknownLabel { id: r.id.clone(), label: bad.clone() });
        }
    }
    Ok(())
}

/// Sorted labels used anywhere in the gold answers.
pub fn labels_of(records: &[ExampleRecord]) -> Vec<String> {
    let mut set = BTreeSet::new();
    for r in records {
        match &r.gold {
            Answer::Cls(l) => {
                set.insert(l.clone());
            }
            Answer::Ner(m) => set.extend(m.keys().cloned()),
            Answer::Mrc(_) => {}
        }
    }
    set.into_iter().collect()
}

/// Seeded subset of `fraction` of the records (at least one), in original
/// order.
pub fn minibatch(records: &[ExampleRecord], fraction: f64, seed: u64) -> Vec<ExampleRecord> {
    if fraction >= 1.0 || records.is_empty() {
        return records.to_vec();
    }
    let k = ((records.len() as f64 * fraction).round() as usize).clamp(1, records.len());
    let mut rng = promptflow_core::rng::seeded(seed);
    let mut picked = sample(&mut rng, records.len(), k).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| records[i].clone()).collect()
}

pub fn to_jsonl(records: &[ExampleRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cluener_inclusive_spans_become_half_open() {
        let line = r#"{"text": "浙商银行企业信贷部叶老桂博士", "label": {"name": {"叶老桂": [[9, 11]]}, "company": {"浙商银行": [[0, 3]]}}}"#;
        let r = &parse_jsonl(line, DatasetFormat::Auto).unwrap()[0];
        let Answer::Ner(m) = &r.gold else { panic!() };
        assert_eq!(m["name"], [(9, 12)].into());
        assert_eq!(m["company"], [(0, 4)].into());
        assert_eq!(r.id, "ex00000");
    }

    #[test]
    fn half_open_spans_kept() {
        let line = r#"{"text": "张三在北京", "label": {"name": {"张三": [[0, 2]]}}}"#;
        let r = &parse_jsonl(line, DatasetFormat::Cluener).unwrap()[0];
        let Answer::Ner(m) = &r.gold else { panic!() };
        assert_eq!(m["name"], [(0, 2)].into());
    }

    #[test]
    fn mismatched_span_rejected() {
        let line = r#"{"text": "abc", "label": {"x": {"zz": [[0, 1]]}}}"#;
        assert!(matches!(parse_jsonl(line, DatasetFormat::Auto), Err(DatasetError::Line { line: 1, .. })));
    }

    #[test]
    fn cls_and_mrc_importers() {
        let text = "{\"id\": 7, \"text\": \"game news\", \"label\": \"Games\"}\n\n{\"context\": \"Paris is in France.\", \"question\": \"Where is Paris?\", \"answers\": [\"France\", {\"text\": \"in France\"}]}\n{\"context\": \"c\", \"question\": \"q\", \"answers\": []}\n";
        let rs = parse_jsonl(text, DatasetFormat::Auto).unwrap();
        assert_eq!(rs[0].id, "7");
        assert_eq!(rs[0].gold, Answer::Cls("Games".into()));
        assert_eq!(rs[1].gold, Answer::Mrc(vec!["France".into(), "in France".into()]));
        assert_eq!(rs[1].input, "Context: Paris is in France.\nQuestion: Where is Paris?");
        assert_eq!(rs[2].gold, Answer::Mrc(vec![]));
    }

    #[test]
    fn native_round_trip_and_duplicates() {
        let text = "{\"id\":\"a\",\"text\":\"x\",\"label\":\"L\"}\n{\"id\":\"b\",\"text\":\"y\",\"label\":\"M\"}\n";
        let rs = parse_jsonl(text, DatasetFormat::Cls).unwrap();
        let again = parse_jsonl(&to_jsonl(&rs), DatasetFormat::Auto).unwrap();
        assert_eq!(rs, again);
        let dup = "{\"id\":\"a\",\"text\":\"x\",\"label\":\"L\"}\n{\"id\":\"a\",\"text\":\"y\",\"label\":\"M\"}\n";
        assert!(matches!(parse_jsonl(dup, DatasetFormat::Cls), Err(DatasetError::DuplicateId(_))));
    }

    #[test]
    fn label_validation() {
        let rs = parse_jsonl("{\"text\":\"x\",\"label\":\"L\"}\n", DatasetFormat::Cls).unwrap();
        assert!(validate(&rs, TaskKind::Cls, &[]).is_ok());
        assert!(validate(&rs, TaskKind::Cls, &["L".into()]).is_ok());
        assert!(matches!(validate(&rs, TaskKind::Cls, &["M".into()]), Err(DatasetError::UnknownLabel { .. })));
        assert!(matches!(validate(&rs, TaskKind::Ner, &[]), Err(DatasetError::TaskMismatch { .. })));
        assert!(matches!(validate(&[], TaskKind::Ner, &[]), Err(DatasetError::Empty)));
    }

    #[test]
    fn minibatch_is_seeded_and_ordered() {
        let text: String = (0..20).map(|i| format!("{{\"id\":\"{i:02}\",\"text\":\"x\",\"label\":\"L\"}}\n")).collect();
        let rs = parse_jsonl(&text, DatasetFormat::Cls).unwrap();
        let a = minibatch(&rs, 0.25, 3);
        assert_eq!(a.len(), 5);
        assert_eq!(a, minibatch(&rs, 0.25, 3));
        assert!(a.windows(2).all(|w| w[0].id < w[1].id));
        assert_eq!(minibatch(&rs, 1.0, 3).len(), 20);
    }
}
