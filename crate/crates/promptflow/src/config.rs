//! Run configuration: one JSON document whose field names are the override
//! keys accepted by `--set`.

use std::path::{Path, PathBuf};

use promptflow_core::matrix::SelectionMode;
use promptflow_core::metrics::Average;
use promptflow_core::msgd::UpdateRule;
use promptflow_core::operators::{FewShotStrategy, MergeMode};
use promptflow_core::{Objective, OperatorId, RewardMode, TaskKind};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::BackendConfig;
use crate::dataset::DatasetFormat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Msgd,
    #[default]
    MsgdRl,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train: PathBuf,
    /// Separate test file. Without it the test slice is cut from `train`.
    pub test: Option<PathBuf>,
    pub format: DatasetFormat,
    /// Examples taken from the front of `train` for training.
    pub train_size: Option<usize>,
    /// Examples used for testing, after the training slice.
    pub test_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    /// Label set. Empty means "whatever the training data uses".
    pub labels: Vec<String>,
    /// Prompt template file. Without one a skeleton is built from the task
    /// and labels.
    pub template: Option<PathBuf>,
    pub dataset: DatasetConfig,

    pub iterations: u32,
    pub beam_init: usize,
    pub beam_temperature: f64,
    pub top_k: usize,
    pub anneal_count: usize,
    pub anneal_temperature_start: f64,
    pub anneal_decay: f64,

    pub optimizer: OptimizerKind,
    pub learning_rate_alpha: f64,
    pub update_rule: UpdateRule,
    pub sarsa_alpha: f64,
    pub sarsa_gamma: f64,
    pub reward_mode: RewardMode,
    /// Defaults to 2 for msgd and 5 for msgd_rl.
    pub pairs_per_epoch: Option<usize>,
    pub selection: SelectionMode,
    pub q_floor: f64,
    pub objective: Objective,
    pub cls_average: Average,
    pub seed: u64,

    pub operators: Vec<OperatorId>,
    pub operator_registry: Option<PathBuf>,
    pub operator_temperature: f64,
    pub self_consistency_samples: usize,
    pub few_shot_k: usize,
    pub few_shot_strategy: FewShotStrategy,
    pub merge_mode: MergeMode,
    /// Plain-text corpus for `rag`, one document per line.
    pub rag_corpus: Option<PathBuf>,

    pub bad_case_cap: usize,
    pub diagnose_bad_cases: bool,
    pub minibatch_fraction: f64,
    pub g_steps: u32,
    pub d_steps: u32,
    pub convergence_threshold: f64,
    pub convergence_patience: u32,

    pub backend: BackendConfig,
    pub experience_in: Option<PathBuf>,
    pub experience_out: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub run_id: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Cls,
            labels: Vec::new(),
            template: None,
            dataset: DatasetConfig::default(),
            iterations: 10,
            beam_init: 6,
            beam_temperature: 1.0,
            top_k: 3,
            anneal_count: 2,
            anneal_temperature_start: 1.0,
            anneal_decay: 0.9,
            optimizer: OptimizerKind::MsgdRl,
            learning_rate_alpha: 1.0,
            update_rule: UpdateRule::Multiplicative,
            sarsa_alpha: 0.5,
            sarsa_gamma: 0.5,
            reward_mode: RewardMode::Mean,
            pairs_per_epoch: None,
            selection: SelectionMode::ValueProportional,
            q_floor: promptflow_core::Q_FLOOR,
            objective: Objective::F1,
            cls_average: Average::Micro,
            seed: 0,
            operators: OperatorId::ALL.to_vec(),
            operator_registry: None,
            operator_temperature: promptflow_core::operators::DEFAULT_OPERATOR_TEMPERATURE,
            self_consistency_samples: 3,
            few_shot_k: 3,
            few_shot_strategy: FewShotStrategy::Uniform,
            merge_mode: MergeMode::Deterministic,
            rag_corpus: None,
            bad_case_cap: crate::evaluation::DEFAULT_BAD_CASE_CAP,
            diagnose_bad_cases: false,
            minibatch_fraction: 1.0,
            g_steps: 1,
            d_steps: 1,
            convergence_threshold: 1e-4,
            convergence_patience: 3,
            backend: BackendConfig::default(),
            experience_in: None,
            experience_out: None,
            output_dir: PathBuf::from("runs"),
            run_id: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("override `{0}` is not of the form key=value")]
    BadOverride(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

impl RunConfig {
    pub fn pairs_per_epoch(&self) -> usize {
        self.pairs_per_epoch.unwrap_or(match self.optimizer {
            OptimizerKind::Msgd => 2,
            OptimizerKind::MsgdRl => 5,
        })
    }

    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| format!("run-{}", self.seed))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.iterations < 1 {
            return Err(invalid("iterations must be >= 1"));
        }
        if self.beam_init < 1 {
            return Err(invalid("beam_init must be >= 1"));
        }
        if self.top_k < 1 {
            return Err(invalid("top_k must be >= 1"));
        }
        if !(self.anneal_temperature_start.is_finite() && self.anneal_temperature_start >= 0.0) {
            return Err(invalid("anneal_temperature_start must be finite and >= 0"));
        }
        if !(self.anneal_decay > 0.0 && self.anneal_decay <= 1.0) {
            return Err(invalid("anneal_decay must lie in (0, 1]"));
        }
        if !(self.learning_rate_alpha.is_finite() && self.learning_rate_alpha > 0.0) {
            return Err(invalid("learning_rate_alpha must be finite and > 0"));
        }
        if !(self.sarsa_alpha > 0.0 && self.sarsa_alpha <= 1.0) {
            return Err(invalid("sarsa_alpha must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.sarsa_gamma) {
            return Err(invalid("sarsa_gamma must lie in [0, 1]"));
        }
        if self.pairs_per_epoch == Some(0) {
            return Err(invalid("pairs_per_epoch must be >= 1"));
        }
        if !(self.q_floor.is_finite() && self.q_floor >= 0.0) {
            return Err(invalid("q_floor must be finite and >= 0"));
        }
        if self.operators.is_empty() {
            return Err(invalid("operators must not be empty"));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = self.operators.iter().find(|o| !seen.insert(**o)) {
            return Err(invalid(format!("operator `{dup}` is listed twice")));
        }
        if !(self.operator_temperature.is_finite() && self.operator_temperature >= 0.0)
            || !(self.beam_temperature.is_finite() && self.beam_temperature >= 0.0)
        {
            return Err(invalid("temperatures must be finite and >= 0"));
        }
        if self.self_consistency_samples < 1 {
            return Err(invalid("self_consistency_samples must be >= 1"));
        }
        if !(self.minibatch_fraction > 0.0 && self.minibatch_fraction <= 1.0) {
            return Err(invalid("minibatch_fraction must lie in (0, 1]"));
        }
        if self.g_steps < 1 || self.d_steps < 1 {
            return Err(invalid("g_steps and d_steps must be >= 1"));
        }
        if !(self.convergence_threshold.is_finite() && self.convergence_threshold >= 0.0) {
            return Err(invalid("convergence_threshold must be finite and >= 0"));
        }
        if self.convergence_patience < 1 {
            return Err(invalid("convergence_patience must be >= 1"));
        }
        if self.dataset.train.as_os_str().is_empty() {
            return Err(invalid("dataset.train is required"));
        }
        if self.dataset.train_size == Some(0) {
            return Err(invalid("dataset.train_size must be >= 1"));
        }
        if self.run_id().contains(['/', '\\']) || self.run_id().is_empty() {
            return Err(invalid("run_id must be a non-empty single path component"));
        }
        self.backend.validate().map_err(ConfigError::Invalid)
    }

    /// Makes every relative path in the config relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        let fix_opt = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                fix(p);
            }
        };
        fix_opt(&mut self.template);
        fix(&mut self.dataset.train);
        fix_opt(&mut self.dataset.test);
        fix_opt(&mut self.operator_registry);
        fix_opt(&mut self.rag_corpus);
        fix_opt(&mut self.backend.mock_script);
        fix_opt(&mut self.experience_in);
        fix_opt(&mut self.experience_out);
        fix(&mut self.output_dir);
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

/// Parses a config document and applies `key=value` overrides. Keys are
/// dotted paths into the document (`backend.retry.max_attempts`). Values
/// are read as JSON when they parse, otherwise as strings.
pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let parsed: RunConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    apply_overrides(parsed, overrides)
}

pub fn apply_overrides(config: RunConfig, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    if overrides.is_empty() {
        return Ok(config);
    }
    let mut doc = serde_json::to_value(&config).expect("config serializes");
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| ConfigError::BadOverride(o.clone()))?;
        let key = key.trim();
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    }
    serde_json::from_value(doc).map_err(|e| ConfigError::Parse(e.to_string()))
}

/// Reads, overrides, resolves paths against the file's directory and
/// validates.
pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let mut config = parse_with_overrides(&text, overrides)?;
    config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        r#"{"task":"NER","dataset":{"train":"d.jsonl"},"backend":{"mock_script":"s.json"}}"#.into()
    }

    #[test]
    fn defaults_match_documented_values() {
        let c = parse_with_overrides(&minimal(), &[]).unwrap();
        assert_eq!((c.iterations, c.beam_init, c.top_k, c.anneal_count), (10, 6, 3, 2));
        assert_eq!((c.anneal_temperature_start, c.anneal_decay), (1.0, 0.9));
        assert_eq!((c.learning_rate_alpha, c.sarsa_alpha, c.sarsa_gamma), (1.0, 0.5, 0.5));
        assert_eq!(c.pairs_per_epoch(), 5);
        assert_eq!(c.objective, Objective::F1);
        assert_eq!(c.backend.max_parallel, 8);
        let c = apply_overrides(c, &["optimizer=msgd".into()]).unwrap();
        assert_eq!(c.pairs_per_epoch(), 2);
        c.validate().unwrap();
    }

    #[test]
    fn overrides_equal_editing_the_file() {
        let a = parse_with_overrides(&minimal(), &["top_k=4".into(), "backend.retry.max_attempts=2".into(), "run_id=abc".into()]).unwrap();
        let edited = r#"{"task":"NER","top_k":4,"run_id":"abc","dataset":{"train":"d.jsonl"},"backend":{"mock_script":"s.json","retry":{"max_attempts":2}}}"#;
        assert_eq!(a, parse_with_overrides(edited, &[]).unwrap());
        assert_eq!(a.to_json(), parse_with_overrides(&a.to_json(), &[]).unwrap().to_json());
    }

    #[test]
    fn every_key_can_be_overridden() {
        let base = parse_with_overrides(&minimal(), &[]).unwrap();
        let doc = serde_json::to_value(&base).unwrap();
        fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
            match v {
                Value::Object(m) => {
                    for (k, v) in m {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&key, v, out);
                    }
                }
                _ => out.push((prefix.to_string(), v.clone())),
            }
        }
        let mut leaves = Vec::new();
        walk("", &doc, &mut leaves);
        assert!(leaves.len() > 40);
        for (k, v) in leaves {
            let again = apply_overrides(base.clone(), &[format!("{k}={v}")]).unwrap();
            assert_eq!(again, base, "{k}");
        }
    }

    #[test]
    fn unknown_keys_and_bad_values() {
        assert!(matches!(parse_with_overrides(&minimal(), &["topk=1".into()]), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(parse_with_overrides(&minimal(), &["top_k".into()]), Err(ConfigError::BadOverride(_))));
        assert!(matches!(parse_with_overrides(&minimal(), &["top_k=x".into()]), Err(ConfigError::Parse(_))));
        assert!(matches!(parse_with_overrides(r#"{"bogus":1}"#, &[]), Err(ConfigError::Parse(_))));
        assert!(matches!(parse_with_overrides(&minimal(), &["operators=[\"telepathy\"]".into()]), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn invariant_violations() {
        for o in ["top_k=0", "iterations=0", "beam_init=0", "sarsa_gamma=1.5", "anneal_decay=0", "backend.max_parallel=0", "operators=[]", "minibatch_fraction=0", "run_id=\"a/b\""] {
            let c = parse_with_overrides(&minimal(), &[o.to_string()]).unwrap();
            assert!(matches!(c.validate(), Err(ConfigError::Invalid(_))), "{o}");
        }
        let c = parse_with_overrides(&minimal(), &["top_k=0".into()]).unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("top_k"));
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let mut c = parse_with_overrides(&minimal(), &[]).unwrap();
        c.resolve_paths(Path::new("/cfg"));
        assert_eq!(c.dataset.train, PathBuf::from("/cfg/d.jsonl"));
        assert_eq!(c.backend.mock_script, Some(PathBuf::from("/cfg/s.json")));
        assert_eq!(c.output_dir, PathBuf::from("/cfg/runs"));
    }
}
