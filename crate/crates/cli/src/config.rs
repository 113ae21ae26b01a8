use std::path::{Path, PathBuf};

use d4_core::training::{OptimizerConfig, Task};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Training/evaluation configuration read from one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Bundled sketch name or path to a `.d4` file.
    pub sketch: String,
    pub task: Task,
    pub value_size: Option<usize>,
    /// Fixed unroll length; derived from the data when absent.
    pub steps: Option<usize>,
    pub train_len: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_lengths: Vec<usize>,
    pub test_size: usize,
    pub optimizer: OptimizerConfig,
    pub target_dev_accuracy: Option<f64>,
    pub max_seconds: Option<f64>,
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            sketch: "sort-compare".into(),
            task: Task::Sort,
            value_size: None,
            steps: None,
            train_len: 3,
            train_size: 256,
            dev_size: 32,
            test_lengths: vec![8, 64],
            test_size: 32,
            optimizer: OptimizerConfig::default(),
            target_dev_accuracy: None,
            max_seconds: None,
            out_dir: PathBuf::from("runs"),
            seed: None,
        }
    }
}

const TOP_KEYS: &[&str] = &[
    "sketch",
    "task",
    "value_size",
    "steps",
    "train_len",
    "train_size",
    "dev_size",
    "test_lengths",
    "test_size",
    "optimizer",
    "target_dev_accuracy",
    "max_seconds",
    "out_dir",
    "seed",
];

const OPTIMIZER_KEYS: &[&str] =
    &["learning_rate", "batch_size", "clip_norm", "noise_eta", "noise_gamma", "epochs", "seed", "weight_decay"];

fn unknown_keys(v: &Value, known: &[&str], prefix: &str, errs: &mut Vec<String>) {
    if let Value::Object(map) = v {
        for k in map.keys() {
            if !known.contains(&k.as_str()) {
                errs.push(format!("unknown key {prefix}{k}"));
            }
        }
    }
}

/// Parse a config, reporting every problem found rather than the first.
pub fn parse(text: &str) -> Result<RunConfig, Vec<String>> {
    let value: Value = serde_json::from_str(text).map_err(|e| vec![format!("invalid JSON: {e}")])?;
    if !value.is_object() {
        return Err(vec!["config must be a JSON object".into()]);
    }
    let mut errs = Vec::new();
    unknown_keys(&value, TOP_KEYS, "", &mut errs);
    if let Some(opt) = value.get("optimizer") {
        unknown_keys(opt, OPTIMIZER_KEYS, "optimizer.", &mut errs);
    }
    if !errs.is_empty() {
        return Err(errs);
    }
    let mut value = value;
    // Bundled addition sketches imply the addition task.
    let implied = value.get("sketch").and_then(Value::as_str).is_some_and(|s| s.starts_with("add"));
    if implied && value.get("task").is_none() {
        value["task"] = Value::from("add");
    }
    serde_json::from_value(value).map_err(|e| vec![e.to_string()])
}

pub fn load(path: &Path) -> Result<RunConfig, Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| vec![format!("cannot read {}: {e}", path.display())])?;
    parse(&text)
}

impl RunConfig {
    /// Semantic checks, all at once.
    pub fn validate(&self) -> Vec<String> {
        let mut errs: Vec<String> = self.optimizer.validate().into_iter().map(|e| format!("optimizer.{e}")).collect();
        if d4_core::sketches::by_name(&self.sketch).is_none() && !Path::new(&self.sketch).is_file() {
            errs.push(format!("sketch {} is neither a bundled name nor an existing file", self.sketch));
        }
        if d4_core::sketches::by_name(&self.sketch).is_some()
            && self.sketch.starts_with("add") != (self.task == Task::Add)
        {
            errs.push(format!("sketch {} does not belong to task {:?}", self.sketch, self.task));
        }
        if self.value_size == Some(0) {
            errs.push("value_size must be positive".into());
        }
        if self.steps == Some(0) {
            errs.push("steps must be positive".into());
        }
        let min_len = match self.task {
            Task::Sort => 1,
            Task::Add => 2,
        };
        if self.train_len < min_len {
            errs.push(format!("train_len must be at least {min_len}"));
        }
        if let Some(&bad) = self.test_lengths.iter().find(|&&l| l < min_len) {
            errs.push(format!("test length {bad} is below {min_len}"));
        }
        for (name, n) in [("train_size", self.train_size), ("dev_size", self.dev_size), ("test_size", self.test_size)] {
            if n == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        errs
    }

    pub fn sketch_source(&self) -> std::io::Result<String> {
        match d4_core::sketches::by_name(&self.sketch) {
            Some(s) => Ok(s.to_string()),
            None => std::fs::read_to_string(&self.sketch),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_unknown_keys_are_reported() {
        let errs = parse(r#"{"sketchh": "x", "optimizer": {"lr": 1}, "bogus": 2}"#).unwrap_err();
        assert_eq!(errs.len(), 3, "{errs:?}");
    }

    #[test]
    fn semantic_errors_are_collected() {
        let cfg = parse(r#"{"sketch": "/nonexistent.d4", "train_size": 0, "optimizer": {"clip_norm": 0}}"#).unwrap();
        assert_eq!(cfg.validate().len(), 3);
    }

    #[test]
    fn task_follows_bundled_sketch() {
        assert_eq!(parse(r#"{"sketch": "add-choose"}"#).unwrap().task, Task::Add);
        let cfg = parse(r#"{"sketch": "add-choose", "task": "sort"}"#).unwrap();
        assert_eq!(cfg.validate().len(), 1);
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(parse(&text).unwrap(), cfg);
    }
}
