//! Run configuration and execution: resolves a JSON config into a task,
//! backends, and an optimizer, runs it, and writes the run directory
//! (config.json, instructions.json, demos.jsonl, trials.jsonl, best.json,
//! importance.json).
//!
//! Unknown JSON keys are ignored, so `_note` fields work as comments.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bootstrap::DemoStore;
use crate::eval::{Dataset, Metric};
use crate::lm::{CachedLm, FailingLm, HttpConfig, HttpLm, JsonlCache, LmBackend, ScriptedLm};
use crate::optimize::{optimize, Budget, OptimizeRequest, OptimizerConfig, OptimizerRun};
use crate::program::{Assignment, GenParams, ModuleSpec, Program, VariableId};
use crate::synth::{make_synthetic, preset, SyntheticTask, SyntheticTaskSpec};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("optimization failed: {0}")]
    Optimize(#[from] crate::optimize::OptimizeError),
    #[error("synthetic task error: {0}")]
    Synth(#[from] crate::synth::SynthError),
    #[error("dataset error: {0}")]
    Eval(#[from] crate::eval::EvalError),
    #[error("program error: {0}")]
    Program(#[from] crate::program::ProgramError),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Single-module program construction for dataset-backed runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProgramConfig {
    /// `predict` (answer only) or `chain_of_thought` (rationale first).
    pub kind: String,
    pub inputs: Vec<String>,
    #[serde(default = "default_answer_field")]
    pub output: String,
    #[serde(default)]
    pub output_description: String,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "default_demo_slots")]
    pub demo_slots: usize,
    pub seed_instruction: String,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_stops")]
    pub stop_sequences: Vec<String>,
}

fn default_answer_field() -> String {
    "answer".to_string()
}

fn default_demo_slots() -> usize {
    4
}

fn default_max_tokens() -> u32 {
    150
}

fn default_stops() -> Vec<String> {
    vec![
        "\n\n".to_string(),
        "\n---".to_string(),
        "assistant".to_string(),
    ]
}

impl ProgramConfig {
    pub fn build(&self) -> Result<(Program, Assignment), HarnessError> {
        let inputs: Vec<&str> = self.inputs.iter().map(String::as_str).collect();
        let outputs: Vec<(&str, &str)> = match self.kind.as_str() {
            "predict" => vec![(self.output.as_str(), self.output_description.as_str())],
            "chain_of_thought" => vec![
                ("rationale", "think step by step"),
                (self.output.as_str(), self.output_description.as_str()),
            ],
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown program kind {other:?}; expected predict or chain_of_thought"
                )))
            }
        };
        let module = ModuleSpec::standard(
            self.name.as_deref().unwrap_or("main"),
            0,
            self.demo_slots,
            &inputs,
            &outputs,
            GenParams {
                max_tokens: self.max_tokens,
                stop_sequences: self.stop_sequences.clone(),
                temperature: self.temperature,
            },
        );
        let program = Program::single(module)?;
        let assignment = Assignment::new().with(VariableId::instruction(0), &self.seed_instruction);
        Ok((program, assignment))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricConfig {
    pub id: String,
    #[serde(default = "default_answer_field")]
    pub prediction_field: String,
    #[serde(default = "default_answer_field")]
    pub gold_field: String,
}

impl MetricConfig {
    pub fn build(&self) -> Result<Metric, HarnessError> {
        match self.id.as_str() {
            "exact_match" => Ok(Metric::exact_match(&self.prediction_field, &self.gold_field)),
            "conditional_format" => Ok(crate::eval::conditional_format(
                &self.prediction_field,
                &self.gold_field,
            )),
            other => Err(HarnessError::Config(format!(
                "unknown metric {other:?}; expected exact_match or conditional_format"
            ))),
        }
    }
}

/// Task selection: an embedded synthetic spec, a named synthetic preset,
/// or a JSONL dataset plus a registered program and metric.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TaskConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticTaskSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic_preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub example_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub program: Option<ProgramConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<MetricConfig>,
}

/// A resolved task ready to optimize.
pub struct ResolvedTask {
    pub program: Program,
    pub seed_assignment: Assignment,
    pub dataset: Dataset,
    pub metric: Metric,
    pub synthetic: Option<SyntheticTask>,
}

impl TaskConfig {
    pub fn resolve(&self) -> Result<ResolvedTask, HarnessError> {
        let spec = match (&self.synthetic, &self.synthetic_preset, &self.dataset) {
            (Some(spec), None, None) => Some(spec.clone()),
            (None, Some(name), None) => Some(
                preset(
                    name,
                    self.example_count.unwrap_or(500),
                    self.task_seed.unwrap_or(0),
                )
                .ok_or_else(|| {
                    HarnessError::Config(format!(
                        "unknown synthetic preset {name:?}; expected separable-2x6, interaction-2x4, or noisy-3x4"
                    ))
                })?,
            ),
            (None, None, Some(_)) => None,
            _ => {
                return Err(HarnessError::Config(
                    "task must set exactly one of synthetic, synthetic_preset, or dataset".into(),
                ))
            }
        };
        if let Some(spec) = spec {
            let task = make_synthetic(&spec)?;
            return Ok(ResolvedTask {
                program: task.program.clone(),
                seed_assignment: task.seed_assignment.clone(),
                dataset: task.dataset.clone(),
                metric: task.metric.clone(),
                synthetic: Some(task),
            });
        }
        let dataset_path = self.dataset.as_ref().expect("checked above");
        let dataset = Dataset::from_jsonl(dataset_path, self.splits.as_deref())?;
        let program_cfg = self
            .program
            .as_ref()
            .ok_or_else(|| HarnessError::Config("dataset tasks need a program".into()))?;
        let metric_cfg = self
            .metric
            .as_ref()
            .ok_or_else(|| HarnessError::Config("dataset tasks need a metric".into()))?;
        let (program, seed_assignment) = program_cfg.build()?;
        Ok(ResolvedTask {
            program,
            seed_assignment,
            dataset,
            metric: metric_cfg.build()?,
            synthetic: None,
        })
    }
}

/// One LM backend. `synthetic` resolves to the synthetic task's scripted
/// models; `replay` serves entirely from the cache and fails on misses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rules: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub default_response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: "synthetic".to_string(),
            rules: Vec::new(),
            default_response: String::new(),
            base_url: None,
            model_id: None,
            cache: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendRole {
    Task,
    Proposer,
    Teacher,
}

impl BackendConfig {
    pub fn build(
        &self,
        role: BackendRole,
        synthetic: Option<&SyntheticTask>,
    ) -> Result<Box<dyn LmBackend>, HarnessError> {
        let inner: Box<dyn LmBackend> = match self.kind.as_str() {
            "synthetic" => {
                let task = synthetic.ok_or_else(|| {
                    HarnessError::Config("synthetic backends need a synthetic task".into())
                })?;
                match role {
                    BackendRole::Proposer => Box::new(task.proposer_lm()),
                    _ => Box::new(task.task_lm()),
                }
            }
            "scripted" => Box::new(ScriptedLm::new(
                self.rules.iter().cloned(),
                self.default_response.clone(),
            )),
            "http" => {
                let model = self.model_id.clone().ok_or_else(|| {
                    HarnessError::Config("http backend needs model_id".into())
                })?;
                let config = match &self.base_url {
                    Some(base) => HttpConfig::new(base.clone(), model),
                    None => HttpConfig::from_env(model).map_err(|e| {
                        HarnessError::Config(format!("http backend: {e}"))
                    })?,
                };
                Box::new(HttpLm::new(config))
            }
            "replay" => {
                if self.cache.is_none() {
                    return Err(HarnessError::Config(
                        "replay backend needs a cache path".into(),
                    ));
                }
                Box::new(FailingLm::new(
                    self.model_id.clone().unwrap_or_else(|| "scripted".into()),
                ))
            }
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown backend kind {other:?}; expected synthetic, scripted, http, or replay"
                )))
            }
        };
        if let Some(path) = &self.cache {
            let store = JsonlCache::open(path)
                .map_err(|e| HarnessError::Config(format!("cache {}: {e}", path.display())))?;
            return Ok(Box::new(CachedLm::new(inner, Arc::new(store))));
        }
        Ok(inner)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BackendsConfig {
    #[serde(default)]
    pub task_lm: BackendConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposer_lm: Option<BackendConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_lm: Option<BackendConfig>,
}

fn default_parallelism() -> usize {
    1
}

fn default_split() -> String {
    "train".to_string()
}

/// One optimization run, as parsed from a JSON config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub budget: Budget,
    #[serde(default)]
    pub backends: BackendsConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_split")]
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demo_store: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let raw = fs::read_to_string(path.as_ref()).map_err(io_err(path.as_ref()))?;
        serde_json::from_str(&raw).map_err(|e| HarnessError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub best_score_full: f64,
    pub best_trial_index: usize,
    pub trials: usize,
    pub budget_exhausted: bool,
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), HarnessError> {
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    for item in items {
        let line = serde_json::to_string(&item).map_err(|e| HarnessError::Config(e.to_string()))?;
        writeln!(file, "{line}").map_err(io_err(path))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Config(e.to_string()))?;
    fs::write(path, text).map_err(io_err(path))
}

/// Runs one optimization and writes the run directory.
pub fn execute_run(config: &RunConfig, out_dir: &Path) -> Result<RunSummary, HarnessError> {
    let task = config.task.resolve()?;
    let task_lm = config
        .backends
        .task_lm
        .build(BackendRole::Task, task.synthetic.as_ref())?;
    let proposer_lm = match &config.backends.proposer_lm {
        Some(cfg) => cfg.build(BackendRole::Proposer, task.synthetic.as_ref())?,
        None => config
            .backends
            .task_lm
            .build(BackendRole::Proposer, task.synthetic.as_ref())?,
    };
    let teacher_lm = match &config.backends.teacher_lm {
        Some(cfg) => cfg.build(BackendRole::Teacher, task.synthetic.as_ref())?,
        None => config
            .backends
            .task_lm
            .build(BackendRole::Teacher, task.synthetic.as_ref())?,
    };

    let preloaded = match &config.demo_store {
        Some(path) if path.exists() => {
            Some(DemoStore::read_jsonl(path).map_err(io_err(path))?)
        }
        _ => None,
    };

    let request = OptimizeRequest {
        program: &task.program,
        seed_assignment: &task.seed_assignment,
        metric: &task.metric,
        dataset: &task.dataset,
        split: &config.split,
        config: &config.optimizer,
        budget: &config.budget,
        task_lm: &task_lm,
        proposer_lm: &proposer_lm,
        teacher_lm: &teacher_lm,
        seed: config.seed,
        parallelism: config.parallelism,
        demo_store: preloaded,
    };
    let run = optimize(&request)?;

    if let Some(path) = &config.demo_store {
        if !path.exists() {
            run.demo_store.write_jsonl(path).map_err(io_err(path))?;
        }
    }
    write_run_dir(config, &task.program, &run, out_dir)?;
    Ok(RunSummary {
        output_dir: out_dir.to_path_buf(),
        best_score_full: run.best_score_full,
        best_trial_index: run.best_trial_index,
        trials: run.trial_log.len(),
        budget_exhausted: run.budget_exhausted,
    })
}

fn write_run_dir(
    config: &RunConfig,
    program: &Program,
    run: &OptimizerRun,
    out_dir: &Path,
) -> Result<(), HarnessError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let module_names: Vec<String> = program.modules.iter().map(|m| m.name.clone()).collect();
    let resolved = serde_json::json!({
        "config": config,
        "resolved": {
            "optimizer_kind": config.optimizer.kind.name(),
            "seed": run.seed,
            "search_space": run.search_space,
            "module_names": module_names,
            "summaries": run.summaries,
            "budget_exhausted": run.budget_exhausted,
        },
    });
    write_json(&out_dir.join("config.json"), &resolved)?;
    write_json(&out_dir.join("instructions.json"), &run.instructions)?;
    write_jsonl(&out_dir.join("trials.jsonl"), run.trial_log.iter())?;
    run.demo_store
        .write_jsonl(out_dir.join("demos.jsonl"))
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    write_json(
        &out_dir.join("best.json"),
        &serde_json::json!({
            "trial_index": run.best_trial_index,
            "score": run.best_score_full,
            "assignment": run.best_assignment,
        }),
    )?;
    if let Some(importance) = &run.importance {
        write_json(&out_dir.join("importance.json"), importance)?;
    }
    Ok(())
}

/// Materializes a synthetic task bundle: dataset.jsonl, splits.json, the
/// brute-force oracle table, and a runnable optimize config.
pub fn materialize_synthetic(spec: &SyntheticTaskSpec, out_dir: &Path) -> Result<(), HarnessError> {
    let task = make_synthetic(spec)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_jsonl(&out_dir.join("dataset.jsonl"), task.dataset.examples.iter())?;
    let ids: Vec<&str> = task.dataset.examples.iter().map(|e| e.id.as_str()).collect();
    write_json(&out_dir.join("splits.json"), &serde_json::json!({ "train": ids }))?;
    let grid = task.oracle.instruction_grid();
    let (argmax, argmax_score) = task.oracle.argmax_instructions();
    write_json(
        &out_dir.join("oracle.json"),
        &serde_json::json!({
            "instruction_grid": grid,
            "argmax": argmax,
            "argmax_score": argmax_score,
        }),
    )?;
    let config = RunConfig {
        task: TaskConfig {
            synthetic: Some(spec.clone()),
            ..TaskConfig::default()
        },
        optimizer: OptimizerConfig::default(),
        budget: Budget::new(60),
        backends: BackendsConfig::default(),
        seed: 0,
        parallelism: 1,
        split: "train".to_string(),
        output_dir: None,
        demo_store: None,
    };
    write_json(&out_dir.join("config.json"), &config)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parses_with_note_keys_and_defaults() {
        let raw = r#"{
            "_note": "synthetic smoke config",
            "task": {"synthetic_preset": "separable-2x6", "example_count": 40},
            "budget": {"max_trials": 5, "minibatch_size": 40, "full_eval_interval": 5}
        }"#;
        let config: RunConfig = serde_json::from_str(raw).unwrap();
        assert_eq!(config.seed, 0);
        assert_eq!(config.parallelism, 1);
        assert_eq!(config.split, "train");
        let task = config.task.resolve().unwrap();
        assert_eq!(task.dataset.examples.len(), 40);
    }

    #[test]
    fn unknown_optimizer_kind_is_a_parse_error() {
        let raw = r#"{
            "task": {"synthetic_preset": "separable-2x6"},
            "optimizer": {"kind": "gradient_descent"},
            "budget": {"max_trials": 1, "minibatch_size": 5, "full_eval_interval": 5}
        }"#;
        let err = serde_json::from_str::<RunConfig>(raw).unwrap_err().to_string();
        assert!(err.contains("bootstrap_rs"), "error lists valid kinds: {err}");
    }

    #[test]
    fn task_requires_exactly_one_mode() {
        let config = TaskConfig {
            synthetic_preset: Some("separable-2x6".into()),
            dataset: Some("x.jsonl".into()),
            ..TaskConfig::default()
        };
        assert!(config.resolve().is_err());
        assert!(TaskConfig::default().resolve().is_err());
    }

    #[test]
    fn unknown_preset_names_the_valid_ones() {
        let config = TaskConfig {
            synthetic_preset: Some("nope".into()),
            ..TaskConfig::default()
        };
        let err = match config.resolve() {
            Err(e) => e.to_string(),
            Ok(_) => panic!("unknown preset resolved"),
        };
        assert!(err.contains("separable-2x6"));
    }

    #[test]
    fn program_config_builds_cot_module() {
        let cfg = ProgramConfig {
            kind: "chain_of_thought".into(),
            inputs: vec!["question".into()],
            output: "answer".into(),
            output_description: String::new(),
            name: None,
            demo_slots: 2,
            seed_instruction: "Answer the question.".into(),
            max_tokens: 100,
            temperature: 0.0,
            stop_sequences: vec![],
        };
        let (program, assignment) = cfg.build().unwrap();
        assert_eq!(program.modules[0].output_fields.len(), 2);
        assert_eq!(program.modules[0].template.demo_slots(), 2);
        assert!(assignment.get(VariableId::instruction(0)).is_some());
    }
}
