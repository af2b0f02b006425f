//! Datasets, task metrics, and full-set / minibatch scoring of a program
//! under an assignment. Scores are means of per-example metric values in
//! `[0, 1]`; failed runs score 0 rather than being excluded, so crash-prone
//! prompts cannot bias the objective upward.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::lm::{LmBackend, LmError};
use crate::program::{run_program, Assignment, Program, Record, RunError};
use crate::proposal::ProposalHyperparameters;
use crate::tpe::ParamVector;

mod metrics;
mod wilcoxon;

pub use metrics::{conditional_format, exact_match_score, normalize_answer, Metric, MetricError};
pub use wilcoxon::{
    wilcoxon_exact_p, wilcoxon_normal_p, wilcoxon_signed_rank, WilcoxonError, WilcoxonResult,
};

/// One task example: inputs `x` plus metadata `x'` (e.g. the gold answer).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub inputs: Record,
    #[serde(default)]
    pub metadata: Record,
}

/// Examples plus named splits (index lists into `examples`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub splits: BTreeMap<String, Vec<usize>>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Result<Self, EvalError> {
        let dataset = Dataset {
            examples,
            splits: BTreeMap::new(),
        };
        dataset.validate()?;
        Ok(dataset)
    }

    /// Every example in a single `train` split.
    pub fn single_split(examples: Vec<Example>) -> Result<Self, EvalError> {
        let indices: Vec<usize> = (0..examples.len()).collect();
        let mut dataset = Dataset::new(examples)?;
        dataset.splits.insert("train".to_string(), indices);
        Ok(dataset)
    }

    pub fn with_split(mut self, name: &str, indices: Vec<usize>) -> Result<Self, EvalError> {
        self.splits.insert(name.to_string(), indices);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let mut ids = std::collections::BTreeSet::new();
        for example in &self.examples {
            if !ids.insert(example.id.as_str()) {
                return Err(EvalError::DuplicateId(example.id.clone()));
            }
        }
        for (name, indices) in &self.splits {
            for &i in indices {
                if i >= self.examples.len() {
                    return Err(EvalError::SplitOutOfRange {
                        split: name.clone(),
                        index: i,
                    });
                }
            }
        }
        // train/dev/test must not share examples.
        let canonical = ["train", "dev", "test"];
        for (i, a) in canonical.iter().enumerate() {
            for b in &canonical[i + 1..] {
                if let (Some(sa), Some(sb)) = (self.splits.get(*a), self.splits.get(*b)) {
                    let set: std::collections::BTreeSet<_> = sa.iter().collect();
                    if sb.iter().any(|i| set.contains(i)) {
                        return Err(EvalError::OverlappingSplits {
                            a: a.to_string(),
                            b: b.to_string(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, name: &str) -> Result<&[usize], EvalError> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| EvalError::UnknownSplit(name.to_string()))
    }

    pub fn split_examples(&self, name: &str) -> Result<Vec<&Example>, EvalError> {
        Ok(self.split(name)?.iter().map(|&i| &self.examples[i]).collect())
    }

    /// Loads `{id, inputs: {...}, metadata: {...}}` JSONL plus an optional
    /// `{split: [ids]}` JSON splits file. Without a splits file everything
    /// lands in `train`.
    pub fn from_jsonl(
        data_path: impl AsRef<Path>,
        splits_path: Option<&Path>,
    ) -> Result<Self, EvalError> {
        let file = File::open(data_path.as_ref())
            .map_err(|e| EvalError::Io(format!("{}: {e}", data_path.as_ref().display())))?;
        let mut examples = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| EvalError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| {
                EvalError::Io(format!("line {}: {e}", lineno + 1))
            })?;
            let id = value["id"]
                .as_str()
                .ok_or_else(|| EvalError::Io(format!("line {}: missing id", lineno + 1)))?
                .to_string();
            examples.push(Example {
                id,
                inputs: record_from_json(&value["inputs"]),
                metadata: record_from_json(&value["metadata"]),
            });
        }
        let mut dataset = if splits_path.is_some() {
            Dataset::new(examples)?
        } else {
            Dataset::single_split(examples)?
        };
        if let Some(path) = splits_path {
            let raw = std::fs::read_to_string(path)
                .map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
            let by_id: BTreeMap<String, Vec<String>> =
                serde_json::from_str(&raw).map_err(|e| EvalError::Io(e.to_string()))?;
            let index_of: BTreeMap<&str, usize> = dataset
                .examples
                .iter()
                .enumerate()
                .map(|(i, e)| (e.id.as_str(), i))
                .collect();
            for (name, ids) in by_id {
                let mut indices = Vec::with_capacity(ids.len());
                for id in ids {
                    let &i = index_of
                        .get(id.as_str())
                        .ok_or_else(|| EvalError::Io(format!("split {name}: unknown id {id}")))?;
                    indices.push(i);
                }
                dataset.splits.insert(name, indices);
            }
            dataset.validate()?;
        }
        Ok(dataset)
    }
}

/// Coerces a JSON object to a flat string record.
pub fn record_from_json(value: &serde_json::Value) -> Record {
    let mut out = Record::new();
    if let Some(map) = value.as_object() {
        for (k, v) in map {
            let s = match v {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Null => String::new(),
                other => other.to_string(),
            };
            out.insert(k.clone(), s);
        }
    }
    out
}

/// Whether a trial was scored on a minibatch or the full train split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialKind {
    Minibatch,
    Full,
}

/// One evaluated proposal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_index: usize,
    pub param_vector: ParamVector,
    /// Example ids of the minibatch; empty for full evaluations.
    pub batch_example_ids: Vec<String>,
    pub score: f64,
    pub kind: TrialKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposer_hparams: Option<ProposalHyperparameters>,
    /// For promoted full evaluations: the minibatch trial whose assignment
    /// was evaluated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_trial: Option<usize>,
    /// True when the proposer failed and the trial fell back to the seed.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degraded: bool,
}

impl TrialRecord {
    pub fn new(
        trial_index: usize,
        param_vector: ParamVector,
        batch_example_ids: Vec<String>,
        score: f64,
        kind: TrialKind,
    ) -> Self {
        TrialRecord {
            trial_index,
            param_vector,
            batch_example_ids,
            score,
            kind,
            proposer_hparams: None,
            source_trial: None,
            degraded: false,
        }
    }
}

/// Mean score plus diagnostics from one evaluation pass.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub score: f64,
    pub per_example: Vec<f64>,
    /// Examples that scored 0 because of an LM, parse, or metric failure.
    pub failures: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("cannot evaluate an empty example list")]
    EmptyBatch,
    #[error("batch of {requested} from split of {available}")]
    BatchTooLarge { requested: usize, available: usize },
    #[error("unknown split {0}")]
    UnknownSplit(String),
    #[error("duplicate example id {0}")]
    DuplicateId(String),
    #[error("split {split} index {index} out of range")]
    SplitOutOfRange { split: String, index: usize },
    #[error("splits {a} and {b} overlap")]
    OverlappingSplits { a: String, b: String },
    #[error("LM call ceiling reached during evaluation")]
    BudgetExhausted,
    #[error("program error during evaluation: {0}")]
    Run(String),
    #[error("dataset io error: {0}")]
    Io(String),
}

/// Scores one example; `Ok((score, failed))` unless the error is fatal.
fn score_example(
    program: &Program,
    assignment: &Assignment,
    example: &Example,
    metric: &Metric,
    lm: &dyn LmBackend,
    seed: u64,
) -> Result<(f64, bool), EvalError> {
    let run_seed = crate::hash::derive_seed(seed, &example.id);
    match run_program(program, assignment, &example.inputs, lm, run_seed) {
        Ok(outcome) => {
            if outcome.failed {
                return Ok((0.0, true));
            }
            match metric.score(&outcome.prediction, example) {
                Ok(s) => Ok((s, false)),
                Err(_) => Ok((0.0, true)),
            }
        }
        Err(RunError::Lm(LmError::BudgetExhausted)) => Err(EvalError::BudgetExhausted),
        Err(RunError::Lm(_)) => Ok((0.0, true)),
        Err(other) => Err(EvalError::Run(other.to_string())),
    }
}

/// Mean metric score of `program` under `assignment` over `examples`.
///
/// Runs up to `parallelism` examples concurrently; aggregation is in example
/// order, so the result does not depend on completion order.
pub fn evaluate(
    program: &Program,
    assignment: &Assignment,
    examples: &[&Example],
    metric: &Metric,
    lm: &dyn LmBackend,
    parallelism: usize,
    seed: u64,
) -> Result<EvalOutcome, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptyBatch);
    }
    let results: Vec<Result<(f64, bool), EvalError>> = if parallelism <= 1 || examples.len() == 1 {
        examples
            .iter()
            .map(|example| score_example(program, assignment, example, metric, lm, seed))
            .collect()
    } else {
        type Slot = Option<Result<(f64, bool), EvalError>>;
        let slots: Arc<Mutex<Vec<Slot>>> =
            Arc::new(Mutex::new((0..examples.len()).map(|_| None).collect()));
        std::thread::scope(|scope| {
            let workers = parallelism.min(examples.len());
            for worker in 0..workers {
                let slots = Arc::clone(&slots);
                scope.spawn(move || {
                    let mut i = worker;
                    while i < examples.len() {
                        let result =
                            score_example(program, assignment, examples[i], metric, lm, seed);
                        slots.lock().expect("eval slots")[i] = Some(result);
                        i += workers;
                    }
                });
            }
        });
        Arc::try_unwrap(slots)
            .map_err(|_| ())
            .expect("threads joined")
            .into_inner()
            .expect("eval slots")
            .into_iter()
            .map(|slot| slot.expect("all examples scored"))
            .collect()
    };

    let mut per_example = Vec::with_capacity(examples.len());
    let mut failures = 0usize;
    for result in results {
        let (score, failed) = result?;
        per_example.push(score);
        failures += usize::from(failed);
    }
    let score = per_example.iter().sum::<f64>() / per_example.len() as f64;
    Ok(EvalOutcome {
        score,
        per_example,
        failures,
    })
}

/// Draws `batch_size` distinct examples uniformly without replacement.
pub fn sample_minibatch<'a, R: Rng>(
    dataset: &'a Dataset,
    split: &str,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<&'a Example>, EvalError> {
    let indices = dataset.split(split)?;
    if batch_size > indices.len() {
        return Err(EvalError::BatchTooLarge {
            requested: batch_size,
            available: indices.len(),
        });
    }
    let chosen = rand::seq::index::sample(rng, indices.len(), batch_size);
    Ok(chosen
        .iter()
        .map(|i| &dataset.examples[indices[i]])
        .collect())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::lm::ScriptedLm;
    use crate::program::{record, GenParams, ModuleSpec, VariableId};

    use super::*;

    fn toy_examples(n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                id: format!("e{i:03}"),
                inputs: record([("question", format!("q{i}"))]),
                metadata: record([("answer", "yes")]),
            })
            .collect()
    }

    fn qa_program() -> Program {
        Program::single(ModuleSpec::standard(
            "qa",
            0,
            0,
            &["question"],
            &[("answer", "")],
            GenParams::default(),
        ))
        .unwrap()
    }

    #[test]
    fn constant_metric_means_one() {
        let dataset = Dataset::single_split(toy_examples(10)).unwrap();
        let metric = Metric::from_fn("one", |_, _| Ok(1.0));
        let lm = ScriptedLm::constant("answer: whatever");
        let assignment = Assignment::new().with(VariableId::instruction(0), "i");
        let examples = dataset.split_examples("train").unwrap();
        let outcome = evaluate(&qa_program(), &assignment, &examples, &metric, &lm, 1, 0).unwrap();
        assert_eq!(outcome.score, 1.0);
        assert_eq!(outcome.failures, 0);
    }

    #[test]
    fn mean_of_alternating_scores() {
        let dataset = Dataset::single_split(toy_examples(4)).unwrap();
        let metric = Metric::from_fn("alt", |_, example| {
            let i: usize = example.id[1..].parse().unwrap();
            Ok(if i.is_multiple_of(2) { 1.0 } else { 0.0 })
        });
        let lm = ScriptedLm::constant("answer: x");
        let assignment = Assignment::new().with(VariableId::instruction(0), "i");
        let examples = dataset.split_examples("train").unwrap();
        let outcome = evaluate(&qa_program(), &assignment, &examples, &metric, &lm, 1, 0).unwrap();
        assert_eq!(outcome.score, 0.5);
    }

    #[test]
    fn empty_batch_is_fatal() {
        let metric = Metric::from_fn("one", |_, _| Ok(1.0));
        let lm = ScriptedLm::constant("answer: x");
        let assignment = Assignment::new().with(VariableId::instruction(0), "i");
        let err = evaluate(&qa_program(), &assignment, &[], &metric, &lm, 1, 0).unwrap_err();
        assert!(matches!(err, EvalError::EmptyBatch));
    }

    #[test]
    fn parse_failures_score_zero_and_count() {
        let dataset = Dataset::single_split(toy_examples(3)).unwrap();
        let metric = Metric::from_fn("one", |_, _| Ok(1.0));
        let lm = ScriptedLm::constant(""); // unparseable for every example
        let assignment = Assignment::new().with(VariableId::instruction(0), "i");
        let examples = dataset.split_examples("train").unwrap();
        let outcome = evaluate(&qa_program(), &assignment, &examples, &metric, &lm, 1, 0).unwrap();
        assert_eq!(outcome.score, 0.0);
        assert_eq!(outcome.failures, 3);
    }

    #[test]
    fn evaluate_is_permutation_invariant() {
        let examples = toy_examples(7);
        let metric = Metric::from_fn("byid", |_, example| {
            let i: usize = example.id[1..].parse().unwrap();
            Ok(i as f64 / 10.0)
        });
        let lm = ScriptedLm::constant("answer: x");
        let assignment = Assignment::new().with(VariableId::instruction(0), "i");
        let forward: Vec<&Example> = examples.iter().collect();
        let mut reversed = forward.clone();
        reversed.reverse();
        let program = qa_program();
        let a = evaluate(&program, &assignment, &forward, &metric, &lm, 1, 0).unwrap();
        let b = evaluate(&program, &assignment, &reversed, &metric, &lm, 1, 0).unwrap();
        assert_eq!(a.score, b.score);
    }

    #[test]
    fn parallel_evaluation_matches_sequential() {
        let examples = toy_examples(13);
        let metric = Metric::exact_match("answer", "answer");
        let lm = ScriptedLm::new([("q", "answer: yes")], "answer: no");
        let assignment = Assignment::new().with(VariableId::instruction(0), "i");
        let refs: Vec<&Example> = examples.iter().collect();
        let program = qa_program();
        let seq = evaluate(&program, &assignment, &refs, &metric, &lm, 1, 7).unwrap();
        let par = evaluate(&program, &assignment, &refs, &metric, &lm, 4, 7).unwrap();
        assert_eq!(seq.score, par.score);
        assert_eq!(seq.per_example, par.per_example);
    }

    #[test]
    fn minibatch_of_split_size_permutes_whole_split() {
        let dataset = Dataset::single_split(toy_examples(6)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = sample_minibatch(&dataset, "train", 6, &mut rng).unwrap();
        let mut ids: Vec<&str> = batch.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        assert_eq!(ids, vec!["e000", "e001", "e002", "e003", "e004", "e005"]);
    }

    #[test]
    fn minibatch_is_deterministic_given_seed() {
        let dataset = Dataset::single_split(toy_examples(50)).unwrap();
        let draw = |seed: u64| -> Vec<String> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_minibatch(&dataset, "train", 10, &mut rng)
                .unwrap()
                .iter()
                .map(|e| e.id.clone())
                .collect()
        };
        assert_eq!(draw(42), draw(42));
        assert_ne!(draw(42), draw(43));
    }

    #[test]
    fn oversized_batch_errors() {
        let dataset = Dataset::single_split(toy_examples(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_minibatch(&dataset, "train", 5, &mut rng),
            Err(EvalError::BatchTooLarge { .. })
        ));
    }

    #[test]
    fn minibatch_inclusion_is_uniform() {
        // Monte Carlo oracle: over 10,000 draws of B=25 from 500, each
        // example's inclusion frequency is within ±15% of 25/500.
        let dataset = Dataset::single_split(toy_examples(500)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = vec![0u32; 500];
        let draws = 10_000;
        for _ in 0..draws {
            for example in sample_minibatch(&dataset, "train", 25, &mut rng).unwrap() {
                let i: usize = example.id[1..].parse().unwrap();
                counts[i] += 1;
            }
        }
        let expected = draws as f64 * 25.0 / 500.0;
        for (i, &c) in counts.iter().enumerate() {
            let deviation = (c as f64 - expected).abs() / expected;
            assert!(
                deviation <= 0.15,
                "example {i}: frequency {c} deviates {deviation:.3} from {expected}"
            );
        }
    }

    #[test]
    fn minibatch_means_are_unbiased_by_enumeration() {
        // All 56 batches of size 3 from a split of 8: the mean of batch
        // means equals the full-split mean to 1e-12.
        let scores: Vec<f64> = vec![0.9, 0.1, 0.35, 0.62, 0.5, 0.77, 0.03, 1.0];
        let full_mean = scores.iter().sum::<f64>() / 8.0;
        let mut batch_means = Vec::new();
        for a in 0..8 {
            for b in (a + 1)..8 {
                for c in (b + 1)..8 {
                    batch_means.push((scores[a] + scores[b] + scores[c]) / 3.0);
                }
            }
        }
        assert_eq!(batch_means.len(), 56);
        let mean_of_means = batch_means.iter().sum::<f64>() / batch_means.len() as f64;
        assert!((mean_of_means - full_mean).abs() < 1e-12);
    }

    #[test]
    fn dataset_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data.jsonl");
        let splits = dir.path().join("splits.json");
        std::fs::write(
            &data,
            concat!(
                "{\"id\":\"a\",\"inputs\":{\"q\":\"one\",\"n\":1},\"metadata\":{\"answer\":\"x\"}}\n",
                "{\"id\":\"b\",\"inputs\":{\"q\":\"two\"},\"metadata\":{\"answer\":null}}\n",
            ),
        )
        .unwrap();
        std::fs::write(&splits, "{\"train\":[\"a\"],\"dev\":[\"b\"]}").unwrap();
        let dataset = Dataset::from_jsonl(&data, Some(splits.as_path())).unwrap();
        assert_eq!(dataset.examples.len(), 2);
        assert_eq!(dataset.split("train").unwrap(), &[0]);
        assert_eq!(dataset.examples[0].inputs.get("n").unwrap(), "1");
        assert_eq!(dataset.examples[1].metadata.get("answer").unwrap(), "");
    }

    #[test]
    fn overlapping_canonical_splits_rejected() {
        let examples = toy_examples(4);
        let err = Dataset::new(examples)
            .unwrap()
            .with_split("train", vec![0, 1])
            .unwrap()
            .with_split("test", vec![1, 2]);
        assert!(matches!(err, Err(EvalError::OverlappingSplits { .. })));
    }
}
