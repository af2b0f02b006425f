//! Rejection-sampling of few-shot demonstrations from successful program
//! traces, and assembly of candidate demonstration sets.
//!
//! The teacher program runs over shuffled training examples; whenever a
//! run's task-level score clears the acceptance threshold, every call in
//! its trace becomes one demonstration for its module. Selecting good
//! demo combinations is then left to the optimizers.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::{Dataset, EvalError, Metric};
use crate::lm::{LmBackend, LmError};
use crate::program::{run_program, Assignment, Program, Record, RunError};

/// One input/output pair captured from a trace call that passed the metric
/// threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub module_index: usize,
    pub inputs: Record,
    pub outputs: Record,
    pub source_example_id: String,
    pub source_score: f64,
}

/// The global store of accepted demonstrations, per module. Append-only
/// during a run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DemoStore {
    pub per_module: BTreeMap<usize, Vec<Demonstration>>,
}

impl DemoStore {
    pub fn demos(&self, module_index: usize) -> &[Demonstration] {
        self.per_module
            .get(&module_index)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn is_empty(&self) -> bool {
        self.per_module.values().all(Vec::is_empty)
    }

    pub fn total(&self) -> usize {
        self.per_module.values().map(Vec::len).sum()
    }

    /// One demonstration per JSONL line.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut file = std::fs::File::create(path)?;
        for demos in self.per_module.values() {
            for demo in demos {
                writeln!(file, "{}", serde_json::to_string(demo)?)?;
            }
        }
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut store = DemoStore::default();
        for line in std::io::BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let demo: Demonstration = serde_json::from_str(&line)?;
            store.per_module.entry(demo.module_index).or_default().push(demo);
        }
        Ok(store)
    }
}

/// Bootstrapping knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapConfig {
    /// Acceptance threshold on the task-level score.
    pub threshold: f64,
    /// Demonstration slots per module (K).
    pub max_demos_per_module: usize,
    /// Candidate demo sets to assemble (the first is always empty).
    pub num_candidate_sets: usize,
    /// Source-example budget for teacher runs.
    pub max_source_examples: usize,
    /// Assignment the teacher program runs under (by default the seed).
    pub teacher_assignment: Assignment,
    pub rng_seed: u64,
}

impl BootstrapConfig {
    /// Default acceptance threshold: 1.0 for 0/1 metrics, 0.5 otherwise.
    pub fn default_threshold(metric_is_binary: bool) -> f64 {
        if metric_is_binary {
            1.0
        } else {
            0.5
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BootstrapError {
    #[error("no teacher run cleared the acceptance threshold")]
    NoDemosFound,
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("teacher run failed: {0}")]
    Run(String),
    #[error("LM call ceiling reached during bootstrapping")]
    BudgetExhausted,
}

/// Runs the teacher over shuffled train examples, keeping the trace of
/// every run whose score clears `cfg.threshold`, until the source budget is
/// spent or every module has `K * num_candidate_sets` demonstrations.
pub fn bootstrap_demos(
    program: &Program,
    dataset: &Dataset,
    metric: &Metric,
    cfg: &BootstrapConfig,
    lm: &dyn LmBackend,
) -> Result<DemoStore, BootstrapError> {
    let target = cfg.max_demos_per_module * cfg.num_candidate_sets;
    let mut store = DemoStore::default();
    for m in 0..program.modules.len() {
        store.per_module.insert(m, Vec::new());
    }
    if cfg.max_demos_per_module == 0 {
        return Ok(store);
    }

    let mut examples = dataset.split_examples("train")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    examples.shuffle(&mut rng);

    // Sort key per demo: (source example id, invocation ordinal).
    type Keyed = Vec<((String, usize), Demonstration)>;
    let mut keyed: BTreeMap<usize, Keyed> = BTreeMap::new();
    let mut accepted = 0usize;
    for example in examples.into_iter().take(cfg.max_source_examples) {
        let run_seed = crate::hash::derive_seed(cfg.rng_seed, &example.id);
        let outcome = match run_program(
            program,
            &cfg.teacher_assignment,
            &example.inputs,
            lm,
            run_seed,
        ) {
            Ok(outcome) => outcome,
            Err(RunError::Lm(LmError::BudgetExhausted)) => {
                return Err(BootstrapError::BudgetExhausted)
            }
            Err(RunError::Lm(_)) => continue, // failed run: rejected
            Err(other) => return Err(BootstrapError::Run(other.to_string())),
        };
        if outcome.failed {
            continue;
        }
        let score = match metric.score(&outcome.prediction, example) {
            Ok(score) => score,
            Err(_) => continue,
        };
        if score < cfg.threshold {
            continue;
        }
        accepted += 1;
        for call in &outcome.trace.calls {
            keyed.entry(call.module_index).or_default().push((
                (example.id.clone(), call.invocation_ordinal),
                Demonstration {
                    module_index: call.module_index,
                    inputs: call.inputs.clone(),
                    outputs: call.parsed_outputs.clone(),
                    source_example_id: example.id.clone(),
                    source_score: score,
                },
            ));
        }
        let enough = (0..program.modules.len())
            .all(|m| keyed.get(&m).map(Vec::len).unwrap_or(0) >= target);
        if enough {
            break;
        }
    }

    if accepted == 0 {
        return Err(BootstrapError::NoDemosFound);
    }
    for (module, mut demos) in keyed {
        demos.sort_by(|(a, _), (b, _)| a.cmp(b));
        store.per_module.insert(module, demos.into_iter().map(|(_, d)| d).collect());
    }
    Ok(store)
}

/// One candidate demonstration set: a demo list per module.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DemoSet {
    pub per_module: Vec<Vec<Demonstration>>,
}

impl DemoSet {
    pub fn empty(num_modules: usize) -> Self {
        DemoSet {
            per_module: vec![Vec::new(); num_modules],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.per_module.iter().all(Vec::is_empty)
    }

    /// Binds this set's demos into `assignment` as formatted blocks,
    /// truncated to each module's available demo slots.
    pub fn apply(&self, program: &Program, assignment: &mut Assignment) {
        for (module_index, module) in program.modules.iter().enumerate() {
            let slots = module.template.demo_slots();
            let demos = self
                .per_module
                .get(module_index)
                .map(Vec::as_slice)
                .unwrap_or(&[]);
            let texts: Vec<String> = demos
                .iter()
                .take(slots)
                .map(|demo| module.format_demo_block(&demo.inputs, &demo.outputs))
                .collect();
            assignment.bind_demo_texts(module_index, &texts);
        }
    }

    /// Formatted preview (used to show candidate demos to the proposer).
    pub fn preview(&self, program: &Program, max_per_module: usize) -> String {
        let mut parts = Vec::new();
        for (module_index, module) in program.modules.iter().enumerate() {
            for demo in self
                .per_module
                .get(module_index)
                .map(Vec::as_slice)
                .unwrap_or(&[])
                .iter()
                .take(max_per_module)
            {
                parts.push(module.format_demo_block(&demo.inputs, &demo.outputs));
            }
        }
        parts.join("\n\n")
    }
}

/// Assembles `num_sets` candidate demo sets. Set 0 is always empty (the
/// explicit 0-shot arm); the rest draw `min(K, available)` demos per module
/// without replacement within a set.
pub fn sample_demo_sets<R: Rng>(
    store: &DemoStore,
    num_modules: usize,
    max_demos_per_module: usize,
    num_sets: usize,
    rng: &mut R,
) -> Vec<DemoSet> {
    let mut sets = vec![DemoSet::empty(num_modules)];
    for _ in 1..num_sets.max(1) {
        let mut set = DemoSet::empty(num_modules);
        for module_index in 0..num_modules {
            let available = store.demos(module_index);
            let take = max_demos_per_module.min(available.len());
            if take == 0 {
                continue;
            }
            let chosen = rand::seq::index::sample(rng, available.len(), take);
            set.per_module[module_index] = chosen.iter().map(|i| available[i].clone()).collect();
        }
        sets.push(set);
    }
    sets
}
