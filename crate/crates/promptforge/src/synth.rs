//! Synthetic tasks with planted optima.
//!
//! A synthetic task is a chain of template modules whose scripted task LM
//! answers each example correctly with probability `quality(v)` for the
//! parameterization `v` it can read back out of its own prompts. Per-example
//! correctness is a hash of (task seed, example id, parameterization), not a
//! fresh RNG draw, so minibatch scores replay exactly and the full score of
//! any parameterization is computable in closed form by the exported
//! brute-force oracle.
//!
//! Each module call emits a code segment `m<i>=i<j>[sources]` recording its
//! instruction index and the source ids of the demonstrations in its
//! prompt; the control flow threads the accumulated chain forward so the
//! final module sees the whole parameterization.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::eval::{Dataset, Example, Metric};
use crate::hash::{hex_digest, unit_hash};
use crate::lm::CallbackLm;
use crate::program::{record, Assignment, GenParams, ModuleSpec, Program, Record, VariableId};

/// One pairwise interaction: `bonus` applies when both modules pick the
/// named instruction choices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InteractionTerm {
    pub module_a: usize,
    pub choice_a: usize,
    pub module_b: usize,
    pub choice_b: usize,
    pub bonus: f64,
}

/// Declarative description of a synthetic task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub name: String,
    pub modules: usize,
    /// Instruction candidates per module (index 0 is the seed).
    pub instruction_cardinality: Vec<usize>,
    /// Demonstration slots per module.
    pub demo_slots: Vec<usize>,
    /// Base accuracy before additive terms.
    pub base_quality: f64,
    /// Additive per-module, per-instruction-choice quality terms.
    pub instruction_quality: Vec<Vec<f64>>,
    #[serde(default)]
    pub interactions: Vec<InteractionTerm>,
    /// Scale of the per-demonstration content hash weights.
    #[serde(default)]
    pub demo_weight_scale: f64,
    pub example_count: usize,
    pub seed: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("spec shape mismatch: {0}")]
    BadSpec(String),
    #[error("instruction grid has no unique argmax (ties at {0:.4})")]
    NonUniqueArgmax(f64),
    #[error("program construction failed: {0}")]
    Program(String),
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.modules == 0
            || self.instruction_cardinality.len() != self.modules
            || self.demo_slots.len() != self.modules
            || self.instruction_quality.len() != self.modules
        {
            return Err(SynthError::BadSpec(
                "per-module vectors must match the module count".into(),
            ));
        }
        for (m, quality) in self.instruction_quality.iter().enumerate() {
            if quality.len() != self.instruction_cardinality[m] {
                return Err(SynthError::BadSpec(format!(
                    "module {m}: {} quality terms for cardinality {}",
                    quality.len(),
                    self.instruction_cardinality[m]
                )));
            }
        }
        if self.example_count == 0 {
            return Err(SynthError::BadSpec("example_count must be positive".into()));
        }
        Ok(())
    }

    pub fn module_name(&self, index: usize) -> String {
        format!("stage{index}")
    }

    pub fn instruction_text(&self, module_index: usize, choice: usize) -> String {
        format!(
            "synthetic instruction {choice} for {}",
            self.module_name(module_index)
        )
    }

    pub fn example_id(&self, index: usize) -> String {
        format!("ex{index:04}")
    }

    pub fn gold_answer(&self, example_id: &str) -> String {
        let digest = hex_digest(format!("{}-gold-{example_id}", self.seed).as_bytes());
        format!("ans-{}", &digest[..8])
    }
}

/// Brute-force ground truth over the planted quality surface.
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    spec: SyntheticTaskSpec,
}

impl SyntheticOracle {
    /// Content weight of one demonstration in one module's prompt.
    pub fn demo_weight(&self, module_index: usize, source_example_id: &str) -> f64 {
        unit_hash(&[
            &self.spec.seed.to_string(),
            "demo-w",
            &module_index.to_string(),
            source_example_id,
        ]) * self.spec.demo_weight_scale
    }

    /// Planted accuracy of a parameterization, in `[0, 1]`.
    pub fn quality(&self, instructions: &[usize], demo_sources: &[Vec<String>]) -> f64 {
        let mut q = self.spec.base_quality;
        for (m, &j) in instructions.iter().enumerate() {
            q += self.spec.instruction_quality[m][j];
        }
        for term in &self.spec.interactions {
            if instructions.get(term.module_a) == Some(&term.choice_a)
                && instructions.get(term.module_b) == Some(&term.choice_b)
            {
                q += term.bonus;
            }
        }
        for (m, sources) in demo_sources.iter().enumerate() {
            for source in sources {
                q += self.demo_weight(m, source);
            }
        }
        q.clamp(0.0, 1.0)
    }

    /// Canonical descriptor shared by the scripted task LM and the oracle.
    pub fn descriptor(&self, instructions: &[usize], demo_sources: &[Vec<String>]) -> String {
        instructions
            .iter()
            .enumerate()
            .map(|(m, &j)| {
                let sources = demo_sources
                    .get(m)
                    .map(|s| s.join(","))
                    .unwrap_or_default();
                format!("m{m}=i{j}[{sources}]")
            })
            .collect::<Vec<_>>()
            .join("&&")
    }

    /// Whether one example is answered correctly under a parameterization.
    pub fn is_correct(&self, example_id: &str, descriptor: &str) -> bool {
        let q = match parse_descriptor(descriptor, self.spec.modules) {
            Some((instructions, sources)) => self.quality(&instructions, &sources),
            None => 0.0,
        };
        unit_hash(&[&self.spec.seed.to_string(), example_id, descriptor]) < q
    }

    /// Exact full-split score of a parameterization.
    pub fn full_score(&self, instructions: &[usize], demo_sources: &[Vec<String>]) -> f64 {
        let descriptor = self.descriptor(instructions, demo_sources);
        let correct = (0..self.spec.example_count)
            .filter(|&i| self.is_correct(&self.spec.example_id(i), &descriptor))
            .count();
        correct as f64 / self.spec.example_count as f64
    }

    /// Realized full score of every instruction combination (no demos), in
    /// lexicographic order.
    pub fn instruction_grid(&self) -> Vec<(Vec<usize>, f64)> {
        let empty: Vec<Vec<String>> = vec![Vec::new(); self.spec.modules];
        let mut grid = vec![vec![]];
        for &cardinality in &self.spec.instruction_cardinality {
            let mut next = Vec::with_capacity(grid.len() * cardinality);
            for prefix in &grid {
                for j in 0..cardinality {
                    let mut v: Vec<usize> = prefix.clone();
                    v.push(j);
                    next.push(v);
                }
            }
            grid = next;
        }
        grid.into_iter()
            .map(|v| {
                let score = self.full_score(&v, &empty);
                (v, score)
            })
            .collect()
    }

    /// The instruction combination with the highest realized full score.
    pub fn argmax_instructions(&self) -> (Vec<usize>, f64) {
        self.instruction_grid()
            .into_iter()
            .fold(None::<(Vec<usize>, f64)>, |best, (v, s)| match best {
                None => Some((v, s)),
                Some((_, bs)) if s > bs => Some((v, s)),
                Some(best) => Some(best),
            })
            .expect("grid nonempty")
    }
}

/// Parses `m0=i2[a,b]&&m1=i0[]` back into indices and source lists.
fn parse_descriptor(descriptor: &str, modules: usize) -> Option<(Vec<usize>, Vec<Vec<String>>)> {
    let mut instructions = vec![0usize; modules];
    let mut sources = vec![Vec::new(); modules];
    for segment in descriptor.split("&&") {
        let rest = segment.strip_prefix('m')?;
        let (module, rest) = rest.split_once("=i")?;
        let (choice, rest) = rest.split_once('[')?;
        let source_list = rest.strip_suffix(']')?;
        let m: usize = module.parse().ok()?;
        if m >= modules {
            return None;
        }
        instructions[m] = choice.parse().ok()?;
        sources[m] = if source_list.is_empty() {
            Vec::new()
        } else {
            source_list.split(',').map(str::to_string).collect()
        };
    }
    Some((instructions, sources))
}

/// Everything needed to run optimizers against a planted task.
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    pub program: Program,
    pub seed_assignment: Assignment,
    pub dataset: Dataset,
    pub metric: Metric,
    pub oracle: SyntheticOracle,
}

/// Last `field: value` occurrence in a prompt (the live input; earlier
/// occurrences come from demonstration blocks).
fn field_values(prompt: &str, field: &str) -> Vec<String> {
    let mut values = Vec::new();
    let mut cursor = 0;
    while let Some((_, end)) = crate::program::find_marker(prompt, field, cursor) {
        let line_end = prompt[end..]
            .find('\n')
            .map(|i| end + i)
            .unwrap_or(prompt.len());
        values.push(prompt[end..line_end].trim().to_string());
        cursor = line_end;
    }
    values
}

fn parse_own_instruction(prompt: &str) -> (usize, usize) {
    // "synthetic instruction <j> for stage<i>" is the first prompt line.
    let after = prompt
        .find("synthetic instruction ")
        .map(|p| &prompt[p + "synthetic instruction ".len()..])
        .unwrap_or("");
    let choice: usize = after
        .split_whitespace()
        .next()
        .and_then(|t| t.parse().ok())
        .unwrap_or(0);
    let module: usize = after
        .find("for stage")
        .and_then(|p| {
            after[p + "for stage".len()..]
                .split(|c: char| !c.is_ascii_digit())
                .next()
                .and_then(|t| t.parse().ok())
        })
        .unwrap_or(0);
    (module, choice)
}

impl SyntheticTask {
    /// The scripted task LM: intermediate modules emit their code segment,
    /// the final module scores the whole chain and answers gold or wrong.
    pub fn task_lm(&self) -> CallbackLm {
        let spec = self.spec.clone();
        let oracle = SyntheticOracle { spec: spec.clone() };
        CallbackLm::new("synthetic-task", move |request| {
            let prompt = &request.prompt;
            let (module, choice) = parse_own_instruction(prompt);
            let mut examples = field_values(prompt, "example");
            let live_example = examples.pop().unwrap_or_default();
            let segment = format!("m{module}=i{choice}[{}]", examples.join(","));
            let chain = field_values(prompt, "chain").pop().unwrap_or_default();
            if module + 1 < spec.modules {
                return segment;
            }
            let descriptor = if chain.is_empty() {
                segment
            } else {
                format!("{chain}&&{segment}")
            };
            if oracle.is_correct(&live_example, &descriptor) {
                spec.gold_answer(&live_example)
            } else {
                "incorrect answer".to_string()
            }
        })
    }

    /// The scripted proposer: cycles through the planted instruction
    /// candidates of whichever module the meta-prompt asks about.
    pub fn proposer_lm(&self) -> CallbackLm {
        let spec = self.spec.clone();
        let counters: Mutex<Vec<usize>> = Mutex::new(vec![0; spec.modules]);
        CallbackLm::new("synthetic-proposer", move |request| {
            let prompt = &request.prompt;
            let next_choice = |m: usize, counters: &mut Vec<usize>| -> usize {
                let cardinality = spec.instruction_cardinality[m];
                if cardinality <= 1 {
                    return 0;
                }
                let count = counters[m];
                counters[m] += 1;
                1 + (count % (cardinality - 1))
            };
            let mut counters = counters.lock().expect("proposer counters");
            if prompt.contains("Proposed Instructions:") {
                // Program-level round: emit one instruction per module.
                let mut lines = Vec::new();
                for m in 0..spec.modules {
                    let j = next_choice(m, &mut counters);
                    let text = spec.instruction_text(m, j);
                    if m == 0 {
                        lines.push(text);
                    } else {
                        lines.push(format!("Instruction {}: {text}", m + 1));
                    }
                }
                return lines.join("\n");
            }
            if let Some(module) = field_values(prompt, "Module")
                .first()
                .and_then(|name| name.strip_prefix("stage"))
                .and_then(|digits| digits.parse::<usize>().ok())
            {
                if module < spec.modules {
                    let j = next_choice(module, &mut counters);
                    return spec.instruction_text(module, j);
                }
            }
            // Summarizer prompts and anything else.
            "synthetic grounding summary".to_string()
        })
    }
}

/// Builds the program, dataset, metric, and oracle for a spec.
///
/// Fails with `NonUniqueArgmax` when two instruction combinations tie on
/// realized full score.
pub fn make_synthetic(spec: &SyntheticTaskSpec) -> Result<SyntheticTask, SynthError> {
    spec.validate()?;
    let oracle = SyntheticOracle { spec: spec.clone() };

    // The argmax must be unique over realized (not planted) scores.
    let grid = oracle.instruction_grid();
    let (best, best_score) = oracle.argmax_instructions();
    for (v, s) in &grid {
        if *v != best && *s == best_score {
            return Err(SynthError::NonUniqueArgmax(best_score));
        }
    }

    let mut modules = Vec::with_capacity(spec.modules);
    for m in 0..spec.modules {
        let is_final = m + 1 == spec.modules;
        let inputs: Vec<&str> = if m == 0 {
            vec!["example"]
        } else {
            vec!["example", "chain"]
        };
        let outputs: Vec<(&str, &str)> = if is_final {
            vec![("answer", "the final answer")]
        } else {
            vec![("code", "stage code")]
        };
        modules.push(ModuleSpec::standard(
            &spec.module_name(m),
            m,
            spec.demo_slots[m],
            &inputs,
            &outputs,
            GenParams {
                max_tokens: 200,
                stop_sequences: vec!["\n\n".to_string()],
                temperature: 0.0,
            },
        ));
    }
    let num_modules = spec.modules;
    let program = Program::new(modules, move |calls, input| {
        let example = input.get("example").cloned().unwrap_or_default();
        let mut chain = String::new();
        for m in 0..num_modules {
            let mut inputs: Record = record([("example", example.clone())]);
            if m > 0 {
                inputs.insert("chain".into(), chain.clone());
            }
            let out = calls.invoke(m, &inputs)?;
            if m + 1 == num_modules {
                return Ok(out);
            }
            let code = out.get("code").cloned().unwrap_or_default();
            chain = if chain.is_empty() {
                code
            } else {
                format!("{chain}&&{code}")
            };
        }
        unreachable!("loop returns at the final module")
    })
    .map_err(|e| SynthError::Program(e.to_string()))?;

    let mut seed_assignment = Assignment::new();
    for m in 0..spec.modules {
        seed_assignment.bind(VariableId::instruction(m), spec.instruction_text(m, 0));
    }

    let examples: Vec<Example> = (0..spec.example_count)
        .map(|i| {
            let id = spec.example_id(i);
            let gold = spec.gold_answer(&id);
            Example {
                id: id.clone(),
                inputs: record([("example", id)]),
                metadata: record([("answer", gold)]),
            }
        })
        .collect();
    let dataset = Dataset::single_split(examples)
        .map_err(|e| SynthError::Program(e.to_string()))?;

    Ok(SyntheticTask {
        spec: spec.clone(),
        program,
        seed_assignment,
        dataset,
        metric: Metric::exact_match("answer", "answer"),
        oracle,
    })
}

/// Two modules, six instructions each, separable additive quality.
pub fn separable_2x6(example_count: usize, seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        name: "separable-2x6".into(),
        modules: 2,
        instruction_cardinality: vec![6, 6],
        demo_slots: vec![0, 0],
        base_quality: 0.1,
        instruction_quality: vec![
            vec![0.0, 0.05, 0.10, 0.15, 0.20, 0.25],
            vec![0.0, 0.06, 0.12, 0.18, 0.24, 0.30],
        ],
        interactions: vec![],
        demo_weight_scale: 0.0,
        example_count,
        seed,
    }
}

/// Two modules, four instructions each, with a pairwise bonus that makes
/// the additive optimum a trap for greedy coordinate ascent: no single
/// coordinate change from (1, 1) improves, but (3, 3) is globally best.
pub fn interaction_2x4(example_count: usize, seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        name: "interaction-2x4".into(),
        modules: 2,
        instruction_cardinality: vec![4, 4],
        demo_slots: vec![0, 0],
        base_quality: 0.3,
        instruction_quality: vec![
            vec![0.0, 0.20, 0.02, 0.15],
            vec![0.0, 0.20, 0.02, 0.15],
        ],
        interactions: vec![InteractionTerm {
            module_a: 0,
            choice_a: 3,
            module_b: 1,
            choice_b: 3,
            bonus: 0.2,
        }],
        demo_weight_scale: 0.0,
        example_count,
        seed,
    }
}

/// Three modules, four instructions each, adjacent quality gaps of 0.05:
/// designed to stress credit assignment under minibatch noise.
pub fn noisy_3x4(example_count: usize, seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        name: "noisy-3x4".into(),
        modules: 3,
        instruction_cardinality: vec![4, 4, 4],
        demo_slots: vec![0, 0, 0],
        base_quality: 0.35,
        instruction_quality: vec![
            vec![0.0, 0.05, 0.10, 0.15],
            vec![0.0, 0.05, 0.10, 0.15],
            vec![0.0, 0.05, 0.10, 0.15],
        ],
        interactions: vec![],
        demo_weight_scale: 0.0,
        example_count,
        seed,
    }
}

/// A preset by name.
pub fn preset(name: &str, example_count: usize, seed: u64) -> Option<SyntheticTaskSpec> {
    match name {
        "separable-2x6" => Some(separable_2x6(example_count, seed)),
        "interaction-2x4" => Some(interaction_2x4(example_count, seed)),
        "noisy-3x4" => Some(noisy_3x4(example_count, seed)),
        _ => None,
    }
}
