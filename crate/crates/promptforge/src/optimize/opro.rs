//! History-based and greedy instruction optimizers.
//!
//! Module-level OPRO proposes one instruction per module per round from
//! per-module meta-prompts and attaches the realized task-level score to
//! every module's new instruction (equal credit). Program-level OPRO keeps
//! one meta-prompt of full multi-instruction trajectories and asks for all
//! instructions in a single completion. CA-OPRO is the greedy variant:
//! coordinate ascent over modules with everything else frozen.

use crate::lm::{LmError, LmRequest};
use crate::program::{find_marker, Assignment, VariableId};
use crate::proposal::{
    propose_instructions, summarize_dataset, summarize_program,
    GroundingContext, InstructionCandidate, ProposalHyperparameters, Provenance, ProvenanceSource,
};
use crate::tpe::{ParamKind, ParamSpec, ParamVector, SearchSpace};

use super::{Env, OptimizeError, RunParts, StepError, Summaries};

/// Resolves optional dataset/program summaries per the proposer flags.
fn grounding_summaries(env: &mut Env<'_>) -> Result<Summaries, StepError> {
    let mut summaries = Summaries::default();
    if env.config.proposer.use_dataset_summary {
        summaries.dataset = Some(summarize_dataset(env.dataset, &env.proposer_lm, 10)?);
    }
    if env.config.proposer.use_program_summary {
        summaries.program = Some(summarize_program(env.program, &env.proposer_lm)?);
    }
    Ok(summaries)
}

/// Candidate table interning: identical texts share one index.
fn intern(
    table: &mut Vec<InstructionCandidate>,
    module_index: usize,
    text: String,
    trial: usize,
) -> usize {
    if let Some(i) = table.iter().position(|c| c.text == text) {
        return i;
    }
    table.push(InstructionCandidate {
        module_index,
        text,
        provenance: Provenance {
            source: ProvenanceSource::Trial(trial),
            hparams: None,
        },
    });
    table.len() - 1
}

fn seed_tables(env: &Env<'_>) -> Vec<Vec<InstructionCandidate>> {
    (0..env.program.modules.len())
        .map(|m| {
            vec![InstructionCandidate {
                module_index: m,
                text: env.seed_instruction(m),
                provenance: Provenance {
                    source: ProvenanceSource::Seed,
                    hparams: None,
                },
            }]
        })
        .collect()
}

fn instruction_space(tables: &[Vec<InstructionCandidate>]) -> Result<SearchSpace, StepError> {
    SearchSpace::new(
        tables
            .iter()
            .enumerate()
            .map(|(m, table)| ParamSpec {
                name: format!("m{m}.instruction"),
                cardinality: table.len().max(1),
                kind: ParamKind::InstructionChoice { module_index: m },
            })
            .collect(),
    )
    .map_err(|e| StepError::Fatal(OptimizeError::Other(e.to_string())))
}

fn assignment_for(
    env: &Env<'_>,
    tables: &[Vec<InstructionCandidate>],
    choices: &[usize],
) -> Assignment {
    let mut assignment = env.seed_assignment.clone();
    for (m, &choice) in choices.iter().enumerate() {
        assignment.bind(VariableId::instruction(m), tables[m][choice].text.clone());
    }
    assignment
}

/// Keeps the `max_history` highest-scored entries, earliest first on ties,
/// preserving insertion order.
fn truncate_history(history: &mut Vec<(usize, f64)>, max_history: usize) {
    if history.len() <= max_history {
        return;
    }
    let mut ranked: Vec<usize> = (0..history.len()).collect();
    ranked.sort_by(|&a, &b| {
        history[b]
            .1
            .partial_cmp(&history[a].1)
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let keep: std::collections::BTreeSet<usize> = ranked.into_iter().take(max_history).collect();
    let mut index = 0;
    history.retain(|_| {
        let kept = keep.contains(&index);
        index += 1;
        kept
    });
}

fn history_view(
    table: &[InstructionCandidate],
    history: &[(usize, f64)],
) -> Vec<(String, f64)> {
    history
        .iter()
        .map(|&(idx, score)| (table[idx].text.clone(), score))
        .collect()
}

/// One history-grounded proposal for one module; `None` on proposer
/// failure (the module keeps its previous instruction that round).
fn propose_for_module(
    env: &mut Env<'_>,
    summaries: &Summaries,
    module_index: usize,
    history: Vec<(String, f64)>,
) -> Result<Option<String>, StepError> {
    let ctx = GroundingContext {
        dataset_description: summaries.dataset.clone(),
        program_code: None,
        program_description: summaries.program.clone(),
        module_name: env.program.modules[module_index].name.clone(),
        task_demos: None,
        previous_instructions: Some(history),
        basic_instruction: env.seed_instruction(module_index),
        tip: crate::proposal::Tip::None,
    };
    let hparams = ProposalHyperparameters {
        seed_instruction: env.seed_instruction(module_index),
        ..env.config.proposer.clone()
    };
    let outcome = propose_instructions(
        module_index,
        2,
        &ctx,
        &hparams,
        &[],
        &env.proposer_lm,
        &mut env.rng_prop,
    )?;
    Ok(outcome.candidates.get(1).map(|c| c.text.clone()))
}

/// Module-level OPRO (equal-credit history optimization).
pub(crate) fn run_module_level(env: &mut Env<'_>) -> Result<RunParts, StepError> {
    let num_modules = env.program.modules.len();
    let mut tables = seed_tables(env);
    let seed_assignment = assignment_for(env, &tables, &vec![0; num_modules]);
    let seed_score = env.eval_full(
        &seed_assignment,
        ParamVector::new(vec![0; num_modules]),
        None,
        None,
        false,
    )?;
    let summaries = grounding_summaries(env)?;

    // Store A: per-module histories of (candidate index, proxy score),
    // initialized with the seed at the global baseline score.
    let mut histories: Vec<Vec<(usize, f64)>> = (0..num_modules).map(|_| vec![(0, seed_score)]).collect();
    let mut last = vec![0usize; num_modules];

    for _round in 1..=env.budget.max_trials {
        if env.exhausted {
            break;
        }
        let mut next = last.clone();
        let mut stop = false;
        for m in 0..num_modules {
            let view = history_view(&tables[m], &histories[m]);
            match propose_for_module(env, &summaries, m, view) {
                Ok(Some(text)) => {
                    next[m] = intern(&mut tables[m], m, text, env.next_trial_index());
                }
                Ok(None) => {} // keep previous instruction this round
                Err(StepError::Exhausted) => {
                    stop = true;
                    break;
                }
                Err(fatal) => return Err(fatal),
            }
        }
        if stop {
            break;
        }
        let assignment = assignment_for(env, &tables, &next);
        let score = match env.eval_full(&assignment, ParamVector::new(next.clone()), None, None, false)
        {
            Ok(score) => score,
            Err(StepError::Exhausted) => break,
            Err(fatal) => return Err(fatal),
        };
        // Equal credit: the realized global score attaches to every
        // module's instruction of this round.
        for m in 0..num_modules {
            histories[m].push((next[m], score));
            truncate_history(&mut histories[m], env.config.max_history);
        }
        last = next;
    }

    let space = instruction_space(&tables)?;
    Ok(RunParts {
        instructions: tables,
        demo_sets: vec![crate::bootstrap::DemoSet::empty(num_modules)],
        demo_store: Default::default(),
        search_space: space,
        summaries,
        importance: None,
    })
}

/// Renders the program-level meta-prompt: full multi-instruction
/// trajectories with their shared scores, ascending by score.
fn joint_meta_prompt(
    env: &Env<'_>,
    summaries: &Summaries,
    tables: &[Vec<InstructionCandidate>],
    history: &[(Vec<usize>, f64)],
) -> String {
    let mut out = String::from(
        "Use the information below to learn about a multi-stage task solved with calls to an LM, \
then propose a new instruction for every stage so the program scores higher.",
    );
    out.push_str("\n\n");
    if let Some(text) = &summaries.dataset {
        out.push_str(&format!("Dataset Description: {text}\n\n"));
    }
    if let Some(text) = &summaries.program {
        out.push_str(&format!("Program Description: {text}\n\n"));
    }
    let names: Vec<&str> = env.program.modules.iter().map(|m| m.name.as_str()).collect();
    out.push_str(&format!("Modules: {}\n\n", names.join(", ")));
    if !history.is_empty() {
        let mut ascending = history.to_vec();
        ascending.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite scores"));
        out.push_str("Previous Attempts:\n");
        for (choices, score) in &ascending {
            out.push_str(&format!("score {score:.4}:\n"));
            for (m, &choice) in choices.iter().enumerate() {
                out.push_str(&format!("Instruction {}: {}\n", m + 1, tables[m][choice].text));
            }
        }
        out.push('\n');
    }
    out.push_str("Basic Instructions:\n");
    for (m, table) in tables.iter().enumerate() {
        out.push_str(&format!("Instruction {}: {}\n", m + 1, table[0].text));
    }
    out.push_str("\nProposed Instructions:\nInstruction 1:");
    out
}

/// Splits one completion into `m` instructions via `Instruction i:`
/// markers. `None` unless every module got a nonempty instruction.
fn parse_joint_completion(raw: &str, num_modules: usize) -> Option<Vec<String>> {
    // Module m's text runs from starts[m] to the next marker's position.
    let mut starts = vec![0usize];
    let mut marker_positions = Vec::new();
    let mut cursor = 0usize;
    for m in 1..num_modules {
        let marker = format!("Instruction {}", m + 1);
        let (pos, end) = find_marker(raw, &marker, cursor)?;
        marker_positions.push(pos);
        starts.push(end);
        cursor = end;
    }
    let mut out = Vec::with_capacity(num_modules);
    for m in 0..num_modules {
        let end = marker_positions.get(m).copied().unwrap_or(raw.len());
        let text = raw[starts[m]..end].trim().to_string();
        if text.is_empty() {
            return None;
        }
        out.push(text);
    }
    Some(out)
}

/// Program-level OPRO: one proposer call emits all instructions per round.
pub(crate) fn run_program_level(env: &mut Env<'_>) -> Result<RunParts, StepError> {
    let num_modules = env.program.modules.len();
    let mut tables = seed_tables(env);
    let seed_assignment = assignment_for(env, &tables, &vec![0; num_modules]);
    let seed_score = env.eval_full(
        &seed_assignment,
        ParamVector::new(vec![0; num_modules]),
        None,
        None,
        false,
    )?;
    let summaries = grounding_summaries(env)?;

    let mut history: Vec<(Vec<usize>, f64)> = vec![(vec![0; num_modules], seed_score)];

    for _round in 1..=env.budget.max_trials {
        if env.exhausted {
            break;
        }
        let prompt = joint_meta_prompt(env, &summaries, &tables, &history);
        let request = LmRequest {
            model_id: env.proposer_lm.model_id().to_string(),
            prompt,
            temperature: env.config.proposer.proposer_temperature,
            top_p: 1.0,
            max_tokens: 512,
            stop_sequences: vec!["\n\n".to_string()],
            seed: rand::Rng::random(&mut env.rng_prop),
        };
        let raw = match env.proposer_lm.complete(&request) {
            Ok(raw) => raw,
            Err(LmError::BudgetExhausted) => {
                env.exhausted = true;
                break;
            }
            Err(_) => continue, // round discarded, counted against budget
        };
        let Some(instruction_texts) = parse_joint_completion(&raw, num_modules) else {
            continue; // round discarded, counted against budget
        };
        let choices: Vec<usize> = instruction_texts
            .into_iter()
            .enumerate()
            .map(|(m, text)| intern(&mut tables[m], m, text, env.next_trial_index()))
            .collect();
        let assignment = assignment_for(env, &tables, &choices);
        let score =
            match env.eval_full(&assignment, ParamVector::new(choices.clone()), None, None, false) {
                Ok(score) => score,
                Err(StepError::Exhausted) => break,
                Err(fatal) => return Err(fatal),
            };
        history.push((choices, score));
        // Keep the top-scoring trajectories in the meta-prompt.
        if history.len() > env.config.max_history {
            let mut ranked: Vec<usize> = (0..history.len()).collect();
            ranked.sort_by(|&a, &b| {
                history[b]
                    .1
                    .partial_cmp(&history[a].1)
                    .expect("finite scores")
                    .then(a.cmp(&b))
            });
            let keep: std::collections::BTreeSet<usize> =
                ranked.into_iter().take(env.config.max_history).collect();
            let mut index = 0;
            history.retain(|_| {
                let kept = keep.contains(&index);
                index += 1;
                kept
            });
        }
    }

    let space = instruction_space(&tables)?;
    Ok(RunParts {
        instructions: tables,
        demo_sets: vec![crate::bootstrap::DemoSet::empty(num_modules)],
        demo_store: Default::default(),
        search_space: space,
        summaries,
        importance: None,
    })
}

/// Coordinate-ascent OPRO: per pass, per module, propose N instructions,
/// evaluate each with everything else frozen, and adopt the best so far.
pub(crate) fn run_coordinate_ascent(env: &mut Env<'_>) -> Result<RunParts, StepError> {
    let num_modules = env.program.modules.len();
    let mut tables = seed_tables(env);
    let seed_assignment = assignment_for(env, &tables, &vec![0; num_modules]);
    let seed_score = env.eval_full(
        &seed_assignment,
        ParamVector::new(vec![0; num_modules]),
        None,
        None,
        false,
    )?;
    let summaries = grounding_summaries(env)?;

    let mut histories: Vec<Vec<(usize, f64)>> = (0..num_modules).map(|_| vec![(0, seed_score)]).collect();
    let mut current = vec![0usize; num_modules];
    let mut current_score = seed_score;

    'passes: for _pass in 0..env.config.ascent_passes.max(1) {
        for m in 0..num_modules {
            for _proposal in 0..env.config.proposals_per_step.max(1) {
                if env.next_trial_index() > env.budget.max_trials {
                    break 'passes;
                }
                let view = history_view(&tables[m], &histories[m]);
                let text = match propose_for_module(env, &summaries, m, view) {
                    Ok(Some(text)) => text,
                    Ok(None) => continue,
                    Err(StepError::Exhausted) => break 'passes,
                    Err(fatal) => return Err(fatal),
                };
                let idx = intern(&mut tables[m], m, text, env.next_trial_index());
                let mut choices = current.clone();
                choices[m] = idx;
                let assignment = assignment_for(env, &tables, &choices);
                let score = match env.eval_full(
                    &assignment,
                    ParamVector::new(choices.clone()),
                    None,
                    None,
                    false,
                ) {
                    Ok(score) => score,
                    Err(StepError::Exhausted) => break 'passes,
                    Err(fatal) => return Err(fatal),
                };
                histories[m].push((idx, score));
                truncate_history(&mut histories[m], env.config.max_history);
                if score > current_score {
                    current = choices;
                    current_score = score;
                }
            }
        }
    }

    let space = instruction_space(&tables)?;
    Ok(RunParts {
        instructions: tables,
        demo_sets: vec![crate::bootstrap::DemoSet::empty(num_modules)],
        demo_store: Default::default(),
        search_space: space,
        summaries,
        importance: None,
    })
}
