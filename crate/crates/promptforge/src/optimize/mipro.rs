//! Surrogate-driven optimizers: MIPRO (joint instructions + demonstrations
//! over minibatches with a TPE model), its instruction-only and demos-only
//! restrictions, and 0-shot MIPRO++, which searches the proposer
//! hyperparameters instead of the program parameters.

use std::collections::{BTreeMap, BTreeSet};

use crate::bootstrap::{bootstrap_demos, sample_demo_sets, BootstrapConfig, BootstrapError, DemoSet, DemoStore};
use crate::eval::TrialKind;
use crate::hash::derive_seed;
use crate::program::{Assignment, VariableId, VariableKind};
use crate::proposal::{
    propose_instructions, summarize_dataset, summarize_program, DemoViewChoice,
    GroundingContext, InstructionCandidate, ProposalHyperparameters, Provenance,
    ProvenanceSource, Tip, TipChoice,
};
use crate::tpe::{best_mean_vector, param_importance, ParamKind, ParamSpec, ParamVector, SearchSpace, TpeState, TpeError};

use super::{Env, OptimizeError, RunParts, StepError, Summaries};

/// The proposer-temperature grid searched by 0-shot MIPRO++.
pub const TEMPERATURE_GRID: [f64; 5] = [0.3, 0.5, 0.7, 0.9, 1.1];

/// How many cached-score replays one suggestion step may feed back to the
/// surrogate before accepting a repeat evaluation.
const MAX_REPLAY_SPINS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum MiproMode {
    /// Instructions and demo sets jointly (2m parameters).
    Joint,
    /// Instructions only; demo variables fixed to the empty set.
    ZeroShot,
    /// Bootstrapped demo sets only; instructions fixed to the seed.
    BayesianBootstrap,
}

/// What each position of the search-space vector binds in the program.
#[derive(Debug, Clone, Copy)]
enum ParamBinding {
    Instruction(usize),
    DemoSet(usize),
}

fn tpe_state(env: &Env<'_>, space: SearchSpace) -> TpeState {
    let mut state = TpeState::new(space, derive_seed(env.seed, "tpe-state"));
    state.gamma = env.config.tpe.gamma;
    state.n_startup = env.config.tpe.n_startup;
    state.n_ei_candidates = env.config.tpe.n_ei_candidates;
    state.prior_weight = env.config.tpe.prior_weight;
    state.weight_flat_window = env.config.tpe.weight_flat_window;
    state
}

fn bootstrap_store(env: &mut Env<'_>) -> Result<DemoStore, StepError> {
    if let Some(store) = env.preloaded_store.take() {
        return Ok(store);
    }
    let cfg = BootstrapConfig {
        threshold: env.config.bootstrap_threshold,
        max_demos_per_module: env.config.max_demos_per_module,
        num_candidate_sets: env.config.demo_candidate_sets,
        max_source_examples: env
            .config
            .max_source_examples
            .unwrap_or_else(|| env.split_size()),
        teacher_assignment: env.seed_assignment.clone(),
        rng_seed: derive_seed(env.seed, "bootstrap"),
    };
    match bootstrap_demos(env.program, env.dataset, env.metric, &cfg, &env.teacher_lm) {
        Ok(store) => Ok(store),
        Err(BootstrapError::NoDemosFound) => Ok(DemoStore::default()),
        Err(e) => Err(e.into()),
    }
}

fn mipro_summaries(env: &mut Env<'_>) -> Result<Summaries, StepError> {
    let mut summaries = Summaries::default();
    if env.config.proposer.use_dataset_summary {
        summaries.dataset = Some(summarize_dataset(env.dataset, &env.proposer_lm, 10)?);
    }
    if env.config.proposer.use_program_summary {
        summaries.program = Some(summarize_program(env.program, &env.proposer_lm)?);
    }
    Ok(summaries)
}

/// 0-shot view of the seed assignment (demo slots cleared).
fn seed_without_demos(env: &Env<'_>) -> Assignment {
    let mut assignment = env.seed_assignment.clone();
    assignment
        .bindings
        .retain(|var, _| !matches!(var.kind, VariableKind::Demo(_)));
    assignment
}

/// Binds a search-space vector to a concrete assignment.
fn assignment_for(
    env: &Env<'_>,
    bindings: &[ParamBinding],
    tables: &[Vec<InstructionCandidate>],
    sets: &[DemoSet],
    vector: &ParamVector,
) -> Assignment {
    let mut assignment = seed_without_demos(env);
    for (position, binding) in bindings.iter().enumerate() {
        let choice = vector.choices[position];
        match *binding {
            ParamBinding::Instruction(m) => {
                assignment.bind(VariableId::instruction(m), tables[m][choice].text.clone());
            }
            ParamBinding::DemoSet(m) => {
                let module = &env.program.modules[m];
                let slots = module.template.demo_slots();
                let demos = sets[choice]
                    .per_module
                    .get(m)
                    .map(Vec::as_slice)
                    .unwrap_or(&[]);
                let texts: Vec<String> = demos
                    .iter()
                    .take(slots)
                    .map(|d| module.format_demo_block(&d.inputs, &d.outputs))
                    .collect();
                assignment.bind_demo_texts(m, &texts);
            }
        }
    }
    assignment
}

pub(crate) fn run(env: &mut Env<'_>, mode: MiproMode) -> Result<RunParts, StepError> {
    let num_modules = env.program.modules.len();
    let dim = match mode {
        MiproMode::Joint => 2 * num_modules,
        MiproMode::ZeroShot | MiproMode::BayesianBootstrap => num_modules,
    };

    // Trial 0: the 0-shot seed program (candidate 0 everywhere).
    let seed_vector = ParamVector::new(vec![0; dim]);
    let seed_assignment = seed_without_demos(env);
    let seed_score = env.eval_full(&seed_assignment, seed_vector.clone(), None, None, false)?;

    // Initialize: bootstrap demo sets and propose the instruction tables
    // up front, then model the space with a uniform prior.
    let (store, sets) = if mode == MiproMode::ZeroShot {
        (DemoStore::default(), vec![DemoSet::empty(num_modules)])
    } else {
        let store = if env.config.max_demos_per_module == 0 {
            DemoStore::default()
        } else {
            bootstrap_store(env)?
        };
        let sets = if store.is_empty() {
            vec![DemoSet::empty(num_modules)]
        } else {
            sample_demo_sets(
                &store,
                num_modules,
                env.config.max_demos_per_module,
                env.config.demo_candidate_sets,
                &mut env.rng_sets,
            )
        };
        (store, sets)
    };
    let demo_views: Vec<String> = sets
        .iter()
        .map(|set| set.preview(env.program, env.config.max_demos_per_module.max(1)))
        .collect();

    let summaries = if mode == MiproMode::BayesianBootstrap {
        Summaries::default()
    } else {
        mipro_summaries(env)?
    };

    let mut tables: Vec<Vec<InstructionCandidate>> = Vec::with_capacity(num_modules);
    for m in 0..num_modules {
        if mode == MiproMode::BayesianBootstrap || env.config.instruction_candidates <= 1 {
            tables.push(vec![InstructionCandidate {
                module_index: m,
                text: env.seed_instruction(m),
                provenance: Provenance {
                    source: ProvenanceSource::Seed,
                    hparams: None,
                },
            }]);
            continue;
        }
        let ctx = GroundingContext {
            dataset_description: summaries.dataset.clone(),
            program_code: summaries
                .program
                .is_some()
                .then(|| env.program.structure_json().to_string()),
            program_description: summaries.program.clone(),
            module_name: env.program.modules[m].name.clone(),
            task_demos: None,
            previous_instructions: None,
            basic_instruction: env.seed_instruction(m),
            tip: Tip::None,
        };
        let hparams = ProposalHyperparameters {
            seed_instruction: env.seed_instruction(m),
            ..env.config.proposer.clone()
        };
        let outcome = propose_instructions(
            m,
            env.config.instruction_candidates,
            &ctx,
            &hparams,
            &demo_views,
            &env.proposer_lm,
            &mut env.rng_prop,
        )?;
        let mut table = outcome.candidates;
        for candidate in &mut table[1..] {
            candidate.provenance.source = ProvenanceSource::Init;
        }
        tables.push(table);
    }

    let mut params = Vec::new();
    let mut bindings = Vec::new();
    if mode != MiproMode::BayesianBootstrap {
        for (m, table) in tables.iter().enumerate() {
            params.push(ParamSpec {
                name: format!("m{m}.instruction"),
                cardinality: table.len(),
                kind: ParamKind::InstructionChoice { module_index: m },
            });
            bindings.push(ParamBinding::Instruction(m));
        }
    }
    if mode != MiproMode::ZeroShot {
        for m in 0..num_modules {
            params.push(ParamSpec {
                name: format!("m{m}.demos"),
                cardinality: sets.len(),
                kind: ParamKind::DemoSetChoice { module_index: m },
            });
            bindings.push(ParamBinding::DemoSet(m));
        }
    }
    // Bayesian bootstrap keeps instruction variables pinned to the seed, so
    // its space is the m demo parameters; zero-shot keeps the m instruction
    // parameters. Either way, the vector layout matches `bindings`.
    let space = SearchSpace::new(params)
        .map_err(|e| StepError::Fatal(OptimizeError::Other(e.to_string())))?;
    let mut tpe = tpe_state(env, space.clone());
    let mut full_scores: BTreeMap<ParamVector, f64> = BTreeMap::new();
    full_scores.insert(seed_vector.clone(), seed_score);
    tpe.observe(seed_vector, seed_score)
        .map_err(|e| StepError::Fatal(OptimizeError::Other(e.to_string())))?;

    let deterministic_full = env.budget.minibatch_size >= env.split_size();

    for k in 1..=env.budget.max_trials {
        if env.exhausted {
            break;
        }
        let mut suggestion = tpe.suggest(&mut env.rng_tpe);
        if deterministic_full {
            // Replay known deterministic scores to the surrogate instead of
            // paying for repeat evaluations. Once the space is exhausted
            // there is nothing novel left to chase.
            let total = tpe.space.total_vectors();
            let mut spins = 0;
            while full_scores.len() < total && spins < MAX_REPLAY_SPINS {
                let Some(&known) = full_scores.get(&suggestion) else { break };
                if tpe.observe(suggestion.clone(), known).is_err() {
                    break;
                }
                spins += 1;
                suggestion = tpe.suggest(&mut env.rng_tpe);
            }
        }
        let assignment = assignment_for(env, &bindings, &tables, &sets, &suggestion);
        let score = if deterministic_full {
            match env.eval_full(&assignment, suggestion.clone(), None, None, false) {
                Ok(score) => {
                    full_scores.insert(suggestion.clone(), score);
                    score
                }
                Err(StepError::Exhausted) => break,
                Err(fatal) => return Err(fatal),
            }
        } else {
            match env.eval_minibatch(&assignment, suggestion.clone(), None, false) {
                Ok((score, _)) => score,
                Err(StepError::Exhausted) => break,
                Err(fatal) => return Err(fatal),
            }
        };
        let _ = tpe.observe(suggestion, score);

        // Every S trials the best-mean vector gets a full evaluation. A
        // vector needs two minibatch samples to be promoted mid-run, which
        // keeps one lucky batch from wasting a full evaluation.
        if !deterministic_full && k % env.budget.full_eval_interval.max(1) == 0 {
            match promote_best_mean(env, &bindings, &tables, &sets, &mut full_scores, 2) {
                Ok(()) => {}
                Err(StepError::Exhausted) => break,
                Err(fatal) => return Err(fatal),
            }
        }
    }

    // Final extraction triggers one last full evaluation of the current
    // best-mean vector.
    if !deterministic_full && !env.exhausted {
        match promote_best_mean(env, &bindings, &tables, &sets, &mut full_scores, 1) {
            Ok(()) | Err(StepError::Exhausted) => {}
            Err(fatal) => return Err(fatal),
        }
    }

    Ok(RunParts {
        instructions: tables,
        demo_sets: sets,
        demo_store: store,
        search_space: space,
        summaries,
        importance: None,
    })
}

/// Fully evaluates the vector with the best minibatch mean, unless that
/// vector already has a full score.
fn promote_best_mean(
    env: &mut Env<'_>,
    bindings: &[ParamBinding],
    tables: &[Vec<InstructionCandidate>],
    sets: &[DemoSet],
    full_scores: &mut BTreeMap<ParamVector, f64>,
    min_count: usize,
) -> Result<(), StepError> {
    let best = match best_mean_vector(&env.trial_log, min_count) {
        Ok(vector) => vector,
        Err(TpeError::NoEligibleVector) => return Ok(()), // skip checkpoint
        Err(e) => return Err(StepError::Fatal(OptimizeError::Other(e.to_string()))),
    };
    if full_scores.contains_key(&best) {
        return Ok(());
    }
    let source_trial = env
        .trial_log
        .iter()
        .find(|t| t.kind == TrialKind::Minibatch && t.param_vector == best)
        .map(|t| t.trial_index);
    let assignment = assignment_for(env, bindings, tables, sets, &best);
    let score = env.eval_full(&assignment, best.clone(), source_trial, None, false)?;
    full_scores.insert(best, score);
    Ok(())
}

/// 0-shot MIPRO++: the surrogate searches the proposer hyperparameters;
/// each trial proposes one fresh instruction set under the suggested
/// configuration and scores the resulting 0-shot program on a minibatch.
pub(crate) fn run_meta(env: &mut Env<'_>) -> Result<RunParts, StepError> {
    let num_modules = env.program.modules.len();

    let store = if env.config.max_demos_per_module == 0 {
        DemoStore::default()
    } else {
        bootstrap_store(env)?
    };
    let sets = if store.is_empty() {
        vec![DemoSet::empty(num_modules)]
    } else {
        sample_demo_sets(
            &store,
            num_modules,
            env.config.max_demos_per_module,
            env.config.demo_candidate_sets,
            &mut env.rng_sets,
        )
    };
    let demo_views: Vec<String> = sets
        .iter()
        .map(|set| set.preview(env.program, env.config.max_demos_per_module.max(1)))
        .collect();

    let params = vec![
        ParamSpec {
            name: "proposer.use_dataset_summary".into(),
            cardinality: 2,
            kind: ParamKind::ProposerHparam,
        },
        ParamSpec {
            name: "proposer.use_program_summary".into(),
            cardinality: 2,
            kind: ParamKind::ProposerHparam,
        },
        ParamSpec {
            name: "proposer.temperature".into(),
            cardinality: TEMPERATURE_GRID.len(),
            kind: ParamKind::ProposerHparam,
        },
        ParamSpec {
            name: "proposer.tip".into(),
            cardinality: Tip::ALL.len(),
            kind: ParamKind::ProposerHparam,
        },
        ParamSpec {
            name: "proposer.demo_view".into(),
            cardinality: sets.len(),
            kind: ParamKind::ProposerHparam,
        },
    ];
    let space = SearchSpace::new(params)
        .map_err(|e| StepError::Fatal(OptimizeError::Other(e.to_string())))?;

    // Trial 0: the seed program itself.
    let seed_vector = ParamVector::new(vec![0; space.len()]);
    let seed_assignment = seed_without_demos(env);
    let seed_score = env.eval_full(&seed_assignment, seed_vector, None, None, false)?;

    // Both summaries are computed once; each trial's hyperparameters decide
    // whether they enter the meta-prompt.
    let dataset_summary = summarize_dataset(env.dataset, &env.proposer_lm, 10)?;
    let program_summary = summarize_program(env.program, &env.proposer_lm)?;
    let summaries = Summaries {
        dataset: Some(dataset_summary.clone()),
        program: Some(program_summary.clone()),
    };

    let mut tables: Vec<Vec<InstructionCandidate>> = (0..num_modules)
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
        .collect();

    let mut tpe = tpe_state(env, space.clone());
    let mut assignments_by_trial: BTreeMap<usize, Assignment> = BTreeMap::new();
    let mut promoted_sources: BTreeSet<usize> = BTreeSet::new();

    for k in 1..=env.budget.max_trials {
        if env.exhausted {
            break;
        }
        let suggestion = tpe.suggest(&mut env.rng_tpe);
        let hparams = ProposalHyperparameters {
            use_dataset_summary: suggestion.choices[0] == 1,
            use_program_summary: suggestion.choices[1] == 1,
            proposer_temperature: TEMPERATURE_GRID[suggestion.choices[2]],
            tip: TipChoice::Fixed(Tip::ALL[suggestion.choices[3]]),
            demo_view: DemoViewChoice::Fixed(suggestion.choices[4]),
            max_history: 0,
            seed_instruction: String::new(),
        };

        let mut assignment = seed_without_demos(env);
        let mut proposed_any = false;
        let mut degraded = false;
        #[allow(clippy::needless_range_loop)]
        for m in 0..num_modules {
            let ctx = GroundingContext {
                dataset_description: (hparams.use_dataset_summary
                    && !dataset_summary.is_empty())
                .then(|| dataset_summary.clone()),
                program_code: hparams
                    .use_program_summary
                    .then(|| env.program.structure_json().to_string()),
                program_description: hparams
                    .use_program_summary
                    .then(|| program_summary.clone()),
                module_name: env.program.modules[m].name.clone(),
                task_demos: None,
                previous_instructions: None,
                basic_instruction: env.seed_instruction(m),
                tip: Tip::None,
            };
            let per_module = ProposalHyperparameters {
                seed_instruction: env.seed_instruction(m),
                ..hparams.clone()
            };
            let outcome = propose_instructions(
                m,
                2,
                &ctx,
                &per_module,
                &demo_views,
                &env.proposer_lm,
                &mut env.rng_prop,
            )?;
            match outcome.candidates.into_iter().nth(1) {
                Some(mut candidate) => {
                    candidate.provenance.source = ProvenanceSource::Trial(env.next_trial_index());
                    let text = candidate.text.clone();
                    if !tables[m].iter().any(|c| c.text == text) {
                        tables[m].push(candidate);
                    }
                    assignment.bind(VariableId::instruction(m), text);
                    proposed_any = true;
                }
                None => degraded = true,
            }
        }

        if !proposed_any {
            // Complete proposer failure: score the trial as the seed
            // program's cached score and mark it degraded.
            let index = env.next_trial_index();
            let mut record = crate::eval::TrialRecord::new(
                index,
                suggestion.clone(),
                Vec::new(),
                seed_score,
                TrialKind::Minibatch,
            );
            record.proposer_hparams = Some(hparams);
            record.degraded = true;
            env.trial_log.push(record);
            assignments_by_trial.insert(index, assignment);
            let _ = tpe.observe(suggestion, seed_score);
            continue;
        }

        let (score, index) =
            match env.eval_minibatch(&assignment, suggestion.clone(), Some(hparams), degraded) {
                Ok(result) => result,
                Err(StepError::Exhausted) => break,
                Err(fatal) => return Err(fatal),
            };
        assignments_by_trial.insert(index, assignment);
        let _ = tpe.observe(suggestion, score);

        if k % env.budget.full_eval_interval.max(1) == 0 {
            match promote_meta(env, &assignments_by_trial, &mut promoted_sources) {
                Ok(()) => {}
                Err(StepError::Exhausted) => break,
                Err(fatal) => return Err(fatal),
            }
        }
    }

    if !env.exhausted {
        match promote_meta(env, &assignments_by_trial, &mut promoted_sources) {
            Ok(()) | Err(StepError::Exhausted) => {}
            Err(fatal) => return Err(fatal),
        }
    }

    // Importance over the hyperparameter trials only.
    let meta_trials: Vec<crate::eval::TrialRecord> = env
        .trial_log
        .iter()
        .filter(|t| t.proposer_hparams.is_some())
        .cloned()
        .collect();
    let importance = param_importance(&space, &meta_trials);

    Ok(RunParts {
        instructions: tables,
        demo_sets: sets,
        demo_store: store,
        search_space: space,
        summaries,
        importance: Some(importance),
    })
}

/// Fully evaluates the best assignment observed under the best-mean
/// hyperparameter vector.
fn promote_meta(
    env: &mut Env<'_>,
    assignments_by_trial: &BTreeMap<usize, Assignment>,
    promoted_sources: &mut BTreeSet<usize>,
) -> Result<(), StepError> {
    let best_theta = match best_mean_vector(&env.trial_log, 1) {
        Ok(vector) => vector,
        Err(TpeError::NoEligibleVector) => return Ok(()),
        Err(e) => return Err(StepError::Fatal(OptimizeError::Other(e.to_string()))),
    };
    let best_trial = env
        .trial_log
        .iter()
        .filter(|t| t.kind == TrialKind::Minibatch && t.param_vector == best_theta)
        .fold(None::<(usize, f64)>, |best, t| match best {
            None => Some((t.trial_index, t.score)),
            Some((_, s)) if t.score > s => Some((t.trial_index, t.score)),
            Some(best) => Some(best),
        });
    let Some((source, _)) = best_trial else {
        return Ok(());
    };
    if !promoted_sources.insert(source) {
        return Ok(()); // this assignment already has a full evaluation
    }
    let Some(assignment) = assignments_by_trial.get(&source).cloned() else {
        return Ok(());
    };
    let hparams = env.trial_log[source].proposer_hparams.clone();
    env.eval_full(&assignment, best_theta, Some(source), hparams, false)?;
    Ok(())
}
