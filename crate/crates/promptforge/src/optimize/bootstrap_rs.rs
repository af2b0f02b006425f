//! Bootstrap random search: sample candidate demonstration sets from the
//! bootstrapped store and evaluate each one on the full train split.

use crate::bootstrap::{bootstrap_demos, sample_demo_sets, BootstrapConfig, BootstrapError, DemoStore};
use crate::proposal::{InstructionCandidate, Provenance, ProvenanceSource};
use crate::tpe::{ParamKind, ParamSpec, ParamVector, SearchSpace};

use super::{Env, RunParts, StepError, Summaries};

pub(crate) fn run(env: &mut Env<'_>) -> Result<RunParts, StepError> {
    let num_modules = env.program.modules.len();

    // Trial 0: the 0-shot seed, which doubles as candidate set 0.
    let seed_assignment = env.seed_assignment.clone();
    env.eval_full(&seed_assignment, ParamVector::new(vec![0]), None, None, false)?;

    let store = match env.preloaded_store.take() {
        Some(store) => store,
        None => {
            let cfg = BootstrapConfig {
                threshold: env.config.bootstrap_threshold,
                max_demos_per_module: env.config.max_demos_per_module,
                num_candidate_sets: env.config.demo_candidate_sets,
                max_source_examples: env
                    .config
                    .max_source_examples
                    .unwrap_or_else(|| env.split_size()),
                teacher_assignment: env.seed_assignment.clone(),
                rng_seed: crate::hash::derive_seed(env.seed, "bootstrap"),
            };
            match bootstrap_demos(env.program, env.dataset, env.metric, &cfg, &env.teacher_lm) {
                Ok(store) => store,
                // Nothing cleared the threshold: degenerate to the already
                // evaluated 0-shot seed.
                Err(BootstrapError::NoDemosFound) => DemoStore::default(),
                Err(e) => return Err(e.into()),
            }
        }
    };

    let sets = if store.is_empty() {
        vec![crate::bootstrap::DemoSet::empty(num_modules)]
    } else {
        sample_demo_sets(
            &store,
            num_modules,
            env.config.max_demos_per_module,
            env.config.demo_candidate_sets,
            &mut env.rng_sets,
        )
    };

    // Propose/Update: one full evaluation per candidate set, in order.
    for (set_index, set) in sets.iter().enumerate().skip(1) {
        if env.next_trial_index() > env.budget.max_trials {
            break;
        }
        let mut assignment = env.seed_assignment.clone();
        set.apply(env.program, &mut assignment);
        match env.eval_full(&assignment, ParamVector::new(vec![set_index]), None, None, false) {
            Ok(_) => {}
            Err(StepError::Exhausted) => break,
            Err(fatal) => return Err(fatal),
        }
    }

    let instructions: Vec<Vec<InstructionCandidate>> = (0..num_modules)
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
    let space = SearchSpace::new(vec![ParamSpec {
        name: "demo_set".to_string(),
        cardinality: sets.len(),
        kind: ParamKind::DemoSetChoice { module_index: 0 },
    }])
    .map_err(|e| StepError::Fatal(super::OptimizeError::Other(e.to_string())))?;

    Ok(RunParts {
        instructions,
        demo_sets: sets,
        demo_store: store,
        search_space: space,
        summaries: Summaries::default(),
        importance: None,
    })
}
