//! The optimizer family: bootstrap random search, the OPRO variants, and
//! the MIPRO family, all behind one Initialize / Propose / Update / Extract
//! driver contract.
//!
//! Every optimizer evaluates the seed assignment on the full train split
//! first, so the unoptimized program is always in the log and the reported
//! best can never fall below it. Only fully evaluated assignments are
//! eligible for extraction; ties go to the earliest trial.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{BootstrapError, DemoSet, DemoStore};
use crate::eval::{evaluate, Dataset, EvalError, Metric, TrialKind, TrialRecord};
use crate::hash::derive_seed;
use crate::lm::{BudgetedLm, CallCounter, LmBackend};
use crate::program::{Assignment, Program, VariableId};
use crate::proposal::{InstructionCandidate, ProposalHyperparameters};
use crate::tpe::{ParamVector, SearchSpace};

mod bootstrap_rs;
mod mipro;
mod opro;

/// Trial and call budgets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Budget {
    /// Optimization iterations (proposals) after the seed evaluation.
    pub max_trials: usize,
    /// Minibatch size B; at least the split size means full evaluations.
    pub minibatch_size: usize,
    /// Full-evaluation checkpoint interval S for minibatching optimizers.
    pub full_eval_interval: usize,
    /// Hard ceiling on LM calls across task, proposer, and teacher models.
    #[serde(default)]
    pub max_lm_calls: Option<usize>,
}

impl Budget {
    pub fn new(max_trials: usize) -> Self {
        Budget {
            max_trials,
            minibatch_size: 25,
            full_eval_interval: 10,
            max_lm_calls: None,
        }
    }

    /// Converts a budget of `full_eval_equivalents` full evaluations into a
    /// number of minibatch trials, accounting for the seed evaluation, one
    /// checkpoint full evaluation every `interval` trials, and the final
    /// extraction evaluation: the largest `n` with
    /// `(2 + n/interval) * split_size + n * batch <= F * split_size`.
    pub fn minibatch_trials_for_full_equivalents(
        full_eval_equivalents: usize,
        split_size: usize,
        minibatch_size: usize,
        interval: usize,
    ) -> usize {
        let budget = full_eval_equivalents.saturating_mul(split_size);
        let cost = |n: usize| -> usize {
            (2 + n / interval.max(1))
                .saturating_mul(split_size)
                .saturating_add(n.saturating_mul(minibatch_size.max(1)))
        };
        if cost(0) > budget {
            return 0;
        }
        let mut n = 0usize;
        while cost(n + 1) <= budget {
            n += 1;
        }
        n
    }
}

/// Which optimizer to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    BootstrapRs,
    ModuleOpro,
    ProgramOpro,
    CaOpro,
    Mipro,
    ZeroShotMipro,
    BayesianBootstrap,
    ZeroShotMiproPp,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 8] = [
        OptimizerKind::BootstrapRs,
        OptimizerKind::ModuleOpro,
        OptimizerKind::ProgramOpro,
        OptimizerKind::CaOpro,
        OptimizerKind::Mipro,
        OptimizerKind::ZeroShotMipro,
        OptimizerKind::BayesianBootstrap,
        OptimizerKind::ZeroShotMiproPp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::BootstrapRs => "bootstrap_rs",
            OptimizerKind::ModuleOpro => "module_opro",
            OptimizerKind::ProgramOpro => "program_opro",
            OptimizerKind::CaOpro => "ca_opro",
            OptimizerKind::Mipro => "mipro",
            OptimizerKind::ZeroShotMipro => "zero_shot_mipro",
            OptimizerKind::BayesianBootstrap => "bayesian_bootstrap",
            OptimizerKind::ZeroShotMiproPp => "zero_shot_mipro_pp",
        }
    }
}

/// Surrogate hyperparameters, all exposed in configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TpeSettings {
    pub gamma: f64,
    pub n_startup: usize,
    pub n_ei_candidates: usize,
    pub prior_weight: f64,
    pub weight_flat_window: usize,
}

impl Default for TpeSettings {
    fn default() -> Self {
        TpeSettings {
            gamma: 0.25,
            n_startup: 10,
            n_ei_candidates: 24,
            prior_weight: 1.0,
            weight_flat_window: 25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// Instruction candidates per module (T), seed included.
    pub instruction_candidates: usize,
    /// Candidate demonstration sets (N_sets), the empty set included.
    pub demo_candidate_sets: usize,
    /// Demonstration slots per module used when bootstrapping (K).
    pub max_demos_per_module: usize,
    /// Acceptance threshold for bootstrapped traces.
    pub bootstrap_threshold: f64,
    /// Teacher-run budget; `None` means the whole train split.
    pub max_source_examples: Option<usize>,
    /// Proposer defaults (temperature, grounding flags, tip mode).
    pub proposer: ProposalHyperparameters,
    /// Scored instructions kept in OPRO meta-prompt histories.
    pub max_history: usize,
    /// Coordinate-ascent passes D (CA-OPRO).
    pub ascent_passes: usize,
    /// Proposals per module per step N (CA-OPRO).
    pub proposals_per_step: usize,
    pub tpe: TpeSettings,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Mipro,
            instruction_candidates: 10,
            demo_candidate_sets: 10,
            max_demos_per_module: 4,
            bootstrap_threshold: 1.0,
            max_source_examples: None,
            proposer: ProposalHyperparameters::default(),
            max_history: 10,
            ascent_passes: 2,
            proposals_per_step: 4,
            tpe: TpeSettings::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn for_kind(kind: OptimizerKind) -> Self {
        OptimizerConfig {
            kind,
            ..OptimizerConfig::default()
        }
    }
}

/// Dataset and program summaries computed during initialization.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Summaries {
    pub dataset: Option<String>,
    pub program: Option<String>,
}

/// Everything an optimizer run produces.
#[derive(Debug, Clone)]
pub struct OptimizerRun {
    pub best_assignment: Assignment,
    pub best_score_full: f64,
    pub best_trial_index: usize,
    pub trial_log: Vec<TrialRecord>,
    /// Instruction candidates per module (index 0 is the seed).
    pub instructions: Vec<Vec<InstructionCandidate>>,
    /// Candidate demonstration sets (index 0 is empty).
    pub demo_sets: Vec<DemoSet>,
    pub demo_store: DemoStore,
    pub search_space: SearchSpace,
    pub summaries: Summaries,
    pub seed: u64,
    /// True when the LM call ceiling stopped the run early.
    pub budget_exhausted: bool,
    /// Proposer-hyperparameter importance (0-shot MIPRO++ only).
    pub importance: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, thiserror::Error)]
pub enum OptimizeError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("bootstrap failed: {0}")]
    Bootstrap(String),
    #[error("proposal failed: {0}")]
    Proposal(String),
    #[error("no full evaluation completed before the budget ran out")]
    NoFullEvaluation,
    #[error("optimizer error: {0}")]
    Other(String),
}

/// Internal control flow: an exhausted call budget unwinds the optimizer
/// loop but still yields the best-so-far result.
pub(crate) enum StepError {
    Exhausted,
    Fatal(OptimizeError),
}

impl From<EvalError> for StepError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::BudgetExhausted => StepError::Exhausted,
            other => StepError::Fatal(OptimizeError::Eval(other)),
        }
    }
}

impl From<BootstrapError> for StepError {
    fn from(e: BootstrapError) -> Self {
        match e {
            BootstrapError::BudgetExhausted => StepError::Exhausted,
            other => StepError::Fatal(OptimizeError::Bootstrap(other.to_string())),
        }
    }
}

impl From<crate::proposal::ProposalError> for StepError {
    fn from(e: crate::proposal::ProposalError) -> Self {
        match e {
            crate::proposal::ProposalError::Lm(crate::lm::LmError::BudgetExhausted) => {
                StepError::Exhausted
            }
            other => StepError::Fatal(OptimizeError::Proposal(other.to_string())),
        }
    }
}

/// One optimization request.
pub struct OptimizeRequest<'a> {
    pub program: &'a Program,
    pub seed_assignment: &'a Assignment,
    pub metric: &'a Metric,
    pub dataset: &'a Dataset,
    pub split: &'a str,
    pub config: &'a OptimizerConfig,
    pub budget: &'a Budget,
    pub task_lm: &'a dyn LmBackend,
    pub proposer_lm: &'a dyn LmBackend,
    pub teacher_lm: &'a dyn LmBackend,
    pub seed: u64,
    pub parallelism: usize,
    /// Reuse a previously bootstrapped store instead of re-running the
    /// teacher.
    pub demo_store: Option<DemoStore>,
}

/// Shared run state threaded through every optimizer.
pub(crate) struct Env<'a> {
    pub program: &'a Program,
    pub seed_assignment: Assignment,
    pub metric: &'a Metric,
    pub dataset: &'a Dataset,
    pub split: &'a str,
    pub config: &'a OptimizerConfig,
    pub budget: &'a Budget,
    pub task_lm: &'a dyn LmBackend,
    pub proposer_lm: &'a dyn LmBackend,
    pub teacher_lm: &'a dyn LmBackend,
    pub seed: u64,
    pub parallelism: usize,
    pub rng_batch: ChaCha8Rng,
    pub rng_sets: ChaCha8Rng,
    pub rng_prop: ChaCha8Rng,
    pub rng_tpe: ChaCha8Rng,
    pub trial_log: Vec<TrialRecord>,
    /// Assignment behind every full-evaluation record.
    pub full_assignments: BTreeMap<usize, Assignment>,
    pub exhausted: bool,
    pub preloaded_store: Option<DemoStore>,
}

impl<'a> Env<'a> {
    fn new(req: &'a OptimizeRequest<'a>, task_lm: &'a dyn LmBackend, proposer_lm: &'a dyn LmBackend, teacher_lm: &'a dyn LmBackend) -> Self {
        Env {
            program: req.program,
            seed_assignment: req.seed_assignment.clone(),
            metric: req.metric,
            dataset: req.dataset,
            split: req.split,
            config: req.config,
            budget: req.budget,
            task_lm,
            proposer_lm,
            teacher_lm,
            seed: req.seed,
            parallelism: req.parallelism,
            rng_batch: ChaCha8Rng::seed_from_u64(derive_seed(req.seed, "minibatch")),
            rng_sets: ChaCha8Rng::seed_from_u64(derive_seed(req.seed, "demo-sets")),
            rng_prop: ChaCha8Rng::seed_from_u64(derive_seed(req.seed, "proposal")),
            rng_tpe: ChaCha8Rng::seed_from_u64(derive_seed(req.seed, "tpe")),
            trial_log: Vec::new(),
            full_assignments: BTreeMap::new(),
            exhausted: false,
            preloaded_store: req.demo_store.clone(),
        }
    }

    pub fn split_size(&self) -> usize {
        self.dataset
            .split(self.split)
            .map(<[usize]>::len)
            .unwrap_or(0)
    }

    pub fn next_trial_index(&self) -> usize {
        self.trial_log.len()
    }

    /// Full evaluation on the whole split, logged as a `Full` record.
    pub fn eval_full(
        &mut self,
        assignment: &Assignment,
        vector: ParamVector,
        source_trial: Option<usize>,
        hparams: Option<ProposalHyperparameters>,
        degraded: bool,
    ) -> Result<f64, StepError> {
        let examples = self.dataset.split_examples(self.split).map_err(StepError::from)?;
        let eval_seed = derive_seed(self.seed, &format!("eval-trial{}", self.next_trial_index()));
        let outcome = match evaluate(
            self.program,
            assignment,
            &examples,
            self.metric,
            &self.task_lm,
            self.parallelism,
            eval_seed,
        ) {
            Ok(outcome) => outcome,
            Err(e) => {
                if matches!(e, EvalError::BudgetExhausted) {
                    self.exhausted = true;
                }
                return Err(e.into());
            }
        };
        let index = self.next_trial_index();
        let mut record = TrialRecord::new(index, vector, Vec::new(), outcome.score, TrialKind::Full);
        record.source_trial = source_trial;
        record.proposer_hparams = hparams;
        record.degraded = degraded;
        self.trial_log.push(record);
        self.full_assignments.insert(index, assignment.clone());
        Ok(outcome.score)
    }

    /// Minibatch evaluation; a batch that covers the whole split is logged
    /// as a full evaluation instead (the kinds are defined by coverage).
    pub fn eval_minibatch(
        &mut self,
        assignment: &Assignment,
        vector: ParamVector,
        hparams: Option<ProposalHyperparameters>,
        degraded: bool,
    ) -> Result<(f64, usize), StepError> {
        let batch_size = self.budget.minibatch_size.min(self.split_size());
        if batch_size >= self.split_size() {
            let index = self.next_trial_index();
            let score = self.eval_full(assignment, vector, None, hparams, degraded)?;
            return Ok((score, index));
        }
        let batch = {
            let rng = &mut self.rng_batch;
            crate::eval::sample_minibatch(self.dataset, self.split, batch_size, rng)
                .map_err(StepError::from)?
        };
        let ids: Vec<String> = batch.iter().map(|e| e.id.clone()).collect();
        let eval_seed = derive_seed(self.seed, &format!("eval-trial{}", self.next_trial_index()));
        let outcome = match evaluate(
            self.program,
            assignment,
            &batch,
            self.metric,
            &self.task_lm,
            self.parallelism,
            eval_seed,
        ) {
            Ok(outcome) => outcome,
            Err(e) => {
                if matches!(e, EvalError::BudgetExhausted) {
                    self.exhausted = true;
                }
                return Err(e.into());
            }
        };
        let index = self.next_trial_index();
        let mut record = TrialRecord::new(
            index,
            vector,
            ids,
            outcome.score,
            TrialKind::Minibatch,
        );
        record.proposer_hparams = hparams;
        record.degraded = degraded;
        self.trial_log.push(record);
        Ok((outcome.score, index))
    }

    /// Instruction text bound to a module in the seed assignment.
    pub fn seed_instruction(&self, module_index: usize) -> String {
        self.seed_assignment
            .get(VariableId::instruction(module_index))
            .unwrap_or("")
            .to_string()
    }
}

/// What each optimizer hands back besides the shared log.
pub(crate) struct RunParts {
    pub instructions: Vec<Vec<InstructionCandidate>>,
    pub demo_sets: Vec<DemoSet>,
    pub demo_store: DemoStore,
    pub search_space: SearchSpace,
    pub summaries: Summaries,
    pub importance: Option<BTreeMap<String, f64>>,
}

/// Runs an optimizer end to end.
///
/// On budget exhaustion the best result so far is returned with
/// `budget_exhausted` set; the error case is reserved for failures before
/// any full evaluation completed.
pub fn optimize(req: &OptimizeRequest<'_>) -> Result<OptimizerRun, OptimizeError> {
    let counter = CallCounter::new();
    let ceiling = req.budget.max_lm_calls;
    let (task_g, proposer_g, teacher_g);
    let (task_lm, proposer_lm, teacher_lm): (&dyn LmBackend, &dyn LmBackend, &dyn LmBackend) =
        if let Some(ceiling) = ceiling {
            task_g = BudgetedLm::new(req.task_lm, counter.clone(), ceiling);
            proposer_g = BudgetedLm::new(req.proposer_lm, counter.clone(), ceiling);
            teacher_g = BudgetedLm::new(req.teacher_lm, counter.clone(), ceiling);
            (&task_g, &proposer_g, &teacher_g)
        } else {
            (req.task_lm, req.proposer_lm, req.teacher_lm)
        };

    let mut env = Env::new(req, task_lm, proposer_lm, teacher_lm);
    let outcome = match req.config.kind {
        OptimizerKind::BootstrapRs => bootstrap_rs::run(&mut env),
        OptimizerKind::ModuleOpro => opro::run_module_level(&mut env),
        OptimizerKind::ProgramOpro => opro::run_program_level(&mut env),
        OptimizerKind::CaOpro => opro::run_coordinate_ascent(&mut env),
        OptimizerKind::Mipro => mipro::run(&mut env, mipro::MiproMode::Joint),
        OptimizerKind::ZeroShotMipro => mipro::run(&mut env, mipro::MiproMode::ZeroShot),
        OptimizerKind::BayesianBootstrap => mipro::run(&mut env, mipro::MiproMode::BayesianBootstrap),
        OptimizerKind::ZeroShotMiproPp => mipro::run_meta(&mut env),
    };
    let parts = match outcome {
        Ok(parts) => parts,
        Err(StepError::Fatal(e)) => return Err(e),
        Err(StepError::Exhausted) => {
            env.exhausted = true;
            // Partial result: extraction below works off whatever the log
            // holds. Candidate tables may be incomplete.
            RunParts {
                instructions: Vec::new(),
                demo_sets: Vec::new(),
                demo_store: DemoStore::default(),
                search_space: SearchSpace { params: Vec::new() },
                summaries: Summaries::default(),
                importance: None,
            }
        }
    };

    let (best_trial_index, best_score_full) = extract_best(&env.trial_log)?;
    let best_assignment = env
        .full_assignments
        .get(&best_trial_index)
        .cloned()
        .ok_or(OptimizeError::NoFullEvaluation)?;
    Ok(OptimizerRun {
        best_assignment,
        best_score_full,
        best_trial_index,
        trial_log: env.trial_log,
        instructions: parts.instructions,
        demo_sets: parts.demo_sets,
        demo_store: parts.demo_store,
        search_space: parts.search_space,
        summaries: parts.summaries,
        seed: req.seed,
        budget_exhausted: env.exhausted,
        importance: parts.importance,
    })
}

/// The highest-scoring full evaluation; ties go to the earliest trial.
pub fn extract_best(trial_log: &[TrialRecord]) -> Result<(usize, f64), OptimizeError> {
    trial_log
        .iter()
        .filter(|t| t.kind == TrialKind::Full)
        .fold(None::<(usize, f64)>, |best, t| match best {
            None => Some((t.trial_index, t.score)),
            Some((_, score)) if t.score > score => Some((t.trial_index, t.score)),
            Some(best) => Some(best),
        })
        .ok_or(OptimizeError::NoFullEvaluation)
}
