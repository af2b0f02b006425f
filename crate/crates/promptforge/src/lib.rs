//! Joint optimization of the free-form instructions and few-shot
//! demonstrations of multi-module LM programs against a task-level metric.
//!
//! The crate provides the program representation and execution engine, LM
//! backends (scripted, HTTP, cached), evaluation with minibatch scoring, a
//! demonstration bootstrapper, a grounded instruction proposer, a
//! categorical Tree-structured Parzen Estimator surrogate, the optimizer
//! family built from those pieces, and a synthetic benchmark harness with
//! planted optima so optimizer behavior is verifiable without model access.
//!
//! ```
//! use promptforge::lm::ScriptedLm;
//! use promptforge::program::{record, Assignment, GenParams, ModuleSpec, Program, VariableId};
//!
//! let module = ModuleSpec::standard(
//!     "answer_question",
//!     0,
//!     0,
//!     &["question"],
//!     &[("answer", "the answer")],
//!     GenParams::default(),
//! );
//! let program = Program::single(module)?;
//! let assignment = Assignment::new().with(VariableId::instruction(0), "Answer the question.");
//! let lm = ScriptedLm::new([("2+2", "answer: 4")], "answer: unsure");
//! let outcome = promptforge::program::run_program(
//!     &program,
//!     &assignment,
//!     &record([("question", "what is 2+2?")]),
//!     &lm,
//!     0,
//! )?;
//! assert_eq!(outcome.prediction.get("answer").unwrap(), "4");
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod book;
pub mod bootstrap;
pub mod eval;
pub mod harness;
pub mod hash;
pub mod lm;
pub mod optimize;
pub mod program;
pub mod proposal;
pub mod report;
pub mod synth;
pub mod tpe;

pub use bootstrap::{bootstrap_demos, sample_demo_sets, BootstrapConfig, DemoSet, DemoStore, Demonstration};
pub use eval::{
    evaluate, sample_minibatch, wilcoxon_signed_rank, Dataset, EvalOutcome, Example, Metric,
    TrialKind, TrialRecord,
};
pub use lm::{with_cache, LmBackend, LmError, LmRequest, ScriptedLm};
pub use program::{run_program, Assignment, ModuleSpec, Program, Record, VariableId};
pub use proposal::{
    build_instruction_meta_prompt, propose_instructions, summarize_dataset, summarize_program,
    GroundingContext, InstructionCandidate, ProposalHyperparameters, Tip,
};
pub use tpe::{best_mean_vector, param_importance, ParamKind, ParamSpec, ParamVector, SearchSpace, TpeState};
