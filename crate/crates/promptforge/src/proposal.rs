//! Grounded instruction proposal: dataset and program summaries, tips,
//! meta-prompt construction, and candidate generation with a proposer LM.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::eval::Dataset;
use crate::hash::derive_seed;
use crate::lm::{LmBackend, LmError, LmRequest};
use crate::program::Program;

const META_HEADER: &str = "Use the information below to learn about a task that we are trying \
to solve using calls to an LM, then generate a new instruction that will be used to prompt a \
Language Model to better solve the task.";

const DATASET_OBSERVER_PROMPT: &str = "Given several examples from a dataset please write \
observations about trends that hold for most or all of the samples. I will also provide you \
with a few observations I have already made. Please add your own observations or if you feel \
the observations are comprehensive say 'COMPLETE'. Some areas you may consider in your \
observations: topics, content, syntax, conciseness, etc. It will be useful to make an educated \
guess as to the nature of the task this dataset will enable. Don't be afraid to be creative";

const DATASET_SUMMARIZER_PROMPT: &str = "Given a series of observations I have made about my \
dataset, please summarize them into a brief 2-3 sentence summary which highlights only the \
most important details.";

const PROGRAM_SUMMARIZER_PROMPT: &str = "Below is some pseudo-code for a pipeline that solves \
tasks with calls to language models. Please describe what type of task this program appears to \
be designed to solve, and how it appears to work.";

/// The observer loop stops once the proposer has answered COMPLETE this
/// many times.
const COMPLETE_LIMIT: usize = 5;
/// Cost bound on the dataset summarizer.
const MAX_OBSERVATION_BATCHES: usize = 25;

/// Prompt-engineering tips rotated into meta-prompts to diversify
/// proposals. The texts are fixed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tip {
    #[default]
    None,
    Creative,
    Simple,
    Description,
    HighStakes,
    Persona,
}

impl Tip {
    pub const ALL: [Tip; 6] = [
        Tip::None,
        Tip::Creative,
        Tip::Simple,
        Tip::Description,
        Tip::HighStakes,
        Tip::Persona,
    ];

    pub fn text(self) -> &'static str {
        match self {
            Tip::None => "",
            Tip::Creative => "Don't be afraid to be creative!",
            Tip::Simple => "Keep the instruction clear and concise.",
            Tip::Description => "Make sure your instruction is very informative and descriptive.",
            Tip::HighStakes => {
                "The instruction should include a high stakes scenario in which the LM must solve the task!"
            }
            Tip::Persona => {
                "Provide the LM with a persona that is relevant to the task (ie. \"You are a ...\")"
            }
        }
    }
}

/// Tip selection mode for candidate generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TipChoice {
    Fixed(Tip),
    /// Draw a fresh tip per candidate (MIPRO initialization).
    RandomPerCandidate,
}

/// Demo-view selection mode: which candidate demo set the proposer sees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoViewChoice {
    Fixed(usize),
    RandomPerCandidate,
}

/// Proposer hyperparameters (the searchable knobs of instruction proposal
/// plus the per-module seed instruction).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalHyperparameters {
    pub use_dataset_summary: bool,
    pub use_program_summary: bool,
    pub proposer_temperature: f64,
    pub tip: TipChoice,
    pub demo_view: DemoViewChoice,
    pub max_history: usize,
    pub seed_instruction: String,
}

impl Default for ProposalHyperparameters {
    fn default() -> Self {
        ProposalHyperparameters {
            use_dataset_summary: true,
            use_program_summary: true,
            proposer_temperature: 0.7,
            tip: TipChoice::RandomPerCandidate,
            demo_view: DemoViewChoice::RandomPerCandidate,
            max_history: 10,
            seed_instruction: String::new(),
        }
    }
}

/// Everything the meta-prompt may ground a proposal in.
#[derive(Debug, Clone, Default)]
pub struct GroundingContext {
    pub dataset_description: Option<String>,
    pub program_code: Option<String>,
    pub program_description: Option<String>,
    pub module_name: String,
    pub task_demos: Option<String>,
    /// `(instruction, score)` history, rendered in ascending score order.
    pub previous_instructions: Option<Vec<(String, f64)>>,
    pub basic_instruction: String,
    pub tip: Tip,
}

/// One proposed instruction and where it came from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstructionCandidate {
    pub module_index: usize,
    pub text: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub source: ProvenanceSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hparams: Option<ProposalHyperparameters>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProvenanceSource {
    /// The verbatim seed instruction.
    Seed,
    /// Proposed during optimizer initialization.
    Init,
    /// Proposed at the given trial.
    Trial(usize),
}

#[derive(Debug, thiserror::Error)]
pub enum ProposalError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error("proposal setup failed: {0}")]
    Setup(String),
}

fn proposer_request(model_id: &str, prompt: String, temperature: f64, seed: u64) -> LmRequest {
    LmRequest {
        model_id: model_id.to_string(),
        prompt,
        temperature,
        top_p: 1.0,
        max_tokens: 512,
        stop_sequences: vec!["\n\n".to_string()],
        seed,
    }
}

/// Renders the instruction meta-prompt. Optional grounding fields are
/// omitted entirely when disabled; history renders worst-first so the best
/// instructions sit nearest the cue.
pub fn build_instruction_meta_prompt(ctx: &GroundingContext) -> String {
    let mut out = String::from(META_HEADER);
    out.push_str("\n\n");
    if let Some(text) = &ctx.dataset_description {
        out.push_str(&format!("Dataset Description: {text}\n\n"));
    }
    if let Some(text) = &ctx.program_code {
        out.push_str(&format!("Program Code: {text}\n\n"));
    }
    if let Some(text) = &ctx.program_description {
        out.push_str(&format!("Program Description: {text}\n\n"));
    }
    out.push_str(&format!("Module: {}\n\n", ctx.module_name));
    if let Some(text) = &ctx.task_demos {
        if !text.trim().is_empty() {
            out.push_str(&format!("Task Demos: {text}\n\n"));
        }
    }
    if let Some(history) = &ctx.previous_instructions {
        if !history.is_empty() {
            let mut ascending = history.clone();
            ascending.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite scores"));
            out.push_str("Previous Instructions:\n");
            for (i, (instruction, score)) in ascending.iter().enumerate() {
                out.push_str(&format!("[{}] score {score:.4}: {instruction}\n", i + 1));
            }
            out.push('\n');
        }
    }
    out.push_str(&format!("Basic Instruction: {}\n\n", ctx.basic_instruction));
    if ctx.tip != Tip::None {
        out.push_str(&format!("Tip: {}\n\n", ctx.tip.text()));
    }
    out.push_str("Proposed Instruction:");
    out
}

/// Strips a leading `proposed instruction:` echo and trims.
fn clean_proposal(raw: &str) -> String {
    let trimmed = raw.trim();
    let lower = trimmed.to_ascii_lowercase();
    let stripped = if lower.starts_with("proposed instruction:") {
        &trimmed["proposed instruction:".len()..]
    } else {
        trimmed
    };
    stripped.trim().to_string()
}

/// Outcome of candidate generation for one module.
#[derive(Debug, Clone)]
pub struct ProposalOutcome {
    pub candidates: Vec<InstructionCandidate>,
    /// True when proposer failures left fewer than the requested count.
    pub degraded: bool,
}

/// Generates up to `count` instruction candidates for one module.
///
/// Candidate 0 is always the verbatim seed instruction, so the unoptimized
/// program stays inside the search space. Duplicate completions are retried
/// once and then kept; proposer failures shrink the candidate list and set
/// the degraded flag instead of aborting.
pub fn propose_instructions<R: Rng>(
    module_index: usize,
    count: usize,
    ctx_base: &GroundingContext,
    hparams: &ProposalHyperparameters,
    demo_views: &[String],
    proposer: &dyn LmBackend,
    rng: &mut R,
) -> Result<ProposalOutcome, ProposalError> {
    let mut candidates = vec![InstructionCandidate {
        module_index,
        text: hparams.seed_instruction.clone(),
        provenance: Provenance {
            source: ProvenanceSource::Seed,
            hparams: None,
        },
    }];
    let mut degraded = false;
    for _ in 1..count.max(1) {
        let mut attempt_text: Option<String> = None;
        for _retry in 0..2 {
            let tip = match hparams.tip {
                TipChoice::Fixed(tip) => tip,
                TipChoice::RandomPerCandidate => Tip::ALL[rng.random_range(0..Tip::ALL.len())],
            };
            let view = match hparams.demo_view {
                DemoViewChoice::Fixed(i) => demo_views.get(i).cloned(),
                DemoViewChoice::RandomPerCandidate if !demo_views.is_empty() => {
                    Some(demo_views[rng.random_range(0..demo_views.len())].clone())
                }
                DemoViewChoice::RandomPerCandidate => None,
            };
            let mut ctx = ctx_base.clone();
            ctx.tip = tip;
            if let Some(view) = view {
                if !view.trim().is_empty() {
                    ctx.task_demos = Some(view);
                }
            }
            let prompt = build_instruction_meta_prompt(&ctx);
            let request = proposer_request(
                proposer.model_id(),
                prompt,
                hparams.proposer_temperature,
                rng.random(),
            );
            match proposer.complete(&request) {
                Ok(raw) => {
                    let text = clean_proposal(&raw);
                    if text.is_empty() {
                        degraded = true;
                        break;
                    }
                    let duplicate = candidates.iter().any(|c| c.text == text);
                    attempt_text = Some(text);
                    if !duplicate {
                        break;
                    }
                    // duplicate: retry once, then keep whatever came back
                }
                Err(LmError::BudgetExhausted) => return Err(LmError::BudgetExhausted.into()),
                Err(_) => {
                    degraded = true;
                    break;
                }
            }
        }
        if let Some(text) = attempt_text {
            candidates.push(InstructionCandidate {
                module_index,
                text,
                provenance: Provenance {
                    source: ProvenanceSource::Init,
                    hparams: Some(hparams.clone()),
                },
            });
        }
    }
    Ok(ProposalOutcome {
        candidates,
        degraded,
    })
}

/// Iterates train examples in batches, accumulating observations, then
/// summarizes them into a short dataset description. Returns an empty
/// string (summary disabled) when no observations accumulate.
pub fn summarize_dataset(
    dataset: &Dataset,
    proposer: &dyn LmBackend,
    batch_size: usize,
) -> Result<String, ProposalError> {
    let examples = dataset
        .split_examples("train")
        .map_err(|e| ProposalError::Setup(e.to_string()))?;
    let batch_size = batch_size.max(1);
    let mut observations = String::new();
    let mut completes = 0usize;
    for (batch_index, batch) in examples.chunks(batch_size).enumerate() {
        if batch_index >= MAX_OBSERVATION_BATCHES || completes >= COMPLETE_LIMIT {
            break;
        }
        let mut prompt = String::from(DATASET_OBSERVER_PROMPT);
        prompt.push_str("\n\nExamples:\n");
        for example in batch {
            prompt.push_str(&format!(
                "- inputs {} | metadata {}\n",
                serde_json::to_string(&example.inputs).expect("record serializes"),
                serde_json::to_string(&example.metadata).expect("record serializes"),
            ));
        }
        prompt.push_str(&format!(
            "\nPrior Observations: {}\n\nObservations:",
            if observations.is_empty() {
                "none"
            } else {
                observations.as_str()
            }
        ));
        let request = LmRequest {
            model_id: proposer.model_id().to_string(),
            prompt,
            temperature: 0.7,
            top_p: 1.0,
            max_tokens: 600,
            stop_sequences: vec![],
            seed: derive_seed(0, &format!("dataset-observation-{batch_index}")),
        };
        let response = proposer.complete(&request)?;
        if response.contains("COMPLETE") {
            completes += 1;
            continue;
        }
        let trimmed = response.trim();
        if !trimmed.is_empty() {
            if !observations.is_empty() {
                observations.push(' ');
            }
            observations.push_str(trimmed);
        }
    }
    if observations.trim().is_empty() {
        return Ok(String::new());
    }
    let request = LmRequest {
        model_id: proposer.model_id().to_string(),
        prompt: format!(
            "{DATASET_SUMMARIZER_PROMPT}\n\nObservations: {observations}\n\nSummary:"
        ),
        temperature: 0.7,
        top_p: 1.0,
        max_tokens: 300,
        stop_sequences: vec![],
        seed: derive_seed(0, "dataset-summary"),
    };
    Ok(proposer.complete(&request)?.trim().to_string())
}

/// Serializes the program structure and asks the proposer what the program
/// does and how it works.
pub fn summarize_program(
    program: &Program,
    proposer: &dyn LmBackend,
) -> Result<String, ProposalError> {
    let code = serde_json::to_string_pretty(&program.structure_json()).expect("program serializes");
    let request = LmRequest {
        model_id: proposer.model_id().to_string(),
        prompt: format!("{PROGRAM_SUMMARIZER_PROMPT}\n\nProgram:\n{code}\n\nDescription:"),
        temperature: 0.7,
        top_p: 1.0,
        max_tokens: 300,
        stop_sequences: vec![],
        seed: derive_seed(0, "program-summary"),
    };
    Ok(proposer.complete(&request)?.trim().to_string())
}
