//! LM programs: modules with variable-bearing prompt templates, executed
//! against a text-in/text-out backend with per-call tracing.
//!
//! A [`Program`] is an ordered list of [`ModuleSpec`]s plus a control-flow
//! callback that decides how modules are invoked (a module may run more than
//! once per input, e.g. two query hops). The optimization variables are the
//! instruction slot and the demonstration slots of each module's template;
//! an [`Assignment`] binds them to strings.
//!
//! Prompts are plain-text completion prompts: `field: value` lines with the
//! final output field rendered as a bare `field:` cue. Instructions come
//! first, demonstration blocks second, and the live input last.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bootstrap::Demonstration;
use crate::hash::derive_seed;
use crate::lm::{LmBackend, LmError, LmRequest};

/// A flat string-to-string record: module inputs, module outputs, example
/// metadata. `BTreeMap` keeps every serialization deterministic.
pub type Record = BTreeMap<String, String>;

/// Builds a [`Record`] from `(key, value)` pairs.
pub fn record<K: Into<String>, V: Into<String>>(pairs: impl IntoIterator<Item = (K, V)>) -> Record {
    pairs
        .into_iter()
        .map(|(k, v)| (k.into(), v.into()))
        .collect()
}

/// Which prompt variable of a module a [`VariableId`] names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VariableKind {
    /// The free-form instruction slot.
    Instruction,
    /// Demonstration slot `k` (slots must be filled as a prefix `0..j`).
    Demo(usize),
}

/// Identifies one optimization variable: a (module, slot) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VariableId {
    pub module_index: usize,
    pub kind: VariableKind,
}

impl VariableId {
    pub fn instruction(module_index: usize) -> Self {
        VariableId {
            module_index,
            kind: VariableKind::Instruction,
        }
    }

    pub fn demo(module_index: usize, slot: usize) -> Self {
        VariableId {
            module_index,
            kind: VariableKind::Demo(slot),
        }
    }
}

impl fmt::Display for VariableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            VariableKind::Instruction => write!(f, "m{}.instruction", self.module_index),
            VariableKind::Demo(k) => write!(f, "m{}.demo{}", self.module_index, k),
        }
    }
}

impl FromStr for VariableId {
    type Err = ProgramError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ProgramError::BadVariableId(s.to_string());
        let rest = s.strip_prefix('m').ok_or_else(bad)?;
        let (idx, kind) = rest.split_once('.').ok_or_else(bad)?;
        let module_index: usize = idx.parse().map_err(|_| bad())?;
        let kind = if kind == "instruction" {
            VariableKind::Instruction
        } else if let Some(k) = kind.strip_prefix("demo") {
            VariableKind::Demo(k.parse().map_err(|_| bad())?)
        } else {
            return Err(bad());
        };
        Ok(VariableId { module_index, kind })
    }
}

impl Serialize for VariableId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for VariableId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One piece of a prompt template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    /// Verbatim text.
    Literal(String),
    /// An optimization variable (instruction or demonstration slot).
    Slot(VariableId),
    /// A live input field, rendered as `name: value` on its own line.
    InputField(String),
    /// An output field cue, rendered as `name:` with no value.
    OutputField(String),
}

/// An ordered list of segments. Each variable may appear at most once and at
/// least one output field must exist (the completion target).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn new(segments: Vec<Segment>) -> Result<Self, ProgramError> {
        let template = PromptTemplate { segments };
        template.validate()?;
        Ok(template)
    }

    /// The standard completion layout: instruction, `demo_slots`
    /// demonstration blocks, live input fields, then the cue for the first
    /// output field.
    pub fn standard(
        module_index: usize,
        demo_slots: usize,
        input_fields: &[String],
        first_output: &str,
    ) -> Self {
        let mut segments = vec![
            Segment::Slot(VariableId::instruction(module_index)),
            Segment::Literal("\n\n".to_string()),
        ];
        for k in 0..demo_slots {
            segments.push(Segment::Slot(VariableId::demo(module_index, k)));
        }
        for field in input_fields {
            segments.push(Segment::InputField(field.clone()));
        }
        segments.push(Segment::OutputField(first_output.to_string()));
        PromptTemplate { segments }
    }

    pub fn validate(&self) -> Result<(), ProgramError> {
        let mut seen = Vec::new();
        let mut has_output = false;
        for segment in &self.segments {
            match segment {
                Segment::Slot(var) => {
                    if seen.contains(var) {
                        return Err(ProgramError::DuplicateVariable(*var));
                    }
                    seen.push(*var);
                }
                Segment::OutputField(_) => has_output = true,
                _ => {}
            }
        }
        if !has_output {
            return Err(ProgramError::NoOutputField);
        }
        Ok(())
    }

    /// Variables referenced by this template.
    pub fn variables(&self) -> impl Iterator<Item = VariableId> + '_ {
        self.segments.iter().filter_map(|segment| match segment {
            Segment::Slot(var) => Some(*var),
            _ => None,
        })
    }

    /// Number of demonstration slots.
    pub fn demo_slots(&self) -> usize {
        self.variables()
            .filter(|v| matches!(v.kind, VariableKind::Demo(_)))
            .count()
    }
}

/// Generation parameters for a module's LM calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub max_tokens: u32,
    pub stop_sequences: Vec<String>,
    pub temperature: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            max_tokens: 150,
            stop_sequences: vec![
                "\n\n".to_string(),
                "\n---".to_string(),
                "assistant".to_string(),
            ],
            temperature: 0.0,
        }
    }
}

/// One prompt-templated LM stage with declared input and output fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub name: String,
    pub template: PromptTemplate,
    pub input_fields: Vec<String>,
    /// `(name, description)` pairs, in completion order.
    pub output_fields: Vec<(String, String)>,
    pub gen_params: GenParams,
}

impl ModuleSpec {
    /// A module with the standard template layout.
    pub fn standard(
        name: &str,
        module_index: usize,
        demo_slots: usize,
        input_fields: &[&str],
        output_fields: &[(&str, &str)],
        gen_params: GenParams,
    ) -> Self {
        let inputs: Vec<String> = input_fields.iter().map(|s| s.to_string()).collect();
        let outputs: Vec<(String, String)> = output_fields
            .iter()
            .map(|(n, d)| (n.to_string(), d.to_string()))
            .collect();
        let first_output = outputs.first().map(|(n, _)| n.clone()).unwrap_or_default();
        ModuleSpec {
            name: name.to_string(),
            template: PromptTemplate::standard(module_index, demo_slots, &inputs, &first_output),
            input_fields: inputs,
            output_fields: outputs,
            gen_params,
        }
    }

    pub fn validate(&self) -> Result<(), ProgramError> {
        if self.input_fields.is_empty() || self.output_fields.is_empty() {
            return Err(ProgramError::EmptyFields(self.name.clone()));
        }
        for (name, _) in &self.output_fields {
            if self.input_fields.contains(name) {
                return Err(ProgramError::FieldOverlap {
                    module: self.name.clone(),
                    field: name.clone(),
                });
            }
        }
        for name in self
            .input_fields
            .iter()
            .chain(self.output_fields.iter().map(|(n, _)| n))
        {
            if name.is_empty() || !name.is_ascii() || name.contains(':') || name.contains('\n') {
                return Err(ProgramError::BadFieldName(name.clone()));
            }
        }
        if self.gen_params.max_tokens == 0 || self.gen_params.temperature < 0.0 {
            return Err(ProgramError::BadGenParams(self.name.clone()));
        }
        self.template.validate()
    }

    /// Output field names in declared order.
    pub fn output_names(&self) -> Vec<&str> {
        self.output_fields.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Formats one demonstration as a `field: value` block, input fields
    /// first, then output fields, no trailing newline.
    pub fn format_demo_block(&self, inputs: &Record, outputs: &Record) -> String {
        let mut lines = Vec::new();
        for field in &self.input_fields {
            let value = inputs.get(field).map(String::as_str).unwrap_or("");
            lines.push(format!("{field}: {value}"));
        }
        for (field, _) in &self.output_fields {
            let value = outputs.get(field).map(String::as_str).unwrap_or("");
            lines.push(format!("{field}: {value}"));
        }
        lines.join("\n")
    }

    /// Renders this module's prompt.
    ///
    /// Instruction slots must be bound in `assignment`. Demonstration slot
    /// `k` renders from `demos[k]` when given, otherwise from the assignment
    /// binding, otherwise as nothing (0-shot degenerates gracefully).
    pub fn render_prompt(
        &self,
        assignment: &Assignment,
        demos: &[Demonstration],
        inputs: &Record,
    ) -> Result<String, ProgramError> {
        let mut out = String::new();
        for segment in &self.template.segments {
            match segment {
                Segment::Literal(text) => out.push_str(text),
                Segment::Slot(var) => match var.kind {
                    VariableKind::Instruction => {
                        let text = assignment
                            .get(*var)
                            .ok_or(ProgramError::UnboundInstruction(*var))?;
                        out.push_str(text);
                    }
                    VariableKind::Demo(k) => {
                        let block = if let Some(demo) = demos.get(k) {
                            self.format_demo_block(&demo.inputs, &demo.outputs)
                        } else {
                            assignment.get(*var).unwrap_or("").to_string()
                        };
                        if !block.trim().is_empty() {
                            out.push_str(&block);
                            out.push_str("\n\n");
                        }
                    }
                },
                Segment::InputField(name) => {
                    let value = inputs
                        .get(name)
                        .ok_or_else(|| ProgramError::MissingInputField(name.clone()))?;
                    out.push_str(name);
                    out.push_str(": ");
                    out.push_str(value);
                    out.push('\n');
                }
                Segment::OutputField(name) => {
                    out.push_str(name);
                    out.push(':');
                }
            }
        }
        Ok(out)
    }

    /// Extracts the declared output fields from a raw completion by scanning
    /// for `field:` markers at line starts, in declared order. Text before
    /// the first marker belongs to the first field (completion style).
    pub fn parse_output(&self, raw: &str) -> Result<Record, ParseError> {
        let names = self.output_names();
        // (content_start, marker_pos) per field; the first field may have no
        // marker, in which case its content starts at 0.
        let mut spans: Vec<(usize, Option<usize>)> = Vec::with_capacity(names.len());
        let mut cursor = 0usize;
        for (i, name) in names.iter().enumerate() {
            match find_marker(raw, name, cursor) {
                Some((pos, end)) => {
                    spans.push((end, Some(pos)));
                    cursor = end;
                }
                None if i == 0 => spans.push((0, None)),
                None => {
                    return Err(ParseError {
                        module: self.name.clone(),
                        field: name.to_string(),
                    })
                }
            }
        }
        let mut out = Record::new();
        for (i, name) in names.iter().enumerate() {
            let start = spans[i].0;
            let end = spans
                .get(i + 1)
                .and_then(|(_, pos)| *pos)
                .unwrap_or(raw.len());
            let value = raw[start..end].trim();
            if value.is_empty() && spans[i].1.is_none() {
                return Err(ParseError {
                    module: self.name.clone(),
                    field: name.to_string(),
                });
            }
            out.insert(name.to_string(), value.to_string());
        }
        Ok(out)
    }
}

/// Finds `field:` (ASCII case-insensitive) at a line start at or after
/// `from`. Returns the marker position and the index just past the colon.
pub(crate) fn find_marker(text: &str, field: &str, from: usize) -> Option<(usize, usize)> {
    let bytes = text.as_bytes();
    let field_bytes = field.as_bytes();
    let mut pos = from;
    while pos + field_bytes.len() < bytes.len() + 1 {
        let at_line_start = pos == 0 || bytes[pos - 1] == b'\n';
        if at_line_start
            && bytes[pos..pos + field_bytes.len()].eq_ignore_ascii_case(field_bytes)
            && bytes.get(pos + field_bytes.len()) == Some(&b':')
        {
            return Some((pos, pos + field_bytes.len() + 1));
        }
        pos += bytes[pos..].iter().position(|&b| b == b'\n')? + 1;
    }
    None
}

/// A partial or total binding of prompt variables to strings.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Assignment {
    pub bindings: BTreeMap<VariableId, String>,
}

impl Assignment {
    pub fn new() -> Self {
        Assignment::default()
    }

    pub fn bind(&mut self, var: VariableId, text: impl Into<String>) {
        self.bindings.insert(var, text.into());
    }

    pub fn with(mut self, var: VariableId, text: impl Into<String>) -> Self {
        self.bind(var, text);
        self
    }

    pub fn get(&self, var: VariableId) -> Option<&str> {
        self.bindings.get(&var).map(String::as_str)
    }

    /// Binds a module's demonstration slots `0..texts.len()` to
    /// pre-formatted demo blocks, clearing any previously bound slots above.
    pub fn bind_demo_texts(&mut self, module_index: usize, texts: &[String]) {
        self.bindings.retain(|var, _| {
            !(var.module_index == module_index && matches!(var.kind, VariableKind::Demo(_)))
        });
        for (k, text) in texts.iter().enumerate() {
            self.bind(VariableId::demo(module_index, k), text.clone());
        }
    }

    /// Keys must be a subset of the program's variable set.
    pub fn validate(&self, program: &Program) -> Result<(), ProgramError> {
        for var in self.bindings.keys() {
            if !program.variables().contains(var) {
                return Err(ProgramError::UnknownVariable(*var));
            }
        }
        Ok(())
    }

    /// Total iff every instruction variable is bound and each module's bound
    /// demo slots form a prefix `0..j`.
    pub fn is_total(&self, program: &Program) -> bool {
        for (index, module) in program.modules.iter().enumerate() {
            if self.get(VariableId::instruction(index)).is_none() {
                return false;
            }
            let slots = module.template.demo_slots();
            let mut seen_unbound = false;
            for k in 0..slots {
                let bound = self.get(VariableId::demo(index, k)).is_some();
                if bound && seen_unbound {
                    return false;
                }
                seen_unbound |= !bound;
            }
        }
        true
    }
}

/// One recorded LM call.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceCall {
    pub module_index: usize,
    pub invocation_ordinal: usize,
    pub rendered_prompt: String,
    pub inputs: Record,
    pub raw_completion: String,
    pub parsed_outputs: Record,
    pub parse_failed: bool,
}

/// Every LM call of one program run, in execution order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Trace {
    pub calls: Vec<TraceCall>,
}

/// Result of running a program on one input.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub prediction: Record,
    pub trace: Trace,
    /// True when any call failed to parse; metrics score such runs 0.
    pub failed: bool,
}

/// Per-run invocation context handed to a program's control flow.
pub struct ModuleCalls<'a> {
    program: &'a Program,
    assignment: &'a Assignment,
    lm: &'a dyn LmBackend,
    rng_seed: u64,
    calls: Vec<TraceCall>,
    per_module: Vec<usize>,
    any_parse_failed: bool,
}

impl ModuleCalls<'_> {
    /// Renders module `module_index` with `inputs`, calls the LM, and parses
    /// the completion. Parse failures are recorded (missing fields become
    /// empty strings) rather than aborting the run.
    pub fn invoke(&mut self, module_index: usize, inputs: &Record) -> Result<Record, RunError> {
        let module = self
            .program
            .modules
            .get(module_index)
            .ok_or(RunError::NoSuchModule(module_index))?;
        let prompt = module.render_prompt(self.assignment, &[], inputs)?;
        let call_index = self.calls.len();
        let request = LmRequest {
            model_id: self.lm.model_id().to_string(),
            prompt: prompt.clone(),
            temperature: module.gen_params.temperature,
            top_p: 1.0,
            max_tokens: module.gen_params.max_tokens,
            stop_sequences: module.gen_params.stop_sequences.clone(),
            seed: derive_seed(self.rng_seed, &format!("call{call_index}")),
        };
        let raw = self.lm.complete(&request)?;
        let (parsed, parse_failed) = match module.parse_output(&raw) {
            Ok(rec) => (rec, false),
            Err(_) => {
                let empty: Record = module
                    .output_names()
                    .iter()
                    .map(|n| (n.to_string(), String::new()))
                    .collect();
                (empty, true)
            }
        };
        self.any_parse_failed |= parse_failed;
        let ordinal = self.per_module[module_index];
        self.per_module[module_index] += 1;
        self.calls.push(TraceCall {
            module_index,
            invocation_ordinal: ordinal,
            rendered_prompt: prompt,
            inputs: inputs.clone(),
            raw_completion: raw,
            parsed_outputs: parsed.clone(),
            parse_failed,
        });
        Ok(parsed)
    }
}

type ControlFlow =
    dyn Fn(&mut ModuleCalls<'_>, &Record) -> Result<Record, RunError> + Send + Sync;

/// An LM program: modules plus host-code control flow.
#[derive(Clone)]
pub struct Program {
    pub modules: Vec<ModuleSpec>,
    control_flow: Arc<ControlFlow>,
}

impl fmt::Debug for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Program")
            .field("modules", &self.modules)
            .finish_non_exhaustive()
    }
}

impl Program {
    pub fn new<F>(modules: Vec<ModuleSpec>, control_flow: F) -> Result<Self, ProgramError>
    where
        F: Fn(&mut ModuleCalls<'_>, &Record) -> Result<Record, RunError> + Send + Sync + 'static,
    {
        if modules.is_empty() {
            return Err(ProgramError::NoModules);
        }
        for (index, module) in modules.iter().enumerate() {
            module.validate()?;
            for var in module.template.variables() {
                if var.module_index != index {
                    return Err(ProgramError::ForeignVariable {
                        module: index,
                        var,
                    });
                }
            }
        }
        Ok(Program {
            modules,
            control_flow: Arc::new(control_flow),
        })
    }

    /// A one-module program whose prediction is the module's output record.
    pub fn single(module: ModuleSpec) -> Result<Self, ProgramError> {
        Program::new(vec![module], |calls, input| calls.invoke(0, input))
    }

    /// All optimization variables, in (module, kind) order.
    pub fn variables(&self) -> Vec<VariableId> {
        self.modules
            .iter()
            .flat_map(|m| m.template.variables())
            .collect()
    }

    /// Demonstration slot count per module.
    pub fn demo_slots(&self) -> Vec<usize> {
        self.modules
            .iter()
            .map(|m| m.template.demo_slots())
            .collect()
    }

    /// Structure (names, fields, templates) as a JSON document, for logging
    /// and for the program summarizer. The control flow is host code and is
    /// not serialized.
    pub fn structure_json(&self) -> serde_json::Value {
        serde_json::json!({
            "modules": self.modules,
        })
    }
}

/// Runs `program` under `assignment` on one input.
///
/// LM errors abort the run; parse failures are recorded in the trace and
/// mark the outcome failed (metrics then score it 0).
pub fn run_program(
    program: &Program,
    assignment: &Assignment,
    input: &Record,
    lm: &dyn LmBackend,
    rng_seed: u64,
) -> Result<RunOutcome, RunError> {
    assignment.validate(program)?;
    let mut calls = ModuleCalls {
        program,
        assignment,
        lm,
        rng_seed,
        calls: Vec::new(),
        per_module: vec![0; program.modules.len()],
        any_parse_failed: false,
    };
    let prediction = (program.control_flow)(&mut calls, input)?;
    Ok(RunOutcome {
        prediction,
        trace: Trace { calls: calls.calls },
        failed: calls.any_parse_failed,
    })
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum ProgramError {
    #[error("program has no modules")]
    NoModules,
    #[error("module {module} template references variable {var} of another module")]
    ForeignVariable { module: usize, var: VariableId },
    #[error("variable {0} appears more than once in a template")]
    DuplicateVariable(VariableId),
    #[error("template has no output field")]
    NoOutputField,
    #[error("module {0} needs nonempty input and output fields")]
    EmptyFields(String),
    #[error("module {module}: field {field} is both input and output")]
    FieldOverlap { module: String, field: String },
    #[error("bad field name {0:?}")]
    BadFieldName(String),
    #[error("module {0}: max_tokens must be > 0 and temperature >= 0")]
    BadGenParams(String),
    #[error("instruction variable {0} is unbound")]
    UnboundInstruction(VariableId),
    #[error("input field {0} missing from inputs")]
    MissingInputField(String),
    #[error("assignment binds unknown variable {0}")]
    UnknownVariable(VariableId),
    #[error("cannot parse variable id {0:?}")]
    BadVariableId(String),
}

/// A completion did not contain a required output field.
#[derive(Debug, Clone, thiserror::Error)]
#[error("module {module}: output field {field} missing from completion")]
pub struct ParseError {
    pub module: String,
    pub field: String,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error("no module with index {0}")]
    NoSuchModule(usize),
    #[error("control flow failed: {0}")]
    ControlFlow(String),
}
