//! Run-directory reports: per-trial CSV with the running best, the
//! instruction progression at improvement events, and the importance table
//! when present. Emits data only; plotting stays external.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::eval::{TrialKind, TrialRecord};
use crate::proposal::{InstructionCandidate, ProvenanceSource};
use crate::tpe::{ParamKind, SearchSpace};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("missing log: {0}")]
    MissingLog(PathBuf),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed run artifact: {0}")]
    Malformed(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// One row of trials.csv.
#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub trial_index: usize,
    pub kind: String,
    pub score: f64,
    /// Best full-evaluation score seen so far; non-decreasing.
    pub running_best_full: f64,
    pub params: String,
}

/// One entry of progression.json: the instructions in effect when the
/// running best improved.
#[derive(Debug, Clone, Serialize)]
pub struct ProgressionEntry {
    pub trial_index: usize,
    pub score: f64,
    pub instructions: BTreeMap<String, String>,
}

pub struct RunReport {
    pub rows: Vec<ReportRow>,
    pub progression: Vec<ProgressionEntry>,
    pub importance: Option<BTreeMap<String, f64>>,
}

fn read_to_string(path: &Path) -> Result<String, ReportError> {
    fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Renders a param vector as `name=choice` pairs using the search space.
fn param_summary(space: &SearchSpace, record: &TrialRecord) -> String {
    space
        .params
        .iter()
        .zip(&record.param_vector.choices)
        .map(|(spec, &choice)| format!("{}={choice}", spec.name))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Instruction texts in effect for one full-evaluation record.
fn instructions_for(
    record: &TrialRecord,
    space: &SearchSpace,
    tables: &[Vec<InstructionCandidate>],
    module_names: &[String],
) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    // Default: the seed instruction of every module.
    for (m, name) in module_names.iter().enumerate() {
        if let Some(seed) = tables.get(m).and_then(|t| t.first()) {
            out.insert(name.clone(), seed.text.clone());
        }
    }
    // Instruction-choice parameters name the candidate directly.
    for (spec, &choice) in space.params.iter().zip(&record.param_vector.choices) {
        if let ParamKind::InstructionChoice { module_index } = spec.kind {
            if let (Some(name), Some(candidate)) = (
                module_names.get(module_index),
                tables.get(module_index).and_then(|t| t.get(choice)),
            ) {
                out.insert(name.clone(), candidate.text.clone());
            }
        }
    }
    // Promoted evaluations (hyperparameter search): the candidates proposed
    // at the source trial are the ones that were evaluated.
    if let Some(source) = record.source_trial {
        for (m, table) in tables.iter().enumerate() {
            if let Some(candidate) = table
                .iter()
                .find(|c| c.provenance.source == ProvenanceSource::Trial(source))
            {
                if let Some(name) = module_names.get(m) {
                    out.insert(name.clone(), candidate.text.clone());
                }
            }
        }
    }
    out
}

/// Builds the report from a run directory.
pub fn build_report(run_dir: &Path) -> Result<RunReport, ReportError> {
    let trials_path = run_dir.join("trials.jsonl");
    if !trials_path.exists() {
        return Err(ReportError::MissingLog(trials_path));
    }
    let mut trials = Vec::new();
    for line in read_to_string(&trials_path)?.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let record: TrialRecord =
            serde_json::from_str(line).map_err(|e| ReportError::Malformed(e.to_string()))?;
        trials.push(record);
    }

    let config: serde_json::Value = serde_json::from_str(&read_to_string(&run_dir.join("config.json"))?)
        .map_err(|e| ReportError::Malformed(e.to_string()))?;
    let space: SearchSpace =
        serde_json::from_value(config["resolved"]["search_space"].clone())
            .map_err(|e| ReportError::Malformed(format!("search_space: {e}")))?;
    let module_names: Vec<String> =
        serde_json::from_value(config["resolved"]["module_names"].clone())
            .map_err(|e| ReportError::Malformed(format!("module_names: {e}")))?;
    let tables: Vec<Vec<InstructionCandidate>> =
        serde_json::from_str(&read_to_string(&run_dir.join("instructions.json"))?)
            .map_err(|e| ReportError::Malformed(format!("instructions.json: {e}")))?;

    let mut rows = Vec::with_capacity(trials.len());
    let mut progression = Vec::new();
    let mut running_best = f64::NEG_INFINITY;
    for record in &trials {
        if record.kind == TrialKind::Full && record.score > running_best {
            running_best = record.score;
            progression.push(ProgressionEntry {
                trial_index: record.trial_index,
                score: record.score,
                instructions: instructions_for(record, &space, &tables, &module_names),
            });
        }
        rows.push(ReportRow {
            trial_index: record.trial_index,
            kind: match record.kind {
                TrialKind::Full => "full".to_string(),
                TrialKind::Minibatch => "minibatch".to_string(),
            },
            score: record.score,
            running_best_full: if running_best.is_finite() {
                running_best
            } else {
                0.0
            },
            params: param_summary(&space, record),
        });
    }

    let importance_path = run_dir.join("importance.json");
    let importance = if importance_path.exists() {
        Some(
            serde_json::from_str(&read_to_string(&importance_path)?)
                .map_err(|e| ReportError::Malformed(e.to_string()))?,
        )
    } else {
        None
    };

    Ok(RunReport {
        rows,
        progression,
        importance,
    })
}

/// Writes trials.csv, progression.json, and importance.csv (when present)
/// into the run directory, returning the paths written.
pub fn write_report(run_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let report = build_report(run_dir)?;
    let mut written = Vec::new();

    let csv_path = run_dir.join("trials.csv");
    let mut writer = csv::Writer::from_path(&csv_path)?;
    writer.write_record(["trial_index", "kind", "score", "running_best_full", "params"])?;
    for row in &report.rows {
        writer
            .write_record([
                row.trial_index.to_string(),
                row.kind.clone(),
                row.score.to_string(),
                row.running_best_full.to_string(),
                row.params.clone(),
            ])?;
    }
    writer.flush().map_err(|e| ReportError::Io {
        path: csv_path.clone(),
        source: e,
    })?;
    written.push(csv_path);

    let progression_path = run_dir.join("progression.json");
    fs::write(
        &progression_path,
        serde_json::to_string_pretty(&report.progression)
            .map_err(|e| ReportError::Malformed(e.to_string()))?,
    )
    .map_err(|source| ReportError::Io {
        path: progression_path.clone(),
        source,
    })?;
    written.push(progression_path);

    if let Some(importance) = &report.importance {
        let importance_path = run_dir.join("importance.csv");
        let mut writer = csv::Writer::from_path(&importance_path)?;
        writer.write_record(["param", "importance"])?;
        for (name, value) in importance {
            writer.write_record([name.clone(), value.to_string()])?;
        }
        writer.flush().map_err(|e| ReportError::Io {
            path: importance_path.clone(),
            source: e,
        })?;
        written.push(importance_path);
    }
    Ok(written)
}
