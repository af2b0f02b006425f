//! Task metrics. All scorers map into `[0, 1]`.

use std::sync::Arc;

use crate::program::Record;

use super::Example;

type Scorer = dyn Fn(&Record, &Example) -> Result<f64, MetricError> + Send + Sync;

/// A named scorer from (prediction, example) to `[0, 1]`.
#[derive(Clone)]
pub struct Metric {
    pub name: String,
    scorer: Arc<Scorer>,
}

impl std::fmt::Debug for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Metric").field("name", &self.name).finish()
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum MetricError {
    #[error("example {example} has no gold field {field}")]
    MissingGold { example: String, field: String },
}

impl Metric {
    pub fn from_fn(
        name: impl Into<String>,
        scorer: impl Fn(&Record, &Example) -> Result<f64, MetricError> + Send + Sync + 'static,
    ) -> Self {
        Metric {
            name: name.into(),
            scorer: Arc::new(scorer),
        }
    }

    /// Applies the scorer, clamping into `[0, 1]`.
    pub fn score(&self, prediction: &Record, example: &Example) -> Result<f64, MetricError> {
        Ok((self.scorer)(prediction, example)?.clamp(0.0, 1.0))
    }

    /// Normalized exact match of `prediction[prediction_field]` against
    /// `example.metadata[gold_field]`.
    pub fn exact_match(prediction_field: &str, gold_field: &str) -> Self {
        let pf = prediction_field.to_string();
        let gf = gold_field.to_string();
        Metric::from_fn("exact_match", move |prediction, example| {
            let gold = example
                .metadata
                .get(&gf)
                .ok_or_else(|| MetricError::MissingGold {
                    example: example.id.clone(),
                    field: gf.clone(),
                })?;
            let predicted = prediction.get(&pf).map(String::as_str).unwrap_or("");
            Ok(exact_match_score(predicted, gold))
        })
    }
}

/// 1 iff the normalized strings are equal.
pub fn exact_match_score(prediction: &str, gold: &str) -> f64 {
    if normalize_answer(prediction) == normalize_answer(gold) {
        1.0
    } else {
        0.0
    }
}

/// SQuAD-style answer normalization: lowercase, strip ASCII punctuation,
/// drop the articles a/an/the, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let no_punct: String = lower
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect();
    no_punct
        .split_whitespace()
        .filter(|word| !matches!(*word, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Format-conditional answer metric: the response format depends on the
/// answer category (lowercase for persons, no punctuation for places,
/// a trailing "Peace!" for dates, all caps otherwise), on top of exact
/// match. Categories come from `metadata["category"]`.
pub fn conditional_format(prediction_field: &str, gold_field: &str) -> Metric {
    let pf = prediction_field.to_string();
    let gf = gold_field.to_string();
    Metric::from_fn("conditional_format", move |prediction, example| {
        let gold = example
            .metadata
            .get(&gf)
            .ok_or_else(|| MetricError::MissingGold {
                example: example.id.clone(),
                field: gf.clone(),
            })?;
        let raw = prediction.get(&pf).map(String::as_str).unwrap_or("");
        let category = example
            .metadata
            .get("category")
            .map(String::as_str)
            .unwrap_or("other");
        let (format_ok, answer_part) = match category {
            "person" => (raw == raw.to_lowercase(), raw),
            "place" => (!raw.chars().any(|c| c.is_ascii_punctuation()), raw),
            "date" => match raw.strip_suffix("Peace!") {
                Some(rest) => (true, rest),
                None => (false, raw),
            },
            _ => (
                !raw.chars().any(|c| c.is_alphabetic() && c.is_lowercase()),
                raw,
            ),
        };
        if category != "date" && raw.trim_end().ends_with("Peace!") {
            // "Peace!" is reserved for dates.
            return Ok(0.0);
        }
        Ok(if format_ok {
            exact_match_score(answer_part, gold)
        } else {
            0.0
        })
    })
}

#[cfg(test)]
mod tests {
    use crate::program::record;

    use super::*;

    fn example(gold: &str, category: Option<&str>) -> Example {
        let mut metadata = record([("answer", gold)]);
        if let Some(c) = category {
            metadata.insert("category".into(), c.into());
        }
        Example {
            id: "e".into(),
            inputs: Record::new(),
            metadata,
        }
    }

    #[test]
    fn case_and_whitespace_normalize() {
        assert_eq!(exact_match_score("Paris ", "paris"), 1.0);
    }

    #[test]
    fn articles_and_punctuation_drop() {
        // Hand oracle: lowercase -> strip punctuation -> drop articles ->
        // collapse whitespace gives "eiffel tower" on both sides.
        assert_eq!(normalize_answer("the Eiffel Tower"), "eiffel tower");
        assert_eq!(exact_match_score("the Eiffel Tower", "Eiffel Tower"), 1.0);
        assert_eq!(exact_match_score("U.S.A.", "u s a"), 1.0);
    }

    #[test]
    fn different_answers_score_zero() {
        assert_eq!(exact_match_score("London", "Paris"), 0.0);
    }

    #[test]
    fn missing_gold_is_an_error() {
        let metric = Metric::exact_match("answer", "answer");
        let example = Example {
            id: "e".into(),
            inputs: Record::new(),
            metadata: Record::new(),
        };
        assert!(metric.score(&record([("answer", "x")]), &example).is_err());
    }

    #[test]
    fn metric_scores_clamp() {
        let metric = Metric::from_fn("wild", |_, _| Ok(7.5));
        let example = Example {
            id: "e".into(),
            inputs: Record::new(),
            metadata: Record::new(),
        };
        assert_eq!(metric.score(&Record::new(), &example).unwrap(), 1.0);
    }

    #[test]
    fn conditional_person_must_be_lowercase() {
        let metric = conditional_format("answer", "answer");
        let ex = example("ada lovelace", Some("person"));
        assert_eq!(metric.score(&record([("answer", "ada lovelace")]), &ex).unwrap(), 1.0);
        assert_eq!(metric.score(&record([("answer", "Ada Lovelace")]), &ex).unwrap(), 0.0);
    }

    #[test]
    fn conditional_place_rejects_punctuation() {
        let metric = conditional_format("answer", "answer");
        let ex = example("st louis", Some("place"));
        assert_eq!(metric.score(&record([("answer", "st louis")]), &ex).unwrap(), 1.0);
        assert_eq!(metric.score(&record([("answer", "st. louis")]), &ex).unwrap(), 0.0);
    }

    #[test]
    fn conditional_date_needs_peace_suffix() {
        let metric = conditional_format("answer", "answer");
        let ex = example("july 4 1776", Some("date"));
        assert_eq!(
            metric.score(&record([("answer", "July 4, 1776 Peace!")]), &ex).unwrap(),
            1.0
        );
        assert_eq!(metric.score(&record([("answer", "July 4, 1776")]), &ex).unwrap(), 0.0);
    }

    #[test]
    fn conditional_other_needs_all_caps_and_no_stray_peace() {
        let metric = conditional_format("answer", "answer");
        let ex = example("blue whale", Some("other"));
        assert_eq!(metric.score(&record([("answer", "BLUE WHALE")]), &ex).unwrap(), 1.0);
        assert_eq!(metric.score(&record([("answer", "Blue Whale")]), &ex).unwrap(), 0.0);
        assert_eq!(
            metric.score(&record([("answer", "BLUE WHALE Peace!")]), &ex).unwrap(),
            0.0
        );
    }
}
