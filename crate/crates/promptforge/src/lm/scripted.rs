//! Deterministic test backends: rule tables and closures.

use crate::hash::hex_digest;

use super::{truncate_completion, CallLog, LmBackend, LmError, LmRequest};

/// How a scripted rule matches an incoming prompt.
#[derive(Debug, Clone)]
pub enum RuleMatcher {
    /// Prompt contains this substring.
    Substring(String),
    /// Hex SHA-256 of the whole prompt equals this digest.
    ExactPromptDigest(String),
}

impl RuleMatcher {
    fn matches(&self, prompt: &str) -> bool {
        match self {
            RuleMatcher::Substring(s) => prompt.contains(s.as_str()),
            RuleMatcher::ExactPromptDigest(d) => hex_digest(prompt.as_bytes()) == *d,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedRule {
    pub matcher: RuleMatcher,
    pub response: String,
}

/// Table-driven LM: the first matching rule wins, otherwise the default
/// response is returned. Every request is appended to the call log.
pub struct ScriptedLm {
    rules: Vec<ScriptedRule>,
    default_response: String,
    log: CallLog,
    model: String,
}

impl ScriptedLm {
    /// Substring rules in priority order.
    pub fn new<S: Into<String>>(
        rules: impl IntoIterator<Item = (S, S)>,
        default_response: impl Into<String>,
    ) -> Self {
        let rules = rules
            .into_iter()
            .map(|(pat, response)| ScriptedRule {
                matcher: RuleMatcher::Substring(pat.into()),
                response: response.into(),
            })
            .collect();
        ScriptedLm {
            rules,
            default_response: default_response.into(),
            log: CallLog::new(),
            model: "scripted".to_string(),
        }
    }

    /// No rules: every prompt gets the same response.
    pub fn constant(default_response: impl Into<String>) -> Self {
        ScriptedLm::new(Vec::<(String, String)>::new(), default_response)
    }

    pub fn with_rules(rules: Vec<ScriptedRule>, default_response: impl Into<String>) -> Self {
        ScriptedLm {
            rules,
            default_response: default_response.into(),
            log: CallLog::new(),
            model: "scripted".to_string(),
        }
    }

    /// Share an external call log (e.g. one log across task, proposer, and
    /// teacher backends).
    pub fn with_log(mut self, log: CallLog) -> Self {
        self.log = log;
        self
    }

    pub fn call_log(&self) -> &CallLog {
        &self.log
    }
}

impl LmBackend for ScriptedLm {
    fn complete(&self, request: &LmRequest) -> Result<String, LmError> {
        self.log.push(request);
        let response = self
            .rules
            .iter()
            .find(|rule| rule.matcher.matches(&request.prompt))
            .map(|rule| rule.response.as_str())
            .unwrap_or(self.default_response.as_str());
        Ok(truncate_completion(
            response,
            &request.stop_sequences,
            request.max_tokens,
        ))
    }

    fn model_id(&self) -> &str {
        &self.model
    }
}

/// Closure-driven LM for programmatic test doubles (synthetic tasks compute
/// their responses from the prompt contents).
pub struct CallbackLm {
    f: Box<dyn Fn(&LmRequest) -> String + Send + Sync>,
    log: CallLog,
    model: String,
}

impl CallbackLm {
    pub fn new(
        model: impl Into<String>,
        f: impl Fn(&LmRequest) -> String + Send + Sync + 'static,
    ) -> Self {
        CallbackLm {
            f: Box::new(f),
            log: CallLog::new(),
            model: model.into(),
        }
    }

    pub fn with_log(mut self, log: CallLog) -> Self {
        self.log = log;
        self
    }

    pub fn call_log(&self) -> &CallLog {
        &self.log
    }
}

impl LmBackend for CallbackLm {
    fn complete(&self, request: &LmRequest) -> Result<String, LmError> {
        self.log.push(request);
        let response = (self.f)(request);
        Ok(truncate_completion(
            &response,
            &request.stop_sequences,
            request.max_tokens,
        ))
    }

    fn model_id(&self) -> &str {
        &self.model
    }
}

#[cfg(test)]
mod tests {
    use super::super::request;
    use super::*;

    #[test]
    fn first_matching_rule_wins() {
        let lm = ScriptedLm::new(
            [("iris", "Answer: setosa"), ("iris species", "Answer: other")],
            "Answer: default",
        );
        let out = lm.complete(&request("predict the iris species")).unwrap();
        assert_eq!(out, "Answer: setosa");
    }

    #[test]
    fn no_match_returns_default() {
        let lm = ScriptedLm::new([("x", "y")], "Answer: default");
        assert_eq!(lm.complete(&request("zzz")).unwrap(), "Answer: default");
    }

    #[test]
    fn exact_digest_rule_matches_whole_prompt() {
        let digest = hex_digest(b"the exact prompt");
        let lm = ScriptedLm::with_rules(
            vec![ScriptedRule {
                matcher: RuleMatcher::ExactPromptDigest(digest),
                response: "hit".into(),
            }],
            "miss",
        );
        assert_eq!(lm.complete(&request("the exact prompt")).unwrap(), "hit");
        assert_eq!(lm.complete(&request("the exact prompt!")).unwrap(), "miss");
    }

    #[test]
    fn call_log_records_every_call() {
        let lm = ScriptedLm::constant("r");
        lm.complete(&request("a")).unwrap();
        lm.complete(&request("b")).unwrap();
        assert_eq!(lm.call_log().len(), 2);
        assert_eq!(lm.call_log().snapshot()[1].prompt, "b");
    }

    #[test]
    fn responses_respect_stop_sequences() {
        let lm = ScriptedLm::constant("first\n\nsecond");
        let mut req = request("p");
        req.stop_sequences = vec!["\n\n".to_string()];
        assert_eq!(lm.complete(&req).unwrap(), "first");
    }

    #[test]
    fn callback_lm_computes_from_prompt() {
        let lm = CallbackLm::new("cb", |req| format!("len={}", req.prompt.len()));
        assert_eq!(lm.complete(&request("abc")).unwrap(), "len=3");
        assert_eq!(lm.call_log().len(), 1);
    }
}
