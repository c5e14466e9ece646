//! Debugger-scores: evaluator prompt, score-line parsing, and the derived
//! overall value.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::ExplanationInstance;
use crate::error::{Error, Result};
use crate::explainer::format_options;
use crate::llm::{complete_with_retry, ChatClient, ChatMessage, ChatRequest, RetryPolicy};

pub const MIN_SCORE: f64 = 1.0;
pub const MAX_SCORE: f64 = 5.0;
/// Accepted granularity of a score (aggregates over 20 questions).
pub const SCORE_STEP: f64 = 0.05;

/// Substring present in every debugger prompt.
pub const DEBUGGER_PROMPT_MARKER: &str = "assuming the role of LM debuggers";

const SYSTEM_SECTION: &str = "Evaluators, assuming the role of LM debuggers with expertise in model parameter changes, assess explanations from the perspective of how model parameters influence decision-making. The assessment focuses on whether the explanation accurately reflects the computational and statistical mechanisms utilized by the LM.";

const CONTENT_SECTION: &str = "Evaluators are presented with a task where the LM is augmented with key reasoning elements derived from its operation. This includes the question, answer options, the LM's prediction, and the corresponding explanation.";

const CRITERIA_SECTION: &str = "\
- Faithfulness: Does the explanation accurately represent the underlying computational processes and data-driven mechanisms used by the LM to reach its conclusion?
- Completeness: Does the explanation encompass all significant computational strategies and data insights relied upon by the LM to make the decision?
- Accuracy: How precisely does the explanation reflect the true capabilities and decision-making processes of the LM, considering its design, training data, and functional algorithms?";

const SCORING_SECTION: &str = "Evaluators are instructed to score each dimension on a scale from 1 to 5, where 1 indicates the lowest level of adherence (poor) and 5 indicates the highest (excellent). The scoring guide emphasizes balanced evaluation, advising against overly strict judgments.";

const FORMAT_LINE: &str =
    "Reply with one line in exactly this format:\nFaithfulness: <1-5> | Completeness: <1-5> | Accuracy: <1-5>";

const FORMAT_REMINDER: &str = "Your previous reply could not be read. Reply with only one line in exactly this format:\nFaithfulness: <1-5> | Completeness: <1-5> | Accuracy: <1-5>";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DebuggerScore {
    pub faithfulness: f64,
    pub completeness: f64,
    pub accuracy: f64,
}

impl DebuggerScore {
    pub fn new(faithfulness: f64, completeness: f64, accuracy: f64) -> Result<Self> {
        let check = |name: &str, v: f64| -> Result<f64> {
            if !(MIN_SCORE..=MAX_SCORE).contains(&v) {
                return Err(Error::invalid(format!(
                    "{name} score {v} is outside [1, 5]"
                )));
            }
            let steps = v / SCORE_STEP;
            if (steps - steps.round()).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "{name} score {v} is not a multiple of {SCORE_STEP}"
                )));
            }
            Ok(steps.round() / 20.0)
        };
        Ok(Self {
            faithfulness: check("faithfulness", faithfulness)?,
            completeness: check("completeness", completeness)?,
            accuracy: check("accuracy", accuracy)?,
        })
    }

    pub fn overall(&self) -> f64 {
        overall(self.faithfulness, self.completeness, self.accuracy)
    }

    /// Canonical pipe-delimited form, e.g. `Faithfulness: 4 | Completeness: 3 | Accuracy: 4`.
    pub fn render(&self) -> String {
        self.to_string()
    }

    /// Overall rounded to two decimals.
    pub fn overall_display(&self) -> String {
        format!("{:.2}", self.overall())
    }
}

fn render_value(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

impl fmt::Display for DebuggerScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Faithfulness: {} | Completeness: {} | Accuracy: {}",
            render_value(self.faithfulness),
            render_value(self.completeness),
            render_value(self.accuracy)
        )
    }
}

/// Unweighted mean of the three dimensions.
pub fn overall(faithfulness: f64, completeness: f64, accuracy: f64) -> f64 {
    (faithfulness + completeness + accuracy) / 3.0
}

/// Finds `label: number` (case-insensitive) anywhere in `text`.
fn find_labeled_value(text: &str, label: &str) -> Option<std::result::Result<f64, String>> {
    let lower = text.to_lowercase();
    let mut from = 0;
    while let Some(pos) = lower[from..].find(label) {
        let after = from + pos + label.len();
        from = after;
        let rest = lower[after..].trim_start();
        let Some(rest) = rest.strip_prefix(':') else {
            continue;
        };
        let rest = rest.trim_start().trim_start_matches('*').trim_start();
        let num: String = rest
            .chars()
            .take_while(|c| c.is_ascii_digit() || *c == '.' || *c == '-')
            .collect();
        let num = num.trim_end_matches('.');
        if num.is_empty() {
            continue;
        }
        return Some(
            num.parse::<f64>()
                .map_err(|_| format!("bad number {num:?}")),
        );
    }
    None
}

/// Parses the three labelled dimensions from an evaluator reply. Label order
/// and case do not matter and surrounding prose is ignored.
pub fn parse_scores(text: &str) -> Result<DebuggerScore> {
    let err = |message: String| Error::ScoreParse {
        raw: text.to_string(),
        message,
    };
    let mut values = [0.0; 3];
    for (slot, label) in values
        .iter_mut()
        .zip(["faithfulness", "completeness", "accuracy"])
    {
        *slot = match find_labeled_value(text, label) {
            Some(Ok(v)) => v,
            Some(Err(m)) => return Err(err(format!("{label}: {m}"))),
            None => return Err(err(format!("missing {label}"))),
        };
    }
    DebuggerScore::new(values[0], values[1], values[2]).map_err(|e| err(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DebuggerPrompt {
    pub system: String,
    pub user: String,
}

impl DebuggerPrompt {
    pub fn messages(&self) -> Vec<ChatMessage> {
        vec![
            ChatMessage::system(self.system.clone()),
            ChatMessage::user(self.user.clone()),
        ]
    }
}

pub fn build_debugger_prompt(instance: &ExplanationInstance) -> Result<DebuggerPrompt> {
    if instance.explanation_why.trim().is_empty() {
        return Err(Error::invalid("instance has no why-choose explanation"));
    }
    if instance.explanation_why_not.trim().is_empty() {
        return Err(Error::invalid("instance has no why-not-choose explanation"));
    }
    let reason_elements = instance
        .topk
        .iter()
        .map(|e| format!("\"{e}\""))
        .collect::<Vec<_>>()
        .join(", ");
    let user = format!(
        "Prompt System: {SYSTEM_SECTION}\n\n\
         Prompt Content: {CONTENT_SECTION}\n\n\
         Question: {}\n\
         Answer Options: {}\n\
         Prediction: {}\n\
         Top-5 Reason-elements: {reason_elements}\n\
         Explanation (Why): {}\n\
         Explanation (Why-Not): {}\n\n\
         Evaluation Criteria:\n{CRITERIA_SECTION}\n\n\
         Scoring: {SCORING_SECTION}\n\n\
         {FORMAT_LINE}",
        instance.question,
        format_options(&instance.answers),
        instance.predicted_label,
        instance.explanation_why,
        instance.explanation_why_not,
    );
    Ok(DebuggerPrompt {
        system: SYSTEM_SECTION.to_string(),
        user,
    })
}

/// Prompts the evaluator and parses its reply, re-asking once with a format
/// reminder when the first reply cannot be parsed.
pub fn score_instance(
    instance: &ExplanationInstance,
    client: &dyn ChatClient,
    retry: &RetryPolicy,
) -> Result<DebuggerScore> {
    let prompt = build_debugger_prompt(instance)?;
    let mut messages = prompt.messages();
    let first = complete_with_retry(
        client,
        &ChatRequest {
            messages: messages.clone(),
            temperature: 0.0,
        },
        retry,
    )?;
    match parse_scores(&first) {
        Ok(s) => return Ok(s),
        Err(e) => log::info!("re-asking evaluator: {e}"),
    }
    messages.push(ChatMessage::assistant(first));
    messages.push(ChatMessage::user(FORMAT_REMINDER));
    let second = complete_with_retry(
        client,
        &ChatRequest {
            messages,
            temperature: 0.0,
        },
        retry,
    )?;
    parse_scores(&second)
        .map_err(|e| Error::Evaluation(format!("evaluator reply unusable after re-ask: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::reference_instance;
    use crate::llm::MockClient;

    #[test]
    fn parses_reference_line() {
        let s = parse_scores("Faithfulness: 4 | Completeness: 3 | Accuracy: 4").unwrap();
        assert_eq!(
            (s.faithfulness, s.completeness, s.accuracy),
            (4.0, 3.0, 4.0)
        );
        assert_eq!(s.overall_display(), "3.67");
    }

    #[test]
    fn parse_is_order_and_case_insensitive() {
        let s = parse_scores("Accuracy: 5 | Faithfulness: 5 | Completeness: 5").unwrap();
        assert_eq!(s.overall_display(), "5.00");
        let s = parse_scores(
            "Sure! Here you go.\nFAITHFULNESS: 2 | completeness: 3 | Accuracy:1\nThanks",
        )
        .unwrap();
        assert_eq!(
            (s.faithfulness, s.completeness, s.accuracy),
            (2.0, 3.0, 1.0)
        );
    }

    #[test]
    fn parse_skips_unlabelled_mentions() {
        let s =
            parse_scores("Faithfulness matters. Faithfulness: 3 | Completeness: 4 | Accuracy: 3.5")
                .unwrap();
        assert_eq!(s.faithfulness, 3.0);
        assert_eq!(s.accuracy, 3.5);
    }

    #[test]
    fn parse_errors_carry_raw_text() {
        for bad in [
            "Faithfulness: 6 | Completeness: 3 | Accuracy: 4",
            "Faithfulness: 0 | Completeness: 3 | Accuracy: 4",
            "Faithfulness: 4 | Completeness: 3",
            "no scores at all",
            "Faithfulness: 4.01 | Completeness: 3 | Accuracy: 4",
        ] {
            match parse_scores(bad) {
                Err(Error::ScoreParse { raw, .. }) => assert_eq!(raw, bad),
                other => panic!("{bad:?} gave {other:?}"),
            }
        }
    }

    #[test]
    fn overall_is_mean() {
        assert!((overall(4.05, 3.65, 4.10) - 3.93).abs() < 0.005);
        assert!((overall(3.50, 2.95, 3.65) - 3.37).abs() < 0.005);
        assert_eq!(overall(5.0, 5.0, 5.0), 5.0);
    }

    #[test]
    fn non_integer_values_render_with_two_decimals() {
        let s = DebuggerScore::new(3.65, 4.0, 2.5).unwrap();
        assert_eq!(
            s.render(),
            "Faithfulness: 3.65 | Completeness: 4 | Accuracy: 2.50"
        );
        assert_eq!(parse_scores(&s.render()).unwrap(), s);
    }

    #[test]
    fn prompt_contains_sections_and_instance() {
        let inst = reference_instance();
        let p = build_debugger_prompt(&inst).unwrap();
        for heading in [
            "Faithfulness:",
            "Completeness:",
            "Accuracy:",
            "scale from 1 to 5",
        ] {
            assert!(p.user.contains(heading), "missing {heading}");
        }
        assert!(p.user.contains(&inst.question));
        assert!(p.user.contains(DEBUGGER_PROMPT_MARKER));
    }

    #[test]
    fn prompt_differs_only_in_why_slot() {
        let a = reference_instance();
        let mut b = a.clone();
        b.explanation_why = "A different explanation.".into();
        let pa = build_debugger_prompt(&a).unwrap().user;
        let pb = build_debugger_prompt(&b).unwrap().user;
        assert_ne!(pa, pb);
        assert_eq!(
            pa.replace(&a.explanation_why, "<WHY>"),
            pb.replace(&b.explanation_why, "<WHY>")
        );
    }

    #[test]
    fn prompt_requires_both_texts() {
        let mut inst = reference_instance();
        inst.explanation_why_not.clear();
        assert!(build_debugger_prompt(&inst).is_err());
    }

    #[test]
    fn scoring_with_mock_clients() {
        let inst = reference_instance();
        let retry = RetryPolicy::immediate(0);
        let client = MockClient::echo().with_script([MOCK_LINE]);
        let s = score_instance(&inst, &client, &retry).unwrap();
        assert_eq!(s.render(), MOCK_LINE);

        let client = MockClient::echo().with_script(["I think it is decent.", MOCK_LINE]);
        assert!(score_instance(&inst, &client, &retry).is_ok());
        assert_eq!(client.call_count(), 2);
        assert!(client.requests()[1]
            .messages
            .last()
            .unwrap()
            .content
            .contains("could not be read"));

        let client = MockClient::echo().with_script(["nope", "still nope"]);
        assert!(matches!(
            score_instance(&inst, &client, &retry),
            Err(Error::Evaluation(_))
        ));
    }

    const MOCK_LINE: &str = "Faithfulness: 4 | Completeness: 3 | Accuracy: 4";
}
