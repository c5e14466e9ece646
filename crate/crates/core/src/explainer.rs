//! Two-stage explanation generation (why-choose, then why-not-choose) and
//! the review-driven refinement loop.

use serde::{Deserialize, Serialize};

use crate::dataset::{ExplanationInstance, TOPK_COUNT};
use crate::error::{Error, Result};
use crate::llm::{complete_with_retry, ChatClient, ChatMessage, ChatRequest, RetryPolicy};
use crate::prune::QaContext;

pub const DEFAULT_TASK_TYPE: &str = "commonsense question answering";
pub const DEFAULT_MAX_REFINEMENTS: u32 = 3;

/// Marker text present in every Stage-1 prompt.
pub const STAGE1_MARKER: &str = "Explanation (Stage 1):";
pub const STAGE2_MARKER: &str = "Explanation (Stage 2):";
pub const REVIEWER_NOTES_HEADER: &str = "Reviewer notes:";

#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationRequest {
    pub task_type: String,
    pub qa: QaContext,
    /// Index of the model's predicted option.
    pub predicted: usize,
    /// Gold option text.
    pub gold: String,
    /// Ranked reason-element labels; only the first five are shown.
    pub reason_elements: Vec<String>,
}

impl ExplanationRequest {
    pub fn validate(&self) -> Result<()> {
        if self.predicted >= self.qa.options.len() {
            return Err(Error::invalid(format!(
                "predicted index {} is out of range for {} options",
                self.predicted,
                self.qa.options.len()
            )));
        }
        if self.reason_elements.is_empty() {
            return Err(Error::invalid("at least one reason-element is required"));
        }
        Ok(())
    }

    pub fn predicted_text(&self) -> &str {
        &self.qa.options[self.predicted]
    }

    /// Rebuilds the request behind a stored instance.
    pub fn from_instance(instance: &ExplanationInstance, task_type: &str) -> Result<Self> {
        let predicted = instance
            .answers
            .iter()
            .position(|a| a == &instance.predicted_label)
            .ok_or_else(|| Error::invalid("predicted label is not an answer option"))?;
        Ok(Self {
            task_type: task_type.to_string(),
            qa: QaContext {
                question: instance.question.clone(),
                options: instance.answers.clone(),
                context_embedding: Vec::new(),
            },
            predicted,
            gold: instance.label.clone(),
            reason_elements: if instance.topk.is_empty() {
                instance.concept.clone()
            } else {
                instance.topk.clone()
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplanationPair {
    pub why: String,
    pub why_not: String,
    pub generator_id: String,
    pub revision: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainerSettings {
    pub temperature: f64,
    pub retry: RetryPolicy,
    pub max_refinements: u32,
    /// Also reveal the gold answer to the generator.
    pub include_gold: bool,
}

impl Default for ExplainerSettings {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            retry: RetryPolicy::default(),
            max_refinements: DEFAULT_MAX_REFINEMENTS,
            include_gold: false,
        }
    }
}

fn option_letter(i: usize) -> String {
    if i < 26 {
        ((b'A' + i as u8) as char).to_string()
    } else {
        format!("{}", i + 1)
    }
}

/// `A. first, B. second, ...`
pub fn format_options(options: &[String]) -> String {
    options
        .iter()
        .enumerate()
        .map(|(i, o)| format!("{}. {o}", option_letter(i)))
        .collect::<Vec<_>>()
        .join(", ")
}

fn format_elements(elements: &[String]) -> String {
    elements
        .iter()
        .map(|e| format!("\"{e}\""))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn build_stage1_prompt(req: &ExplanationRequest, include_gold: bool) -> Result<String> {
    req.validate()?;
    let y = req.predicted_text();
    let top = &req.reason_elements[..req.reason_elements.len().min(TOPK_COUNT)];
    let gold = if include_gold {
        format!(" The correct answer is {}.", req.gold)
    } else {
        String::new()
    };
    Ok(format!(
        "Basis: Given a LM augmented with a graph attention network to extract key reasoning elements for decision-making. The task is {task}.\n\
         Input: The question is: {q}. The Answer Options are: {a}\n\
         Output: The model predicted choice {y}. Based on the Ranked Reason-elements: {r}{gold}\n\
         {STAGE1_MARKER} Explain the LM's reasoning process for selecting {y} over the other options. Provide concise explanations for why each reason-element supports {y} as the predicted choice. Focus on the LM's behavior and the significance of the Ranked Reason-elements. Your response should be short and concise.",
        task = req.task_type,
        q = req.qa.question,
        a = format_options(&req.qa.options),
        r = format_elements(top),
    ))
}

/// Stage-2 prompt over the options other than `predicted`, keeping their
/// original letters.
pub fn build_stage2_prompt(e_why: &str, options: &[String], predicted: &str) -> Result<String> {
    if e_why.trim().is_empty() {
        return Err(Error::invalid("the why-choose explanation is empty"));
    }
    if !options.iter().any(|o| o == predicted) {
        return Err(Error::invalid(format!(
            "{predicted:?} is not an answer option"
        )));
    }
    let remaining: Vec<String> = options
        .iter()
        .enumerate()
        .filter(|(_, o)| o.as_str() != predicted)
        .map(|(i, o)| format!("{}. {o}", option_letter(i)))
        .collect();
    if remaining.is_empty() {
        return Err(Error::invalid("no other options remain to explain"));
    }
    Ok(format!(
        "{STAGE2_MARKER} Based on the {e_why}, explain why this LM makes the other options less likely {}. Your response should be short and concise.",
        remaining.join(", ")
    ))
}

fn with_notes(prompt: String, notes: &[String]) -> String {
    if notes.is_empty() {
        return prompt;
    }
    let mut out = prompt;
    out.push_str("\n\n");
    out.push_str(REVIEWER_NOTES_HEADER);
    for n in notes {
        out.push_str("\n- ");
        out.push_str(n);
    }
    out
}

/// Runs Stage 1, then Stage 2 as a follow-up turn in the same conversation.
pub fn generate(
    req: &ExplanationRequest,
    client: &dyn ChatClient,
    settings: &ExplainerSettings,
) -> Result<ExplanationPair> {
    generate_with_notes(req, client, settings, &[])
}

pub fn generate_with_notes(
    req: &ExplanationRequest,
    client: &dyn ChatClient,
    settings: &ExplainerSettings,
    notes: &[String],
) -> Result<ExplanationPair> {
    let stage1 = with_notes(build_stage1_prompt(req, settings.include_gold)?, notes);
    let mut messages = vec![ChatMessage::user(stage1)];
    let why = complete_with_retry(
        client,
        &ChatRequest {
            messages: messages.clone(),
            temperature: settings.temperature,
        },
        &settings.retry,
    )?;
    let stage2 = build_stage2_prompt(&why, &req.qa.options, req.predicted_text())?;
    messages.push(ChatMessage::assistant(why.clone()));
    messages.push(ChatMessage::user(stage2));
    let why_not = complete_with_retry(
        client,
        &ChatRequest {
            messages,
            temperature: settings.temperature,
        },
        &settings.retry,
    )?;
    Ok(ExplanationPair {
        why: why.trim().to_string(),
        why_not: why_not.trim().to_string(),
        generator_id: client.model_id().to_string(),
        revision: 0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum RefineOutcome {
    /// New explanation texts; the caller's revision advances by one.
    Regenerated(ExplanationInstance),
    /// The refinement bound was reached; a human must take over.
    NeedsManualReview,
}

/// Regenerates an instance's explanations with reviewer notes appended to
/// the Stage-1 prompt. `revision` is the number of refinements already made.
pub fn refine(
    instance: &ExplanationInstance,
    revision: u32,
    flags: &[String],
    client: &dyn ChatClient,
    settings: &ExplainerSettings,
    task_type: &str,
) -> Result<RefineOutcome> {
    if flags.is_empty() {
        return Err(Error::invalid("refinement needs at least one review note"));
    }
    if revision >= settings.max_refinements {
        return Ok(RefineOutcome::NeedsManualReview);
    }
    let req = ExplanationRequest::from_instance(instance, task_type)?;
    let pair = generate_with_notes(&req, client, settings, flags)?;
    let mut next = instance.clone();
    next.explanation_why = pair.why;
    next.explanation_why_not = pair.why_not;
    Ok(RefineOutcome::Regenerated(next))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopStatus {
    Pending,
    Approved,
    NeedsManualReview,
}

/// Per-instance review loop: every flagged review triggers one refinement
/// until the bound is hit; a clean review approves.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementLoop {
    pub instance: ExplanationInstance,
    pub revision: u32,
    pub status: LoopStatus,
}

impl RefinementLoop {
    pub fn new(instance: ExplanationInstance) -> Self {
        Self {
            instance,
            revision: 0,
            status: LoopStatus::Pending,
        }
    }

    /// Applies one review; an empty note list is a clean review.
    pub fn review(
        &mut self,
        notes: &[String],
        client: &dyn ChatClient,
        settings: &ExplainerSettings,
    ) -> Result<LoopStatus> {
        if self.status != LoopStatus::Pending {
            return Ok(self.status);
        }
        if notes.is_empty() {
            self.status = LoopStatus::Approved;
            return Ok(self.status);
        }
        match refine(
            &self.instance,
            self.revision,
            notes,
            client,
            settings,
            DEFAULT_TASK_TYPE,
        )? {
            RefineOutcome::Regenerated(next) => {
                self.instance = next;
                self.revision += 1;
            }
            RefineOutcome::NeedsManualReview => self.status = LoopStatus::NeedsManualReview,
        }
        Ok(self.status)
    }
}
