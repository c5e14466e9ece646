//! End to end: ground → prune → reason → explain → score → embed, producing
//! one dataset record per question.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{ExplanationInstance, CONCEPT_COUNT, TOPK_COUNT};
use crate::debugger::{score_instance, DebuggerScore};
use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::explainer::{generate, ExplainerSettings, ExplanationRequest, DEFAULT_TASK_TYPE};
use crate::gat::{self, AnswerDistribution, GatConfig, GatExample, GatParams, ReasonElements};
use crate::kg::KnowledgeGraph;
use crate::llm::{ChatClient, RetryPolicy};
use crate::prune::{
    prune_kg, ElementGraph, PruneConfig, QaContext, RelevanceScorer, ELEMENT_NODE_TYPES,
};

/// One question to explain. Without a `label` the model's own prediction
/// stands in as the reference answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainInput {
    pub question: String,
    pub options: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub instance: ExplanationInstance,
    pub element_graph: ElementGraph,
    pub distribution: AnswerDistribution,
    pub reasons: ReasonElements,
    pub score: DebuggerScore,
}

/// Model configuration matching a knowledge graph and an embedder.
pub fn model_config_for(graph: &KnowledgeGraph, lm_dim: usize, options: usize) -> GatConfig {
    GatConfig::new(
        ELEMENT_NODE_TYPES.len(),
        graph.relation_type_count().max(1),
        lm_dim,
        options,
    )
}

pub struct Pipeline {
    pub graph: Arc<KnowledgeGraph>,
    pub model: Arc<GatParams>,
    pub scorer: Arc<dyn RelevanceScorer>,
    pub embedder: Arc<dyn Embedder>,
    pub prune: PruneConfig,
    pub explainer: ExplainerSettings,
    pub debugger_retry: RetryPolicy,
    pub task_type: String,
}

impl Pipeline {
    pub fn new(
        graph: Arc<KnowledgeGraph>,
        model: Arc<GatParams>,
        scorer: Arc<dyn RelevanceScorer>,
        embedder: Arc<dyn Embedder>,
    ) -> Result<Self> {
        let p = Pipeline {
            graph,
            model,
            scorer,
            embedder,
            prune: PruneConfig::default(),
            explainer: ExplainerSettings::default(),
            debugger_retry: RetryPolicy::default(),
            task_type: DEFAULT_TASK_TYPE.to_string(),
        };
        p.check_compatible()?;
        Ok(p)
    }

    /// The model must agree with the graph and the embedder on its input sizes.
    pub fn check_compatible(&self) -> Result<()> {
        let c = self.model.config();
        if c.node_types != ELEMENT_NODE_TYPES.len() {
            return Err(Error::Config(format!(
                "model has {} node types, element graphs have {}",
                c.node_types,
                ELEMENT_NODE_TYPES.len()
            )));
        }
        if c.relation_types < self.graph.relation_type_count() {
            return Err(Error::Config(format!(
                "model knows {} relations, graph has {}",
                c.relation_types,
                self.graph.relation_type_count()
            )));
        }
        if c.lm_dim != self.embedder.dimension() {
            return Err(Error::Config(format!(
                "model expects {}-d context embeddings, embedder {} produces {}",
                c.lm_dim,
                self.embedder.model_id(),
                self.embedder.dimension()
            )));
        }
        Ok(())
    }

    /// QA context with its embedding filled in.
    pub fn context(&self, question: &str, options: &[String]) -> Result<QaContext> {
        let mut qa = QaContext::new(question, options.to_vec(), Vec::new())?;
        qa.context_embedding = self.embedder.embed_one(&qa.qa_text())?;
        Ok(qa)
    }

    /// Pruned graph and context embedding, ready for training.
    pub fn training_example(
        &self,
        question: &str,
        options: &[String],
        gold: usize,
    ) -> Result<GatExample> {
        if gold >= options.len() {
            return Err(Error::InvalidArgument(format!(
                "gold index {gold} out of range"
            )));
        }
        let qa = self.context(question, options)?;
        let graph = prune_kg(&qa, &self.graph, self.scorer.as_ref(), &self.prune)?;
        Ok(GatExample {
            graph,
            context: qa.context_embedding,
            gold,
        })
    }

    /// Prediction and reason elements without calling the LLM.
    pub fn reason(
        &self,
        qa: &QaContext,
    ) -> Result<(ElementGraph, AnswerDistribution, ReasonElements)> {
        if qa.options.len() != self.model.config().options {
            return Err(Error::Config(format!(
                "model answers {} options, request has {}",
                self.model.config().options,
                qa.options.len()
            )));
        }
        let eg = prune_kg(qa, &self.graph, self.scorer.as_ref(), &self.prune)?;
        let out = gat::forward(&self.model, &eg, &qa.context_embedding)?;
        let reasons = gat::extract_reason_elements(&out.attention, &eg, CONCEPT_COUNT)?;
        Ok((eg, out.distribution, reasons))
    }

    pub fn explain(&self, input: &ExplainInput, client: &dyn ChatClient) -> Result<PipelineOutput> {
        let qa = self.context(&input.question, &input.options)?;
        let (eg, distribution, reasons) = self.reason(&qa)?;
        let predicted = distribution.predicted();
        let predicted_label = qa.options[predicted].clone();
        let label = match &input.label {
            Some(l) if qa.options.contains(l) => l.clone(),
            Some(l) => {
                return Err(Error::InvalidArgument(format!(
                    "label {l:?} is not one of the options"
                )))
            }
            None => predicted_label.clone(),
        };
        if reasons.len() < CONCEPT_COUNT {
            log::warn!(
                "element graph has only {} nodes; the record will carry fewer than {CONCEPT_COUNT} concepts",
                reasons.len()
            );
        }
        let concept = reasons.labels();
        let req = ExplanationRequest {
            task_type: self.task_type.clone(),
            qa: qa.clone(),
            predicted,
            gold: label.clone(),
            reason_elements: reasons.top_labels(),
        };
        let pair = generate(&req, client, &self.explainer)?;
        let mut instance = ExplanationInstance {
            question: qa.question.clone(),
            answers: qa.options.clone(),
            label_matched: label == predicted_label,
            label,
            predicted_label,
            topk: concept.iter().take(TOPK_COUNT).cloned().collect(),
            concept,
            explanation_why: pair.why,
            explanation_why_not: pair.why_not,
            debugger_score: String::new(),
            embedding: qa.context_embedding.clone(),
            id: None,
        };
        let score = score_instance(&instance, client, &self.debugger_retry)?;
        instance.debugger_score = score.render();
        Ok(PipelineOutput {
            instance,
            element_graph: eg,
            distribution,
            reasons,
            score,
        })
    }

    /// Re-scores an instance after its explanations changed.
    pub fn rescore(
        &self,
        instance: &mut ExplanationInstance,
        client: &dyn ChatClient,
    ) -> Result<DebuggerScore> {
        let score = score_instance(instance, client, &self.debugger_retry)?;
        instance.debugger_score = score.render();
        Ok(score)
    }
}
