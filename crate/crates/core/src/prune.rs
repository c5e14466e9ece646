//! QA-conditioned subgraph pruning.
//!
//! Every node in the hop-bounded neighborhood of the grounded entities is
//! scored with `sigmoid(head(encode(label ‖ question ‖ options)))` and the
//! top-N nodes (ties to the lower node id) are kept together with the edges
//! among them.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::embed::{fnv1a64, Embedder};
use crate::error::{Error, Result};
use crate::kg::{ground_entities, neighborhood, KnowledgeGraph, NodeId};
use crate::par::{self, Execution};

/// Retained node budget used for the released dataset.
pub const DEFAULT_NODE_BUDGET: usize = 200;
/// Neighborhood radius used for the released dataset.
pub const DEFAULT_HOPS: usize = 2;

/// Node roles in an element graph, in type-index order.
pub const ELEMENT_NODE_TYPES: [&str; 3] = ["question", "answer", "context"];
pub const QUESTION_NODE: usize = 0;
pub const ANSWER_NODE: usize = 1;
pub const CONTEXT_NODE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaContext {
    pub question: String,
    pub options: Vec<String>,
    /// Pooled language-model representation of the QA pair.
    #[serde(default)]
    pub context_embedding: Vec<f64>,
}

impl QaContext {
    pub fn new(
        question: impl Into<String>,
        options: Vec<String>,
        context_embedding: Vec<f64>,
    ) -> Result<Self> {
        let qa = Self {
            question: question.into(),
            options,
            context_embedding,
        };
        qa.validate()?;
        Ok(qa)
    }

    pub fn validate(&self) -> Result<()> {
        if self.options.len() < 2 {
            return Err(Error::invalid(
                "a question needs at least two answer options",
            ));
        }
        for (i, o) in self.options.iter().enumerate() {
            if self.options[..i].contains(o) {
                return Err(Error::invalid(format!("duplicate answer option {o:?}")));
            }
        }
        if self.context_embedding.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("context embedding is not finite".into()));
        }
        Ok(())
    }

    pub fn joined_options(&self) -> String {
        self.options.join(" ")
    }

    /// `question ‖ " " ‖ joined options`; the text used for QA embeddings.
    pub fn qa_text(&self) -> String {
        format!("{} {}", self.question, self.joined_options())
    }

    /// Text fed to the relevance encoder for one node.
    pub fn scoring_text(&self, node_label: &str) -> String {
        format!("{node_label} {} {}", self.question, self.joined_options())
    }
}

/// Relevance model: an encoder over `label ‖ QA` text and a scalar head.
pub trait RelevanceScorer: Send + Sync {
    fn encode(&self, text: &str) -> Result<Vec<f64>>;
    fn score_head(&self, encoding: &[f64]) -> f64;

    fn logit(&self, text: &str) -> Result<f64> {
        Ok(self.score_head(&self.encode(text)?))
    }
}

/// Deterministic scorer keyed by a seed; the logit is a hash of the text
/// mapped uniformly onto `[-4, 4]`.
#[derive(Debug, Clone, Copy)]
pub struct HashScorer {
    pub seed: u64,
}

impl HashScorer {
    pub const LOGIT_RANGE: f64 = 4.0;

    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl RelevanceScorer for HashScorer {
    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        let mut bytes = self.seed.to_le_bytes().to_vec();
        bytes.extend_from_slice(text.as_bytes());
        let h = fnv1a64(&bytes);
        // top 53 bits -> [0, 1)
        let unit = (h >> 11) as f64 / (1u64 << 53) as f64;
        Ok(vec![(2.0 * unit - 1.0) * Self::LOGIT_RANGE])
    }

    fn score_head(&self, encoding: &[f64]) -> f64 {
        encoding[0]
    }
}

/// Same logit for every input.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f64);

impl RelevanceScorer for ConstantScorer {
    fn encode(&self, _text: &str) -> Result<Vec<f64>> {
        Ok(vec![self.0])
    }

    fn score_head(&self, encoding: &[f64]) -> f64 {
        encoding[0]
    }
}

/// Scorer backed by an external embedding model and a linear head.
pub struct EmbeddingScorer<E> {
    embedder: E,
    weights: Vec<f64>,
    bias: f64,
}

impl<E: Embedder> EmbeddingScorer<E> {
    pub fn new(embedder: E, weights: Vec<f64>, bias: f64) -> Result<Self> {
        if weights.len() != embedder.dimension() {
            return Err(Error::Config(format!(
                "score head has {} weights but the embedder produces {} dimensions",
                weights.len(),
                embedder.dimension()
            )));
        }
        Ok(Self {
            embedder,
            weights,
            bias,
        })
    }

    /// Head initialised with small seeded weights.
    pub fn seeded(embedder: E, seed: u64) -> Result<Self> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dim = embedder.dimension();
        let scale = 1.0 / (dim as f64).sqrt();
        let weights = (0..dim).map(|_| rng.random_range(-scale..scale)).collect();
        Self::new(embedder, weights, 0.0)
    }
}

impl<E: Embedder> RelevanceScorer for EmbeddingScorer<E> {
    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        self.embedder.embed_one(text)
    }

    fn score_head(&self, encoding: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(encoding)
            .map(|(w, x)| w * x)
            .sum::<f64>()
            + self.bias
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Largest f64 strictly below one.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Relevance of one node to the QA context, strictly inside (0, 1).
pub fn score_node(
    graph: &KnowledgeGraph,
    node: NodeId,
    qa: &QaContext,
    scorer: &dyn RelevanceScorer,
) -> Result<f64> {
    let label = &graph
        .node(node)
        .ok_or_else(|| Error::invalid(format!("node {node} does not exist")))?
        .label;
    score_label(label, qa, scorer)
}

pub(crate) fn score_label(
    label: &str,
    qa: &QaContext,
    scorer: &dyn RelevanceScorer,
) -> Result<f64> {
    let logit = scorer.logit(&qa.scoring_text(label))?;
    if !logit.is_finite() {
        return Err(Error::Numerical(format!(
            "relevance logit for {label:?} is {logit}"
        )));
    }
    Ok(sigmoid(logit).clamp(f64::MIN_POSITIVE, BELOW_ONE))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementNode {
    /// Node id in the source knowledge graph.
    pub kg_id: NodeId,
    pub label: String,
    pub node_type: usize,
    pub relevance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementEdge {
    pub src: usize,
    pub dst: usize,
    pub relation: usize,
}

/// A pruned, relevance-annotated subgraph. Edge endpoints index `nodes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementGraph {
    pub node_types: Vec<String>,
    pub relation_types: Vec<String>,
    pub nodes: Vec<ElementNode>,
    pub edges: Vec<ElementEdge>,
}

impl ElementGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.node_type >= self.node_types.len() {
                return Err(Error::invalid(format!(
                    "element node {i} has an unknown type"
                )));
            }
            if !(n.relevance > 0.0 && n.relevance < 1.0) {
                return Err(Error::invalid(format!(
                    "element node {i} relevance {} is outside (0, 1)",
                    n.relevance
                )));
            }
        }
        for e in &self.edges {
            if e.src >= self.nodes.len() || e.dst >= self.nodes.len() {
                return Err(Error::invalid("element edge references a missing node"));
            }
            if e.relation >= self.relation_types.len() {
                return Err(Error::invalid("element edge has an unknown relation"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Self = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PruneConfig {
    pub node_budget: usize,
    pub hops: usize,
    pub execution: Execution,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            node_budget: DEFAULT_NODE_BUDGET,
            hops: DEFAULT_HOPS,
            execution: Execution::default(),
        }
    }
}

/// Descending score, then ascending node id.
pub fn rank_by_score(scored: &mut [(NodeId, f64)]) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// Builds the element graph for `qa`.
pub fn prune_kg(
    qa: &QaContext,
    graph: &KnowledgeGraph,
    scorer: &dyn RelevanceScorer,
    config: &PruneConfig,
) -> Result<ElementGraph> {
    if config.node_budget < 1 {
        return Err(Error::invalid("node budget must be at least 1"));
    }
    let question_seeds = ground_entities(&qa.question, graph);
    let answer_seeds: Vec<NodeId> = qa
        .options
        .iter()
        .flat_map(|o| ground_entities(o, graph))
        .collect();
    let mut seeds: Vec<NodeId> = question_seeds
        .iter()
        .chain(&answer_seeds)
        .copied()
        .collect();
    seeds.sort_unstable();
    seeds.dedup();
    if seeds.is_empty() {
        return Err(Error::NoSeedEntities);
    }
    let pool = neighborhood(graph, &seeds, config.hops)?;

    let labels: Vec<(NodeId, &str)> = pool
        .nodes
        .iter()
        .map(|&id| (id, graph.nodes()[id].label.as_str()))
        .collect();
    let scores = par::try_map(config.execution, &labels, |&(_, label)| {
        score_label(label, qa, scorer)
    })?;
    let mut scored: Vec<(NodeId, f64)> = labels.iter().map(|&(id, _)| id).zip(scores).collect();
    rank_by_score(&mut scored);
    scored.truncate(config.node_budget);
    scored.sort_by_key(|&(id, _)| id);

    let role = |id: NodeId| {
        if answer_seeds.contains(&id) {
            ANSWER_NODE
        } else if question_seeds.contains(&id) {
            QUESTION_NODE
        } else {
            CONTEXT_NODE
        }
    };
    let local: HashMap<NodeId, usize> = scored
        .iter()
        .enumerate()
        .map(|(i, &(id, _))| (id, i))
        .collect();
    let nodes = scored
        .iter()
        .map(|&(id, s)| ElementNode {
            kg_id: id,
            label: graph.nodes()[id].label.clone(),
            node_type: role(id),
            relevance: s,
        })
        .collect();
    let edges = pool
        .edges
        .iter()
        .map(|&ei| graph.edges()[ei])
        .filter_map(|e| {
            Some(ElementEdge {
                src: *local.get(&e.src)?,
                dst: *local.get(&e.dst)?,
                relation: e.relation,
            })
        })
        .collect();
    Ok(ElementGraph {
        node_types: ELEMENT_NODE_TYPES.iter().map(|s| s.to_string()).collect(),
        relation_types: graph.relation_names().to_vec(),
        nodes,
        edges,
    })
}
