//! Small deterministic inputs shared by tests, examples and benches.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{ExplanationInstance, CONCEPT_COUNT};
use crate::embed::HashEmbedder;
use crate::gat::{GatConfig, GatParams};
use crate::kg::{GraphBuilder, KnowledgeGraph};
use crate::pipeline::{model_config_for, Pipeline};
use crate::prune::HashScorer;

/// A fully worked explanation record, padded to the full
/// reason-element count.
pub fn reference_instance() -> ExplanationInstance {
    let head = [
        "enraged",
        "delay",
        "abiogenesis",
        "sneerer",
        "helpable",
        "begrudge",
        "mollify",
    ];
    let mut concept: Vec<String> = head.iter().map(|s| s.to_string()).collect();
    concept.extend((concept.len()..CONCEPT_COUNT).map(|i| format!("element_{i:02}")));
    ExplanationInstance {
        question: "John carred for Lucy but had trouble expressing it.  Lucy was disturbed by John's inability to express affection and felt that he was what?".into(),
        answers: ["being mean", "negligence", "disinterest", "misunderstood", "unfeeling"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        label: "unfeeling".into(),
        predicted_label: "unfeeling".into(),
        label_matched: true,
        topk: concept[..5].to_vec(),
        concept,
        explanation_why: "The model selected \"unfeeling\" primarily due to how it processed the emotional descriptors in the scenario.".into(),
        explanation_why_not: "1. \"being mean\": The context didn't explicitly describe John's behavior as intentionally harmful.".into(),
        debugger_score: "Faithfulness: 4 | Completeness: 3 | Accuracy: 4".into(),
        embedding: vec![0.125, -0.5, 0.3, 1e-7],
        id: None,
    }
}

/// A ring of 120 concepts with chords, plus the words used below.
pub fn demo_graph() -> KnowledgeGraph {
    let mut b = GraphBuilder::new();
    let t = b.node_type("concept");
    let rels: Vec<usize> = ["related_to", "is_a", "antonym"]
        .iter()
        .map(|r| b.relation(r))
        .collect();
    let words = [
        "river", "bank", "money", "water", "fish", "boat", "bridge", "loan",
    ];
    let mut ids: Vec<usize> = words.iter().map(|w| b.node(w, t)).collect();
    for i in 0..120 {
        ids.push(b.node(&format!("concept {i}"), t));
    }
    let n = ids.len();
    for i in 0..n {
        b.edge(ids[i], ids[(i + 1) % n], rels[i % 3]);
        b.edge(ids[i], ids[(i * 7 + 3) % n], rels[(i + 1) % 3]);
        if i < words.len() {
            for k in 0..12 {
                b.edge(
                    ids[i],
                    ids[words.len() + (i * 13 + k * 9) % 120],
                    rels[k % 3],
                );
            }
        }
    }
    b.build().unwrap()
}

/// Untrained small model over [`demo_graph`] with offline embedder and
/// scorer; answers `options`-way questions.
pub fn demo_pipeline(options: usize) -> Pipeline {
    let graph = Arc::new(demo_graph());
    let embedder = Arc::new(HashEmbedder::with_dimension(32));
    let cfg = GatConfig {
        hidden: 8,
        layers: 2,
        answer_hidden: 8,
        ..model_config_for(&graph, 32, options)
    };
    let model = Arc::new(GatParams::init(cfg, 5).expect("valid demo config"));
    Pipeline::new(graph, model, Arc::new(HashScorer::new(1)), embedder)
        .expect("compatible demo pipeline")
}

/// Random graph with nodes labelled `w0, w1, ...`, one node type and
/// `relations` relation types. Duplicate edges are dropped.
pub fn random_kg(seed: u64, nodes: usize, edges: usize, relations: usize) -> KnowledgeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new();
    let t = b.node_type("concept");
    let rels: Vec<usize> = (0..relations.max(1))
        .map(|r| b.relation(&format!("r{r}")))
        .collect();
    let ids: Vec<usize> = (0..nodes).map(|i| b.node(&format!("w{i}"), t)).collect();
    if nodes > 1 {
        for _ in 0..edges {
            let s = rng.random_range(0..nodes);
            let d = rng.random_range(0..nodes);
            if s != d {
                b.edge(ids[s], ids[d], rels[rng.random_range(0..rels.len())]);
            }
        }
    }
    b.build().expect("random graph is well formed")
}

/// Brute-force reference implementations.
pub mod oracle {
    use crate::error::Result;
    use crate::kg::{KnowledgeGraph, NodeId};
    use crate::prune::{score_node, QaContext, RelevanceScorer};
    use crate::retrieval::{cosine, RetrievalIndex};

    /// Hop distance of every node from the nearest seed (`None` if farther
    /// than `hops`), by repeated relaxation over the undirected edge list.
    pub fn hop_distances(
        graph: &KnowledgeGraph,
        seeds: &[NodeId],
        hops: usize,
    ) -> Vec<Option<usize>> {
        let mut d: Vec<Option<usize>> = vec![None; graph.node_count()];
        for &s in seeds {
            d[s] = Some(0);
        }
        for _ in 0..hops {
            let prev = d.clone();
            for e in graph.edges() {
                for (a, b) in [(e.src, e.dst), (e.dst, e.src)] {
                    if let Some(da) = prev[a] {
                        if d[b].is_none_or(|db| db > da + 1) {
                            d[b] = Some(da + 1);
                        }
                    }
                }
            }
        }
        d
    }

    /// Kept node ids, ascending: score every node within `hops` of a seed,
    /// sort the whole pool by (score desc, id asc), keep the first `budget`.
    pub fn prune_nodes(
        graph: &KnowledgeGraph,
        seeds: &[NodeId],
        qa: &QaContext,
        scorer: &dyn RelevanceScorer,
        budget: usize,
        hops: usize,
    ) -> Result<Vec<NodeId>> {
        let dist = hop_distances(graph, seeds, hops);
        let mut scored = Vec::new();
        for (id, d) in dist.iter().enumerate() {
            if d.is_some() {
                scored.push((id, score_node(graph, id, qa, scorer)?));
            }
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut kept: Vec<NodeId> = scored.into_iter().take(budget).map(|p| p.0).collect();
        kept.sort_unstable();
        Ok(kept)
    }

    /// Full sort of the index by (cosine desc, id asc).
    pub fn top_m(index: &RetrievalIndex, query: &[f64], m: usize) -> Result<Vec<(String, f64)>> {
        let mut all = index
            .entries()
            .iter()
            .map(|e| Ok((e.id.clone(), cosine(&e.vector, query)?)))
            .collect::<Result<Vec<_>>>()?;
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        all.truncate(m);
        Ok(all)
    }
}
