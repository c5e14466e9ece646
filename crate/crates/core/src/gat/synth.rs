//! Planted-signal task: every graph holds one "signal" node whose type names
//! the correct option. It is the only marker node with high relevance and
//! the only one tied to the question node by relation 0; decoy markers of
//! random types are scattered elsewhere.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::prune::{ElementEdge, ElementGraph, ElementNode};

use super::params::GatConfig;
use super::train::GatExample;

pub const SIGNAL_LABEL: &str = "signal";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub nodes: usize,
    pub options: usize,
    pub lm_dim: usize,
    pub relation_types: usize,
    pub decoys: usize,
    /// Random edges added on top of the spanning tree.
    pub extra_edges: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            nodes: 16,
            options: 4,
            lm_dim: 8,
            relation_types: 3,
            decoys: 3,
            extra_edges: 8,
        }
    }
}

impl SynthConfig {
    /// question, context, then one marker type per option
    pub fn node_types(&self) -> usize {
        2 + self.options
    }

    /// A model configuration sized for this task.
    pub fn model_config(&self) -> GatConfig {
        GatConfig::new(
            self.node_types(),
            self.relation_types,
            self.lm_dim,
            self.options,
        )
    }
}

/// `count` instances; instance `i` depends only on `(seed, i)`.
pub fn planted_signal(cfg: &SynthConfig, count: usize, seed: u64) -> Vec<GatExample> {
    (0..count)
        .map(|i| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i as u64);
            instance(cfg, &mut rng)
        })
        .collect()
}

/// Train and dev sets drawn from disjoint seed streams.
pub fn planted_split(
    cfg: &SynthConfig,
    train: usize,
    dev: usize,
    seed: u64,
) -> (Vec<GatExample>, Vec<GatExample>) {
    (
        planted_signal(cfg, train, seed),
        planted_signal(cfg, dev, !seed),
    )
}

fn instance(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> GatExample {
    let n = cfg.nodes.max(3);
    let gold = rng.random_range(0..cfg.options);
    let decoys = cfg.decoys.min(n - 2);
    // (label, type, relevance)
    let mut spec: Vec<(String, usize, f64)> = Vec::with_capacity(n);
    spec.push((
        SIGNAL_LABEL.to_string(),
        2 + gold,
        rng.random_range(0.8..0.99),
    ));
    spec.push(("question".to_string(), 0, rng.random_range(0.5..0.99)));
    for d in 0..decoys {
        let k = rng.random_range(0..cfg.options);
        spec.push((format!("decoy{d}"), 2 + k, rng.random_range(0.01..0.6)));
    }
    let mut c = 0;
    while spec.len() < n {
        spec.push((format!("context{c}"), 1, rng.random_range(0.01..0.99)));
        c += 1;
    }
    spec.shuffle(rng);
    let signal = spec
        .iter()
        .position(|s| s.0 == SIGNAL_LABEL)
        .expect("signal present");
    let question = spec
        .iter()
        .position(|s| s.0 == "question")
        .expect("question present");

    let rel = cfg.relation_types.max(1);
    let other = |rng: &mut ChaCha8Rng| if rel > 1 { rng.random_range(1..rel) } else { 0 };
    let mut edges = vec![ElementEdge {
        src: signal,
        dst: question,
        relation: 0,
    }];
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    for i in 1..n {
        let a = perm[i];
        let b = perm[rng.random_range(0..i)];
        if (a == signal && b == question) || (a == question && b == signal) {
            continue;
        }
        edges.push(ElementEdge {
            src: a,
            dst: b,
            relation: other(rng),
        });
    }
    for _ in 0..cfg.extra_edges {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a == b || (a.min(b) == signal.min(question) && a.max(b) == signal.max(question)) {
            continue;
        }
        edges.push(ElementEdge {
            src: a,
            dst: b,
            relation: other(rng),
        });
    }

    let mut node_types = vec!["question".to_string(), "context".to_string()];
    node_types.extend((0..cfg.options).map(|k| format!("marker_{k}")));
    let mut relation_types = vec!["signals".to_string()];
    relation_types.extend((1..rel).map(|r| format!("rel_{r}")));
    let graph = ElementGraph {
        node_types,
        relation_types,
        nodes: spec
            .into_iter()
            .enumerate()
            .map(|(i, (label, node_type, relevance))| ElementNode {
                kg_id: i,
                label,
                node_type,
                relevance,
            })
            .collect(),
        edges,
    };
    let context = (0..cfg.lm_dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    GatExample {
        graph,
        context,
        gold,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_well_formed() {
        let cfg = SynthConfig::default();
        let a = planted_signal(&cfg, 5, 42);
        let b = planted_signal(&cfg, 5, 42);
        assert_eq!(a, b);
        for ex in &a {
            ex.graph.validate().unwrap();
            assert_eq!(ex.graph.nodes.len(), cfg.nodes);
            let sig: Vec<_> = ex
                .graph
                .nodes
                .iter()
                .filter(|n| n.label == SIGNAL_LABEL)
                .collect();
            assert_eq!(sig.len(), 1);
            assert_eq!(sig[0].node_type, 2 + ex.gold);
            let rel0 = ex.graph.edges.iter().filter(|e| e.relation == 0).count();
            assert_eq!(rel0, 1);
        }
        let (tr, dev) = planted_split(&cfg, 3, 3, 42);
        assert_ne!(tr, dev);
    }
}
