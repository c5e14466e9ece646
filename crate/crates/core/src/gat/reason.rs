use serde::{Deserialize, Serialize};

use crate::dataset::TOPK_COUNT;
use crate::error::{Error, Result};
use crate::prune::ElementGraph;

use super::model::AttentionMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonElement {
    /// Index into the element graph.
    pub node: usize,
    pub label: String,
    pub mass: f64,
}

/// Nodes ranked by the attention mass they receive in the last layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonElements {
    pub ranked: Vec<ReasonElement>,
}

impl ReasonElements {
    pub fn labels(&self) -> Vec<String> {
        self.ranked.iter().map(|r| r.label.clone()).collect()
    }

    /// The first `TOPK_COUNT` labels, as used in explanation prompts.
    pub fn top_labels(&self) -> Vec<String> {
        self.ranked
            .iter()
            .take(TOPK_COUNT)
            .map(|r| r.label.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.ranked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }
}

/// Ranks nodes by incoming final-layer attention mass (descending, lower
/// index first on ties) and keeps the first `n`.
pub fn extract_reason_elements(
    attention: &AttentionMap,
    graph: &ElementGraph,
    n: usize,
) -> Result<ReasonElements> {
    if graph.nodes.is_empty() {
        return Err(Error::InvalidArgument("element graph has no nodes".into()));
    }
    if attention.node_count != graph.nodes.len() {
        return Err(Error::InvalidArgument(format!(
            "attention covers {} nodes but the graph has {}",
            attention.node_count,
            graph.nodes.len()
        )));
    }
    let Some(last) = attention.layers.len().checked_sub(1) else {
        return Err(Error::InvalidArgument("attention map has no layers".into()));
    };
    let mass = attention.incoming_mass(last);
    let mut order: Vec<usize> = (0..mass.len()).collect();
    order.sort_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b)));
    order.truncate(n);
    Ok(ReasonElements {
        ranked: order
            .into_iter()
            .map(|i| ReasonElement {
                node: i,
                label: graph.nodes[i].label.clone(),
                mass: mass[i],
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gat::model::MessageEdge;
    use crate::prune::ElementNode;

    fn graph(n: usize) -> ElementGraph {
        ElementGraph {
            node_types: vec!["context".into()],
            relation_types: vec!["r".into()],
            nodes: (0..n)
                .map(|i| ElementNode {
                    kg_id: i,
                    label: format!("c{i}"),
                    node_type: 0,
                    relevance: 0.5,
                })
                .collect(),
            edges: vec![],
        }
    }

    #[test]
    fn star_hub_has_maximal_mass() {
        // leaves 1..4 attend only to hub 0; the hub spreads evenly
        let mut edges = Vec::new();
        let mut alpha = Vec::new();
        for leaf in 1..5 {
            edges.push(MessageEdge {
                target: leaf,
                source: 0,
                relation: 0,
            });
            alpha.push(1.0);
            edges.push(MessageEdge {
                target: 0,
                source: leaf,
                relation: 1,
            });
            alpha.push(0.25);
        }
        let att = AttentionMap {
            node_count: 5,
            edges,
            layers: vec![alpha],
        };
        let re = extract_reason_elements(&att, &graph(5), 50).unwrap();
        assert_eq!(re.ranked[0].label, "c0");
        assert_eq!(re.len(), 5);
        let total: f64 = re.ranked.iter().map(|r| r.mass).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(re.top_labels(), vec!["c0", "c1", "c2", "c3", "c4"]);
    }

    #[test]
    fn equal_masses_fall_back_to_index_order() {
        let att = AttentionMap {
            node_count: 3,
            edges: vec![],
            layers: vec![vec![]],
        };
        let re = extract_reason_elements(&att, &graph(3), 2).unwrap();
        assert_eq!(re.labels(), vec!["c0", "c1"]);
        assert!(extract_reason_elements(&att, &graph(0), 2).is_err());
    }
}
