//! Knowledge-graph store: triple loading, entity grounding, and hop-bounded
//! neighborhood extraction.
//!
//! Nodes are deduplicated by label and numbered in order of first
//! appearance. Edges are stored directed but reachability is undirected.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Header tag of the persisted graph format.
pub const GRAPH_FORMAT_TAG: &str = "kgexplain-graph";
pub const GRAPH_FORMAT_VERSION: u32 = 1;

/// Longest label n-gram considered when grounding text.
pub const MAX_GROUNDING_NGRAM: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub label: String,
    pub node_type: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub src: NodeId,
    pub dst: NodeId,
    pub relation: usize,
}

#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    node_types: Vec<String>,
    relations: Vec<String>,
    /// Incident edge indices per node, both directions.
    incident: Vec<Vec<usize>>,
    /// Normalized label key to node ids.
    label_keys: HashMap<String, Vec<NodeId>>,
    max_key_tokens: usize,
}

impl PartialEq for KnowledgeGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes
            && self.edges == other.edges
            && self.node_types == other.node_types
            && self.relations == other.relations
    }
}

impl KnowledgeGraph {
    /// Builds a graph from explicit parts, checking every structural invariant.
    pub fn from_parts(
        node_types: Vec<String>,
        relations: Vec<String>,
        nodes: Vec<Node>,
        edges: Vec<Edge>,
    ) -> Result<Self> {
        for (id, n) in nodes.iter().enumerate() {
            if n.node_type >= node_types.len() {
                return Err(Error::invalid(format!(
                    "node {id} has type {} but only {} node types exist",
                    n.node_type,
                    node_types.len()
                )));
            }
        }
        for e in &edges {
            if e.src >= nodes.len() || e.dst >= nodes.len() {
                return Err(Error::invalid(format!(
                    "edge {}->{} references a missing node",
                    e.src, e.dst
                )));
            }
            if e.relation >= relations.len() {
                return Err(Error::invalid(format!(
                    "edge {}->{} has relation {} but only {} relation types exist",
                    e.src,
                    e.dst,
                    e.relation,
                    relations.len()
                )));
            }
        }
        let mut incident = vec![Vec::new(); nodes.len()];
        for (idx, e) in edges.iter().enumerate() {
            incident[e.src].push(idx);
            if e.dst != e.src {
                incident[e.dst].push(idx);
            }
        }
        let mut label_keys: HashMap<String, Vec<NodeId>> = HashMap::new();
        let mut max_key_tokens = 0;
        for (id, n) in nodes.iter().enumerate() {
            let tokens = normalize_tokens(&n.label);
            if tokens.is_empty() || tokens.len() > MAX_GROUNDING_NGRAM {
                continue;
            }
            max_key_tokens = max_key_tokens.max(tokens.len());
            label_keys.entry(tokens.join(" ")).or_default().push(id);
        }
        Ok(Self {
            nodes,
            edges,
            node_types,
            relations,
            incident,
            label_keys,
            max_key_tokens,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn node_type_count(&self) -> usize {
        self.node_types.len()
    }

    pub fn relation_type_count(&self) -> usize {
        self.relations.len()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_type_names(&self) -> &[String] {
        &self.node_types
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relations
    }

    /// Edge indices touching `id` in either direction.
    pub fn incident_edges(&self, id: NodeId) -> &[usize] {
        &self.incident[id]
    }

    pub fn find_label(&self, label: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.label == label)
    }
}

/// Incremental construction with label and edge deduplication.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    node_index: HashMap<String, NodeId>,
    node_types: Vec<String>,
    relations: Vec<String>,
    relation_index: HashMap<String, usize>,
    edges: Vec<Edge>,
    edge_set: HashSet<Edge>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_type(&mut self, name: &str) -> usize {
        if let Some(i) = self.node_types.iter().position(|t| t == name) {
            return i;
        }
        self.node_types.push(name.to_string());
        self.node_types.len() - 1
    }

    pub fn relation(&mut self, name: &str) -> usize {
        if let Some(&i) = self.relation_index.get(name) {
            return i;
        }
        let i = self.relations.len();
        self.relations.push(name.to_string());
        self.relation_index.insert(name.to_string(), i);
        i
    }

    /// Returns the existing id when the label was seen before; the type of
    /// the first occurrence is kept.
    pub fn node(&mut self, label: &str, node_type: usize) -> NodeId {
        if let Some(&id) = self.node_index.get(label) {
            return id;
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            label: label.to_string(),
            node_type,
        });
        self.node_index.insert(label.to_string(), id);
        id
    }

    /// Adds a directed edge; returns false if it was already present.
    pub fn edge(&mut self, src: NodeId, dst: NodeId, relation: usize) -> bool {
        let e = Edge { src, dst, relation };
        if self.edge_set.insert(e) {
            self.edges.push(e);
            true
        } else {
            false
        }
    }

    pub fn build(self) -> Result<KnowledgeGraph> {
        KnowledgeGraph::from_parts(self.node_types, self.relations, self.nodes, self.edges)
    }
}

/// Loads a `relation \t head \t tail` triple file.
pub fn load_triples(path: impl AsRef<Path>) -> Result<KnowledgeGraph> {
    let file = File::open(path)?;
    read_triples(BufReader::new(file))
}

pub fn read_triples(reader: impl BufRead) -> Result<KnowledgeGraph> {
    let mut builder = GraphBuilder::new();
    let concept = builder.node_type("concept");
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let (rel, head, tail) = (fields[0].trim(), fields[1].trim(), fields[2].trim());
        if rel.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty relation".into(),
            });
        }
        if head.is_empty() || tail.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty node label".into(),
            });
        }
        let r = builder.relation(rel);
        let h = builder.node(head, concept);
        let t = builder.node(tail, concept);
        builder.edge(h, t, r);
    }
    builder.build()
}

/// Lowercases and splits on anything that is not alphanumeric or an
/// apostrophe; underscores therefore act as word separators.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Links text to graph nodes by matching normalized label n-grams (n ≤ 3),
/// scanning left to right and preferring the longest match at each position.
pub fn ground_entities(text: &str, graph: &KnowledgeGraph) -> Vec<NodeId> {
    let tokens = normalize_tokens(text);
    let max_n = graph.max_key_tokens.min(MAX_GROUNDING_NGRAM);
    let mut found = std::collections::BTreeSet::new();
    let mut i = 0;
    while i < tokens.len() {
        let mut advanced = false;
        for n in (1..=max_n.min(tokens.len() - i)).rev() {
            let key = tokens[i..i + n].join(" ");
            if let Some(ids) = graph.label_keys.get(&key) {
                found.extend(ids.iter().copied());
                i += n;
                advanced = true;
                break;
            }
        }
        if !advanced {
            i += 1;
        }
    }
    found.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhood {
    /// Member node ids, ascending.
    pub nodes: Vec<NodeId>,
    /// Indices into [`KnowledgeGraph::edges`] of the induced edges, ascending.
    pub edges: Vec<usize>,
    pub hop_distance: BTreeMap<NodeId, usize>,
}

impl Neighborhood {
    pub fn contains(&self, id: NodeId) -> bool {
        self.hop_distance.contains_key(&id)
    }
}

/// Breadth-first expansion from `seeds`, treating edges as undirected.
pub fn neighborhood(graph: &KnowledgeGraph, seeds: &[NodeId], hops: usize) -> Result<Neighborhood> {
    if seeds.is_empty() {
        return Err(Error::invalid("neighborhood requires at least one seed"));
    }
    let mut dist: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut queue = VecDeque::new();
    for &s in seeds {
        if s >= graph.node_count() {
            return Err(Error::invalid(format!(
                "seed {s} is not a node of the graph"
            )));
        }
        if dist.insert(s, 0).is_none() {
            queue.push_back(s);
        }
    }
    while let Some(u) = queue.pop_front() {
        let d = dist[&u];
        if d == hops {
            continue;
        }
        for &ei in graph.incident_edges(u) {
            let e = graph.edges[ei];
            let v = if e.src == u { e.dst } else { e.src };
            if let std::collections::btree_map::Entry::Vacant(slot) = dist.entry(v) {
                slot.insert(d + 1);
                queue.push_back(v);
            }
        }
    }
    let nodes: Vec<NodeId> = dist.keys().copied().collect();
    let edges = induced_edges(graph, &nodes, |id| dist.contains_key(&id));
    Ok(Neighborhood {
        nodes,
        edges,
        hop_distance: dist,
    })
}

/// Indices of edges whose endpoints both satisfy `member`, ascending.
pub(crate) fn induced_edges(
    graph: &KnowledgeGraph,
    nodes: &[NodeId],
    member: impl Fn(NodeId) -> bool,
) -> Vec<usize> {
    let mut out: Vec<usize> = nodes
        .iter()
        .flat_map(|&u| graph.incident_edges(u).iter().copied())
        .filter(|&ei| {
            let e = graph.edges[ei];
            member(e.src) && member(e.dst)
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Writes the line-delimited persisted form:
///
/// ```text
/// kgexplain-graph <version> <nodes> <edges> <node-types> <relations>
/// T <node-type name>            (one per node type, in index order)
/// R <relation name>             (one per relation, in index order)
/// N <label> \t <node-type>      (one per node, in id order)
/// E <src> \t <dst> \t <rel>     (one per edge)
/// ```
pub fn write_graph(graph: &KnowledgeGraph, out: impl Write) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(
        w,
        "{GRAPH_FORMAT_TAG} {GRAPH_FORMAT_VERSION} {} {} {} {}",
        graph.node_count(),
        graph.edge_count(),
        graph.node_type_count(),
        graph.relation_type_count()
    )?;
    for t in &graph.node_types {
        writeln!(w, "T {t}")?;
    }
    for r in &graph.relations {
        writeln!(w, "R {r}")?;
    }
    for n in &graph.nodes {
        writeln!(w, "N {}\t{}", n.label, n.node_type)?;
    }
    for e in &graph.edges {
        writeln!(w, "E {}\t{}\t{}", e.src, e.dst, e.relation)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_graph(graph: &KnowledgeGraph, path: impl AsRef<Path>) -> Result<()> {
    write_graph(graph, File::create(path)?)
}

pub fn read_graph(input: impl Read) -> Result<KnowledgeGraph> {
    let reader = BufReader::new(input);
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Format("empty graph file".into()))?;
    let header = header?;
    let parts: Vec<&str> = header.split(' ').collect();
    if parts.len() != 6 || parts[0] != GRAPH_FORMAT_TAG {
        return Err(Error::Format(format!("bad graph header: {header:?}")));
    }
    let version: u32 = parts[1]
        .parse()
        .map_err(|_| Error::Format("bad version".into()))?;
    if version != GRAPH_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported graph version {version}"
        )));
    }
    let counts: Vec<usize> = parts[2..]
        .iter()
        .map(|p| {
            p.parse()
                .map_err(|_| Error::Format(format!("bad count {p:?}")))
        })
        .collect::<Result<_>>()?;
    let (n_nodes, n_edges, n_types, n_rels) = (counts[0], counts[1], counts[2], counts[3]);

    let mut node_types = Vec::with_capacity(n_types);
    let mut relations = Vec::with_capacity(n_rels);
    let mut nodes = Vec::with_capacity(n_nodes);
    let mut edges = Vec::with_capacity(n_edges);
    for (idx, line) in lines {
        let line = line?;
        let line_no = idx + 1;
        let bad = |m: &str| Error::Parse {
            line: line_no,
            message: m.to_string(),
        };
        let (tag, rest) = line.split_at(line.len().min(2));
        match tag {
            "T " => node_types.push(rest.to_string()),
            "R " => relations.push(rest.to_string()),
            "N " => {
                let (label, ty) = rest.rsplit_once('\t').ok_or_else(|| bad("node line"))?;
                let node_type = ty.parse().map_err(|_| bad("node type"))?;
                nodes.push(Node {
                    label: label.to_string(),
                    node_type,
                });
            }
            "E " => {
                let f: Vec<usize> = rest
                    .split('\t')
                    .map(|x| x.parse().map_err(|_| bad("edge field")))
                    .collect::<Result<_>>()?;
                if f.len() != 3 {
                    return Err(bad("edge line needs 3 fields"));
                }
                edges.push(Edge {
                    src: f[0],
                    dst: f[1],
                    relation: f[2],
                });
            }
            _ => return Err(bad("unknown record tag")),
        }
    }
    if nodes.len() != n_nodes
        || edges.len() != n_edges
        || node_types.len() != n_types
        || relations.len() != n_rels
    {
        return Err(Error::Format("record counts do not match header".into()));
    }
    KnowledgeGraph::from_parts(node_types, relations, nodes, edges)
}

pub fn open_graph(path: impl AsRef<Path>) -> Result<KnowledgeGraph> {
    read_graph(File::open(path)?)
}

/// Converts ConceptNet's assertion CSV (tab separated: uri, relation, head,
/// tail, metadata) to the triple format, keeping only edges whose endpoints
/// are both in `language`. Returns the number of triples written.
pub fn import_conceptnet(input: impl BufRead, out: impl Write, language: &str) -> Result<usize> {
    let mut w = BufWriter::new(out);
    let prefix = format!("/c/{language}/");
    let mut seen = HashSet::new();
    let mut written = 0;
    for line in input.lines() {
        let line = line?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 4 {
            continue;
        }
        let (Some(head), Some(tail)) = (
            fields[2].strip_prefix(&prefix),
            fields[3].strip_prefix(&prefix),
        ) else {
            continue;
        };
        let rel = fields[1]
            .trim_start_matches("/r/")
            .trim_end_matches('/')
            .to_lowercase();
        let concept = |s: &str| s.split('/').next().unwrap_or("").to_string();
        let (h, t) = (concept(head), concept(tail));
        if rel.is_empty() || h.is_empty() || t.is_empty() {
            continue;
        }
        if seen.insert((rel.clone(), h.clone(), t.clone())) {
            writeln!(w, "{rel}\t{h}\t{t}")?;
            written += 1;
        }
    }
    w.flush()?;
    Ok(written)
}
