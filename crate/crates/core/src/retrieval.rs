//! Exact cosine-similarity retrieval of dataset instances and
//! debugger-score-weighted explanation selection.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::ExplanationInstance;
use crate::debugger::{parse_scores, DebuggerScore};
use crate::error::{Error, Result};
use crate::explainer::{format_options, STAGE1_MARKER};
use crate::par::{self, Execution};
use crate::prune::QaContext;

pub const DEFAULT_DEMO_COUNT: usize = 3;

const INDEX_MAGIC: &[u8; 8] = b"KGXINDEX";
pub const INDEX_FORMAT_VERSION: u32 = 1;

/// Cosine similarity; errors on zero vectors and dimension mismatches.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    Ok(dot(u, v) / (nu * nv))
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub vector: Vec<f64>,
}

/// Stored QA embeddings with cached unit-norm copies.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    model_id: String,
    dimension: usize,
    entries: Vec<IndexEntry>,
    unit: Vec<Vec<f64>>,
}

impl PartialEq for RetrievalIndex {
    fn eq(&self, other: &Self) -> bool {
        self.model_id == other.model_id
            && self.dimension == other.dimension
            && self.entries == other.entries
    }
}

impl RetrievalIndex {
    pub fn new(model_id: impl Into<String>, dimension: usize) -> Self {
        Self {
            model_id: model_id.into(),
            dimension,
            entries: Vec::new(),
            unit: Vec::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dimension {
            return Err(Error::invalid(format!(
                "vector has dimension {} but the index stores {}",
                vector.len(),
                self.dimension
            )));
        }
        let n = norm(&vector);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::invalid("index vectors must be finite and nonzero"));
        }
        self.unit.push(vector.iter().map(|x| x / n).collect());
        self.entries.push(IndexEntry {
            id: id.into(),
            vector,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    /// Exact top-m by cosine, descending; ties go to the smaller id.
    pub fn top_m(&self, query: &[f64], m: usize, exec: Execution) -> Result<Vec<(String, f64)>> {
        if m < 1 {
            return Err(Error::invalid("m must be at least 1"));
        }
        if self.is_empty() {
            return Err(Error::invalid("the index is empty"));
        }
        if query.len() != self.dimension {
            return Err(Error::invalid(format!(
                "query has dimension {} but the index stores {}",
                query.len(),
                self.dimension
            )));
        }
        let qn = norm(query);
        if qn == 0.0 {
            return Err(Error::invalid("query embedding is a zero vector"));
        }
        let q: Vec<f64> = query.iter().map(|x| x / qn).collect();
        let sims = par::map(exec, &self.unit, |u| dot(u, &q));
        let mut ranked: Vec<(usize, f64)> = sims.into_iter().enumerate().collect();
        let cmp = |a: &(usize, f64), b: &(usize, f64)| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.entries[a.0].id.cmp(&self.entries[b.0].id))
        };
        let k = m.min(ranked.len());
        if k < ranked.len() {
            ranked.select_nth_unstable_by(k - 1, cmp);
            ranked.truncate(k);
        }
        ranked.sort_by(cmp);
        Ok(ranked
            .into_iter()
            .map(|(i, s)| (self.entries[i].id.clone(), s))
            .collect())
    }

    /// Binary layout, little endian:
    ///
    /// ```text
    /// magic "KGXINDEX" | u32 version | u32 dimension | u32 len + model id bytes
    /// u64 count | count × (u32 len + id bytes, dimension × f64)
    /// ```
    pub fn write(&self, out: impl Write) -> Result<()> {
        let mut w = BufWriter::new(out);
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.dimension as u32).to_le_bytes())?;
        write_str(&mut w, &self.model_id)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            write_str(&mut w, &e.id)?;
            for x in &e.vector {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(input: impl Read) -> Result<Self> {
        let mut r = BufReader::new(input);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::Format("not a retrieval index".into()));
        }
        let version = read_u32(&mut r)?;
        if version != INDEX_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported index version {version}"
            )));
        }
        let dimension = read_u32(&mut r)? as usize;
        let model_id = read_str(&mut r)?;
        let mut count_bytes = [0u8; 8];
        r.read_exact(&mut count_bytes)?;
        let count = u64::from_le_bytes(count_bytes);
        let mut index = Self::new(model_id, dimension);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            let id = read_str(&mut r)?;
            let mut v = Vec::with_capacity(dimension);
            for _ in 0..dimension {
                r.read_exact(&mut buf)?;
                v.push(f64::from_le_bytes(buf));
            }
            index.insert(id, v)?;
        }
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(File::open(path)?)
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::Format("index string is not UTF-8".into()))
}

/// Per-dimension preference weights for explanation selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionWeights {
    pub faithfulness: f64,
    pub completeness: f64,
    pub accuracy: f64,
    pub overall: f64,
}

impl Default for SelectionWeights {
    fn default() -> Self {
        Self {
            faithfulness: 1.0,
            completeness: 1.0,
            accuracy: 1.0,
            overall: 0.0,
        }
    }
}

impl SelectionWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [
            self.faithfulness,
            self.completeness,
            self.accuracy,
            self.overall,
        ];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::invalid(
                "selection weights must be finite and non-negative",
            ));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(Error::invalid(
                "at least one selection weight must be positive",
            ));
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            faithfulness: self.faithfulness * c,
            completeness: self.completeness * c,
            accuracy: self.accuracy * c,
            overall: self.overall * c,
        }
    }

    /// Sum over dimensions with nonzero weight.
    pub fn weighted(&self, s: &DebuggerScore) -> f64 {
        [
            (self.faithfulness, s.faithfulness),
            (self.completeness, s.completeness),
            (self.accuracy, s.accuracy),
            (self.overall, s.overall()),
        ]
        .iter()
        .filter(|(w, _)| *w != 0.0)
        .map(|(w, v)| w * v)
        .sum()
    }

    /// Parses `f,c,a,o`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<f64> = text
            .split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad weight {p:?}")))
            })
            .collect::<Result<_>>()?;
        let [faithfulness, completeness, accuracy, overall] = parts[..] else {
            return Err(Error::invalid("expected four comma-separated weights"));
        };
        let w = Self {
            faithfulness,
            completeness,
            accuracy,
            overall,
        };
        w.validate()?;
        Ok(w)
    }
}

/// Weighted sums this close (relative) count as equal, so that rescaling
/// the weights cannot turn an exact tie into a win by rounding.
pub const SELECTION_TIE_TOLERANCE: f64 = 1e-9;

fn tied(a: f64, b: f64) -> bool {
    (a - b).abs() <= SELECTION_TIE_TOLERANCE * a.abs().max(b.abs())
}

/// Argmax of the weighted debugger-score; ties go to the smaller id.
pub fn select_explanation<Id: Ord + Clone>(
    candidates: &[(Id, DebuggerScore)],
    weights: &SelectionWeights,
) -> Result<Id> {
    weights.validate()?;
    let mut best: Option<(&Id, f64)> = None;
    for (id, score) in candidates {
        let v = weights.weighted(score);
        best = match best {
            Some((bid, bv)) if tied(bv, v) => Some(if bid <= id { (bid, bv) } else { (id, v) }),
            Some((bid, bv)) if bv > v => Some((bid, bv)),
            _ => Some((id, v)),
        };
    }
    best.map(|(id, _)| id.clone())
        .ok_or_else(|| Error::invalid("no candidate explanations"))
}

/// A dataset grouped by question, with one index vector per question.
#[derive(Debug, Clone)]
pub struct DemoStore {
    pub instances: Vec<ExplanationInstance>,
    /// Question id to indices into `instances`.
    pub groups: BTreeMap<String, Vec<usize>>,
}

impl DemoStore {
    pub fn new(instances: Vec<ExplanationInstance>) -> Self {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, inst) in instances.iter().enumerate() {
            groups.entry(inst.question_id()).or_default().push(i);
        }
        Self { instances, groups }
    }

    /// Builds an index from the stored embeddings; the first record of each
    /// question supplies its vector.
    pub fn build_index(&self, model_id: &str) -> Result<RetrievalIndex> {
        let dim = self
            .instances
            .first()
            .map(|i| i.embedding.len())
            .ok_or_else(|| Error::invalid("cannot index an empty dataset"))?;
        let mut index = RetrievalIndex::new(model_id, dim);
        for (qid, idxs) in &self.groups {
            index.insert(qid.clone(), self.instances[idxs[0]].embedding.clone())?;
        }
        Ok(index)
    }

    /// Best explanation of one question; records whose score does not parse
    /// are skipped.
    pub fn choose(&self, question_id: &str, weights: &SelectionWeights) -> Result<usize> {
        let idxs = self.groups.get(question_id).ok_or_else(|| {
            Error::invalid(format!("question {question_id} is not in the dataset"))
        })?;
        let candidates: Vec<(usize, DebuggerScore)> = idxs
            .iter()
            .filter_map(|&i| Some((i, parse_scores(&self.instances[i].debugger_score).ok()?)))
            .collect();
        select_explanation(&candidates, weights)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedDemo {
    pub rank: usize,
    pub question_id: String,
    pub similarity: f64,
    /// Index of the chosen record in the dataset.
    pub explanation: usize,
}

pub fn retrieve_demos(
    index: &RetrievalIndex,
    store: &DemoStore,
    query_embedding: &[f64],
    m: usize,
    weights: &SelectionWeights,
    exec: Execution,
) -> Result<Vec<RetrievedDemo>> {
    weights.validate()?;
    index
        .top_m(query_embedding, m, exec)?
        .into_iter()
        .enumerate()
        .map(|(rank, (qid, similarity))| {
            let explanation = store.choose(&qid, weights)?;
            Ok(RetrievedDemo {
                rank,
                question_id: qid,
                similarity,
                explanation,
            })
        })
        .collect()
}

/// Demonstrations in rank order, then the new query and the Stage-1
/// instruction.
pub fn build_icl_prompt(
    query: &QaContext,
    demos: &[(usize, &ExplanationInstance)],
) -> Result<String> {
    if demos.is_empty() {
        return Err(Error::invalid("at least one demonstration is required"));
    }
    let mut ordered: Vec<&(usize, &ExplanationInstance)> = demos.iter().collect();
    ordered.sort_by_key(|(rank, _)| *rank);
    let mut out = String::new();
    for (n, (_, inst)) in ordered.iter().enumerate() {
        let elements = inst
            .topk
            .iter()
            .map(|e| format!("\"{e}\""))
            .collect::<Vec<_>>()
            .join(", ");
        out.push_str(&format!(
            "Example {}:\nQuestion: {}\nAnswer Options: {}\nPredicted Answer: {}\nRanked Reason-elements: {}\nWhy: {}\nWhy not: {}\n\n",
            n + 1,
            inst.question,
            format_options(&inst.answers),
            inst.predicted_label,
            elements,
            inst.explanation_why,
            inst.explanation_why_not,
        ));
    }
    out.push_str(&format!(
        "Question: {}\nAnswer Options: {}\n{STAGE1_MARKER} Choose an answer, then explain the LM's reasoning process for selecting it over the other options. Provide concise explanations for why each reason-element supports it as the predicted choice. Focus on the LM's behavior and the significance of the Ranked Reason-elements. Your response should be short and concise.",
        query.question,
        format_options(&query.options),
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::reference_instance;

    #[test]
    fn cosine_hand_values() {
        assert!((cosine(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap() - 8.0 / 9.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[3.0, -4.0], &[3.0, -4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    }

    fn small_index() -> RetrievalIndex {
        let mut idx = RetrievalIndex::new("test", 2);
        idx.insert("b", vec![1.0, 0.0]).unwrap();
        idx.insert("a", vec![2.0, 0.0]).unwrap();
        idx.insert("c", vec![0.0, 1.0]).unwrap();
        idx
    }

    #[test]
    fn top_m_ties_and_bounds() {
        let idx = small_index();
        let r = idx.top_m(&[1.0, 0.0], 2, Execution::Sequential).unwrap();
        assert_eq!(r, vec![("a".into(), 1.0), ("b".into(), 1.0)]);
        assert_eq!(
            idx.top_m(&[1.0, 1.0], 10, Execution::Parallel)
                .unwrap()
                .len(),
            3
        );
        assert!(idx.top_m(&[1.0], 1, Execution::Sequential).is_err());
        assert!(idx.top_m(&[1.0, 0.0], 0, Execution::Sequential).is_err());
        assert!(RetrievalIndex::new("x", 2)
            .top_m(&[1.0, 0.0], 1, Execution::Sequential)
            .is_err());
    }

    #[test]
    fn index_file_round_trip() {
        let idx = small_index();
        let mut buf = Vec::new();
        idx.write(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"KGXINDEX");
        assert_eq!(RetrievalIndex::read(buf.as_slice()).unwrap(), idx);
        buf[8] = 9;
        assert!(RetrievalIndex::read(buf.as_slice()).is_err());
    }

    fn s(f: f64, c: f64, a: f64) -> DebuggerScore {
        DebuggerScore::new(f, c, a).unwrap()
    }

    #[test]
    fn selection() {
        let w = SelectionWeights::default();
        assert_eq!(select_explanation(&[(7, s(1.0, 1.0, 1.0))], &w).unwrap(), 7);
        // 11 vs 11: tie goes to the smaller id
        let tie = [(2, s(3.0, 5.0, 3.0)), (1, s(4.0, 3.0, 4.0))];
        assert_eq!(select_explanation(&tie, &w).unwrap(), 1);
        let win = [(1, s(4.0, 3.0, 4.0)), (2, s(3.0, 5.0, 4.0))];
        assert_eq!(select_explanation(&win, &w).unwrap(), 2);
        let zero = SelectionWeights {
            faithfulness: 0.0,
            completeness: 0.0,
            accuracy: 0.0,
            overall: 0.0,
        };
        assert!(select_explanation(&win, &zero).is_err());
        assert!(select_explanation::<usize>(&[], &w).is_err());
    }

    #[test]
    fn weights_parse() {
        assert_eq!(
            SelectionWeights::parse("1,1,1,0").unwrap(),
            SelectionWeights::default()
        );
        assert!(SelectionWeights::parse("0,0,0,0").is_err());
        assert!(SelectionWeights::parse("1,1").is_err());
        assert!(SelectionWeights::parse("1,-1,1,0").is_err());
    }

    #[test]
    fn icl_prompt_follows_rank() {
        let a = reference_instance();
        let mut b = reference_instance();
        b.question = "Where would you find a stapler?".into();
        let q = QaContext {
            question: "New question?".into(),
            options: vec!["x".into(), "y".into()],
            context_embedding: vec![],
        };
        let p = build_icl_prompt(&q, &[(1, &a), (0, &b)]).unwrap();
        let pos_b = p.find("stapler").unwrap();
        let pos_a = p.find("John carred").unwrap();
        assert!(pos_b < pos_a);
        assert_eq!(p.matches("Example ").count(), 2);
        assert!(p.trim_end().ends_with("short and concise."));
        let one = build_icl_prompt(&q, &[(0, &a)]).unwrap();
        assert_eq!(one.matches("Example ").count(), 1);
        assert!(one.find("Example 1").unwrap() < one.find("New question?").unwrap());
        assert!(build_icl_prompt(&q, &[]).is_err());
    }

    #[test]
    fn demo_store_groups_and_chooses() {
        let mut a = reference_instance();
        a.debugger_score = "Faithfulness: 2 | Completeness: 2 | Accuracy: 2".into();
        let b = reference_instance();
        let mut c = reference_instance();
        c.question = "Another question".into();
        c.embedding = vec![0.0, 1.0, 0.0, 0.0];
        let store = DemoStore::new(vec![a.clone(), b, c]);
        assert_eq!(store.groups.len(), 2);
        assert_eq!(
            store
                .choose(&a.question_id(), &SelectionWeights::default())
                .unwrap(),
            1
        );
        let index = store.build_index("m").unwrap();
        let demos = retrieve_demos(
            &index,
            &store,
            &a.embedding,
            5,
            &SelectionWeights::default(),
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(demos.len(), 2);
        assert_eq!(demos[0].question_id, a.question_id());
        assert!((demos[0].similarity - 1.0).abs() < 1e-12);
        assert_eq!(demos[0].explanation, 1);
    }
}
