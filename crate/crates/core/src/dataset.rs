//! Explanation instance records: line-delimited JSON I/O, validation,
//! word-count statistics, and manifest-driven splitting.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::debugger::parse_scores;
use crate::error::{Error, Result};

/// Reason-elements stored per instance.
pub const CONCEPT_COUNT: usize = 50;
/// Reason-elements shown to the generator.
pub const TOPK_COUNT: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationInstance {
    pub question: String,
    pub answers: Vec<String>,
    pub label: String,
    pub predicted_label: String,
    pub label_matched: bool,
    pub concept: Vec<String>,
    pub topk: Vec<String>,
    pub explanation_why: String,
    pub explanation_why_not: String,
    pub debugger_score: String,
    pub embedding: Vec<f64>,
    /// Explicit question identity; when absent a hash of the normalized
    /// question text is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

const FIELD_TYPES: [(&str, FieldKind); 11] = [
    ("question", FieldKind::Str),
    ("answers", FieldKind::StrList),
    ("label", FieldKind::Str),
    ("predicted_label", FieldKind::Str),
    ("label_matched", FieldKind::Bool),
    ("concept", FieldKind::StrList),
    ("topk", FieldKind::StrList),
    ("explanation_why", FieldKind::Str),
    ("explanation_why_not", FieldKind::Str),
    ("debugger_score", FieldKind::Str),
    ("embedding", FieldKind::FloatList),
];

#[derive(Clone, Copy)]
enum FieldKind {
    Str,
    StrList,
    Bool,
    FloatList,
}

impl FieldKind {
    fn accepts(self, v: &Value) -> bool {
        match self {
            FieldKind::Str => v.is_string(),
            FieldKind::Bool => v.is_boolean(),
            FieldKind::StrList => v.as_array().is_some_and(|a| a.iter().all(Value::is_string)),
            FieldKind::FloatList => v.as_array().is_some_and(|a| a.iter().all(Value::is_number)),
        }
    }

    fn name(self) -> &'static str {
        match self {
            FieldKind::Str => "string",
            FieldKind::StrList => "list of strings",
            FieldKind::Bool => "boolean",
            FieldKind::FloatList => "list of floats",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    LabelNotInAnswers,
    PredictedNotInAnswers,
    LabelMatchedInconsistent,
    ConceptCount,
    TopkMismatch,
    DebuggerScoreInvalid,
    EmptyExplanation,
}

impl ViolationKind {
    pub fn code(self) -> &'static str {
        match self {
            ViolationKind::LabelNotInAnswers => "label_not_in_answers",
            ViolationKind::PredictedNotInAnswers => "predicted_not_in_answers",
            ViolationKind::LabelMatchedInconsistent => "label_matched_inconsistent",
            ViolationKind::ConceptCount => "concept_count",
            ViolationKind::TopkMismatch => "topk_mismatch",
            ViolationKind::DebuggerScoreInvalid => "debugger_score_invalid",
            ViolationKind::EmptyExplanation => "empty_explanation",
        }
    }

    fn field(self) -> &'static str {
        match self {
            ViolationKind::LabelNotInAnswers => "label",
            ViolationKind::PredictedNotInAnswers => "predicted_label",
            ViolationKind::LabelMatchedInconsistent => "label_matched",
            ViolationKind::ConceptCount => "concept",
            ViolationKind::TopkMismatch => "topk",
            ViolationKind::DebuggerScoreInvalid => "debugger_score",
            ViolationKind::EmptyExplanation => "explanation_why",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.code(), self.detail)
    }
}

/// Checks every record invariant and returns all violations found.
pub fn validate(instance: &ExplanationInstance) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |kind, detail: String| out.push(Violation { kind, detail });
    if !instance.answers.contains(&instance.label) {
        push(
            ViolationKind::LabelNotInAnswers,
            format!("{:?} is not an answer option", instance.label),
        );
    }
    if !instance.answers.contains(&instance.predicted_label) {
        push(
            ViolationKind::PredictedNotInAnswers,
            format!("{:?} is not an answer option", instance.predicted_label),
        );
    }
    if instance.label_matched != (instance.predicted_label == instance.label) {
        push(
            ViolationKind::LabelMatchedInconsistent,
            format!(
                "label_matched={} but predicted {:?} vs label {:?}",
                instance.label_matched, instance.predicted_label, instance.label
            ),
        );
    }
    if instance.concept.len() != CONCEPT_COUNT {
        push(
            ViolationKind::ConceptCount,
            format!(
                "expected {CONCEPT_COUNT} reason-elements, found {}",
                instance.concept.len()
            ),
        );
    }
    let expected_topk = &instance.concept[..instance.concept.len().min(TOPK_COUNT)];
    if instance.topk.len() != TOPK_COUNT || instance.topk != expected_topk {
        push(
            ViolationKind::TopkMismatch,
            "topk must equal the first 5 reason-elements".into(),
        );
    }
    if let Err(e) = parse_scores(&instance.debugger_score) {
        push(ViolationKind::DebuggerScoreInvalid, e.to_string());
    }
    if instance.explanation_why.trim().is_empty() || instance.explanation_why_not.trim().is_empty()
    {
        push(
            ViolationKind::EmptyExplanation,
            "explanations must be nonempty".into(),
        );
    }
    out
}

impl ExplanationInstance {
    pub fn is_valid(&self) -> bool {
        validate(self).is_empty()
    }

    /// Stable identity used for splitting and retrieval.
    pub fn question_id(&self) -> String {
        self.id
            .clone()
            .unwrap_or_else(|| question_hash(&self.question))
    }
}

/// First 16 hex digits of SHA-256 over the whitespace-collapsed, lowercased
/// question.
pub fn question_hash(question: &str) -> String {
    let normalized = question
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    let digest = Sha256::digest(normalized.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReadMode {
    /// Field types and every record invariant.
    #[default]
    Strict,
    /// Field types only.
    SchemaOnly,
}

fn parse_record(line: &str, line_no: usize, mode: ReadMode) -> Result<ExplanationInstance> {
    let schema = |field: &str, message: String| Error::Schema {
        line: line_no,
        field: field.to_string(),
        message,
    };
    let value: Value = serde_json::from_str(line).map_err(|e| schema("<record>", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| schema("<record>", "record is not an object".into()))?;
    for (name, kind) in FIELD_TYPES {
        match obj.get(name) {
            None => return Err(schema(name, "missing".into())),
            Some(v) if !kind.accepts(v) => {
                return Err(schema(name, format!("expected {}", kind.name())))
            }
            _ => {}
        }
    }
    if let Some(id) = obj.get("id") {
        if !id.is_string() {
            return Err(schema("id", "expected string".into()));
        }
    }
    let inst: ExplanationInstance =
        serde_json::from_value(value).map_err(|e| schema("<record>", e.to_string()))?;
    if mode == ReadMode::Strict {
        if let Some(v) = validate(&inst).into_iter().next() {
            return Err(schema(v.kind.field(), v.to_string()));
        }
    }
    Ok(inst)
}

pub fn read_instances_from(
    reader: impl BufRead,
    mode: ReadMode,
) -> Result<Vec<ExplanationInstance>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line, idx + 1, mode)?);
    }
    Ok(out)
}

pub fn read_instances(path: impl AsRef<Path>) -> Result<Vec<ExplanationInstance>> {
    read_instances_with(path, ReadMode::Strict)
}

pub fn read_instances_with(
    path: impl AsRef<Path>,
    mode: ReadMode,
) -> Result<Vec<ExplanationInstance>> {
    read_instances_from(BufReader::new(File::open(path)?), mode)
}

pub fn write_instances_to(mut out: impl Write, instances: &[ExplanationInstance]) -> Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_instances(path: impl AsRef<Path>, instances: &[ExplanationInstance]) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp)?;
        let mut w = BufWriter::new(file);
        write_instances_to(&mut w, instances)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WordStats {
    pub count: usize,
    pub why: f64,
    pub why_not: f64,
    pub whole: f64,
}

impl WordStats {
    fn of(instances: &[&ExplanationInstance]) -> Self {
        let n = instances.len() as f64;
        let mean = |f: &dyn Fn(&ExplanationInstance) -> usize| {
            instances.iter().map(|i| f(i) as f64).sum::<f64>() / n
        };
        Self {
            count: instances.len(),
            why: mean(&|i| word_count(&i.explanation_why)),
            why_not: mean(&|i| word_count(&i.explanation_why_not)),
            whole: mean(&|i| {
                word_count(&format!("{} {}", i.explanation_why, i.explanation_why_not))
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub overall: WordStats,
    pub splits: BTreeMap<String, WordStats>,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:>8} {:>10} {:>14} {:>10}",
            "split", "count", "why", "why-not", "whole"
        )?;
        let mut row = |name: &str, s: &WordStats| {
            writeln!(
                f,
                "{:<12} {:>8} {:>10.2} {:>14.2} {:>10.2}",
                name, s.count, s.why, s.why_not, s.whole
            )
        };
        row("overall", &self.overall)?;
        for (name, s) in &self.splits {
            row(name, s)?;
        }
        Ok(())
    }
}

/// Mean word counts overall and per split. `splits` maps split names to
/// instance indices and may be empty.
pub fn word_count_stats(
    instances: &[ExplanationInstance],
    splits: &BTreeMap<String, Vec<usize>>,
) -> Result<DatasetStats> {
    if instances.is_empty() {
        return Err(Error::invalid(
            "cannot compute statistics of an empty dataset",
        ));
    }
    let all: Vec<&ExplanationInstance> = instances.iter().collect();
    let mut per_split = BTreeMap::new();
    for (name, idxs) in splits {
        if idxs.is_empty() {
            continue;
        }
        let members = idxs
            .iter()
            .map(|&i| {
                instances
                    .get(i)
                    .ok_or_else(|| Error::invalid(format!("split {name} references instance {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        per_split.insert(name.clone(), WordStats::of(&members));
    }
    Ok(DatasetStats {
        overall: WordStats::of(&all),
        splits: per_split,
    })
}

/// Question id to split name.
pub type SplitManifest = BTreeMap<String, String>;

/// Reads `question-id \t split` lines.
pub fn read_manifest(reader: impl BufRead) -> Result<SplitManifest> {
    let mut out = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, split) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: idx + 1,
            message: "expected `question-id<TAB>split`".into(),
        })?;
        out.insert(id.trim().to_string(), split.trim().to_string());
    }
    Ok(out)
}

/// Partitions instances by manifest; returns split name to instance indices.
pub fn split_dataset(
    instances: &[ExplanationInstance],
    manifest: &SplitManifest,
) -> Result<BTreeMap<String, Vec<usize>>> {
    if manifest.is_empty() {
        return Err(Error::invalid("split manifest is empty"));
    }
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        let qid = inst.question_id();
        let split = manifest.get(&qid).ok_or_else(|| {
            Error::invalid(format!(
                "question {qid} (instance {i}) is not in the manifest"
            ))
        })?;
        out.entry(split.clone()).or_default().push(i);
    }
    Ok(out)
}
