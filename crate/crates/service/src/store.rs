//! Review queue persisted as an append-only, line-delimited event log.
//!
//! Every accepted state change is written and synced before it is applied in
//! memory, so replaying the log after a crash yields the state the last
//! acknowledged request saw. A torn final line (crash mid-write) is dropped;
//! damage anywhere else is reported. Compaction rewrites the log as one
//! snapshot event per item and swaps it in by rename.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use kgexplain::dataset::{validate, ExplanationInstance};
use kgexplain::evalkit::LikertResponse;
use serde::{Deserialize, Serialize};

pub const LOG_FILE: &str = "events.jsonl";
pub const DEFAULT_COMPACT_EVERY: usize = 512;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("unknown review item {0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Invalid(String),
    #[error("review log line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type StoreResult<T> = std::result::Result<T, StoreError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Pending,
    Approved,
    Flagged,
    NeedsManualReview,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub id: String,
    pub instance: ExplanationInstance,
    pub status: ReviewStatus,
    pub submitted_scores: Option<LikertResponse>,
    /// Every discrepancy note received, oldest first.
    pub flags: Vec<String>,
    /// Instances replaced by regeneration, oldest first.
    pub revision_history: Vec<ExplanationInstance>,
    /// Notes of the flag whose regeneration is outstanding.
    #[serde(default)]
    pub pending_notes: Vec<String>,
    #[serde(default)]
    pub last_error: Option<String>,
}

impl ReviewItem {
    /// Number of completed refinements.
    pub fn revision(&self) -> u32 {
        self.revision_history.len() as u32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Enqueued {
        id: String,
        instance: ExplanationInstance,
    },
    Scored {
        id: String,
        scores: LikertResponse,
    },
    Flagged {
        id: String,
        notes: Vec<String>,
    },
    Regenerated {
        id: String,
        instance: ExplanationInstance,
    },
    RegenerationFailed {
        id: String,
        error: String,
    },
    ManualReview {
        id: String,
    },
    Snapshot {
        item: ReviewItem,
    },
}

/// Outcome of an asynchronous regeneration.
#[derive(Debug, Clone)]
pub enum Regeneration {
    Replaced(ExplanationInstance),
    NeedsManualReview,
    Failed(String),
}

#[derive(Default)]
struct State {
    items: BTreeMap<String, ReviewItem>,
    order: Vec<String>,
}

impl State {
    fn item(&self, id: &str) -> StoreResult<&ReviewItem> {
        self.items
            .get(id)
            .ok_or_else(|| StoreError::NotFound(id.to_string()))
    }

    fn status_is(&self, id: &str, want: ReviewStatus, action: &str) -> StoreResult<()> {
        let it = self.item(id)?;
        if it.status != want {
            return Err(StoreError::Conflict(format!(
                "cannot {action} item {id} while it is {:?}",
                it.status
            )));
        }
        Ok(())
    }

    /// Transition rules; applied both to live requests and to replay.
    fn check(&self, ev: &Event) -> StoreResult<()> {
        match ev {
            Event::Enqueued { id, .. } => {
                if self.items.contains_key(id) {
                    return Err(StoreError::Conflict(format!("item {id} already exists")));
                }
                Ok(())
            }
            Event::Scored { id, .. } => {
                self.status_is(id, ReviewStatus::Pending, "approve")?;
                let v = validate(&self.item(id)?.instance);
                if !v.is_empty() {
                    let codes: Vec<&str> = v.iter().map(|x| x.kind.code()).collect();
                    return Err(StoreError::Conflict(format!(
                        "item {id} fails schema validation: {}",
                        codes.join(", ")
                    )));
                }
                Ok(())
            }
            Event::Flagged { id, notes } => {
                if notes.is_empty() {
                    return Err(StoreError::Invalid("a flag needs at least one note".into()));
                }
                self.status_is(id, ReviewStatus::Pending, "flag")
            }
            Event::Regenerated { id, .. }
            | Event::RegenerationFailed { id, .. }
            | Event::ManualReview { id } => {
                self.status_is(id, ReviewStatus::Flagged, "finish regenerating")
            }
            Event::Snapshot { .. } => Ok(()),
        }
    }

    fn apply(&mut self, ev: Event) {
        match ev {
            Event::Enqueued { id, instance } => {
                self.order.push(id.clone());
                self.items.insert(
                    id.clone(),
                    ReviewItem {
                        id,
                        instance,
                        status: ReviewStatus::Pending,
                        submitted_scores: None,
                        flags: Vec::new(),
                        revision_history: Vec::new(),
                        pending_notes: Vec::new(),
                        last_error: None,
                    },
                );
            }
            Event::Scored { id, scores } => {
                let it = self.items.get_mut(&id).expect("checked");
                it.submitted_scores = Some(scores);
                it.status = ReviewStatus::Approved;
            }
            Event::Flagged { id, notes } => {
                let it = self.items.get_mut(&id).expect("checked");
                it.flags.extend(notes.iter().cloned());
                it.pending_notes = notes;
                it.status = ReviewStatus::Flagged;
            }
            Event::Regenerated { id, instance } => {
                let it = self.items.get_mut(&id).expect("checked");
                let old = std::mem::replace(&mut it.instance, instance);
                it.revision_history.push(old);
                it.status = ReviewStatus::Pending;
                it.pending_notes.clear();
                it.last_error = None;
            }
            Event::RegenerationFailed { id, error } => {
                let it = self.items.get_mut(&id).expect("checked");
                it.status = ReviewStatus::Pending;
                it.pending_notes.clear();
                it.last_error = Some(error);
            }
            Event::ManualReview { id } => {
                let it = self.items.get_mut(&id).expect("checked");
                it.status = ReviewStatus::NeedsManualReview;
                it.pending_notes.clear();
            }
            Event::Snapshot { item } => {
                if !self.items.contains_key(&item.id) {
                    self.order.push(item.id.clone());
                }
                self.items.insert(item.id.clone(), item);
            }
        }
    }
}

struct Inner {
    state: State,
    log: File,
    since_compaction: usize,
}

pub struct ReviewStore {
    dir: PathBuf,
    compact_every: usize,
    inner: Mutex<Inner>,
}

impl ReviewStore {
    pub fn open(dir: impl AsRef<Path>) -> StoreResult<ReviewStore> {
        ReviewStore::open_with(dir, DEFAULT_COMPACT_EVERY)
    }

    /// `compact_every` events after the last compaction trigger a rewrite.
    pub fn open_with(dir: impl AsRef<Path>, compact_every: usize) -> StoreResult<ReviewStore> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(LOG_FILE);
        let mut state = State::default();
        let mut events = 0;
        if path.exists() {
            let (good_len, n) = replay(&path, &mut state)?;
            events = n;
            let actual = std::fs::metadata(&path)?.len();
            if good_len < actual {
                log::warn!(
                    "dropping torn tail of {} ({} bytes)",
                    path.display(),
                    actual - good_len
                );
                OpenOptions::new()
                    .write(true)
                    .open(&path)?
                    .set_len(good_len)?;
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(ReviewStore {
            dir,
            compact_every: compact_every.max(1),
            inner: Mutex::new(Inner {
                state,
                log,
                since_compaction: events,
            }),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        // a panic elsewhere never leaves the state half-applied: events are
        // checked, written, then applied in one step
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn commit(&self, inner: &mut Inner, ev: Event) -> StoreResult<()> {
        inner.state.check(&ev)?;
        let mut line =
            serde_json::to_string(&ev).map_err(|e| StoreError::Invalid(e.to_string()))?;
        line.push('\n');
        inner.log.write_all(line.as_bytes())?;
        inner.log.sync_data()?;
        inner.state.apply(ev);
        inner.since_compaction += 1;
        if inner.since_compaction >= self.compact_every {
            if let Err(e) = self.compact_locked(inner) {
                log::warn!("review log compaction failed: {e}");
            }
        }
        Ok(())
    }

    pub fn enqueue(&self, instance: ExplanationInstance) -> StoreResult<ReviewItem> {
        let mut inner = self.lock();
        let id = format!("item-{:05}", inner.state.order.len() + 1);
        self.commit(
            &mut inner,
            Event::Enqueued {
                id: id.clone(),
                instance,
            },
        )?;
        Ok(inner.state.items[&id].clone())
    }

    pub fn get(&self, id: &str) -> Option<ReviewItem> {
        self.lock().state.items.get(id).cloned()
    }

    /// All items in enqueue order.
    pub fn list(&self) -> Vec<ReviewItem> {
        let inner = self.lock();
        inner
            .state
            .order
            .iter()
            .map(|id| inner.state.items[id].clone())
            .collect()
    }

    /// Oldest pending item.
    pub fn next_pending(&self) -> Option<ReviewItem> {
        let inner = self.lock();
        inner
            .state
            .order
            .iter()
            .map(|id| &inner.state.items[id])
            .find(|it| it.status == ReviewStatus::Pending)
            .cloned()
    }

    /// Items whose regeneration was requested but never completed.
    pub fn awaiting_regeneration(&self) -> Vec<ReviewItem> {
        self.list()
            .into_iter()
            .filter(|it| it.status == ReviewStatus::Flagged)
            .collect()
    }

    /// A clean review: pending → approved.
    pub fn submit_scores(&self, id: &str, scores: LikertResponse) -> StoreResult<ReviewItem> {
        scores
            .scores
            .validate()
            .map_err(|e| StoreError::Invalid(e.to_string()))?;
        let mut inner = self.lock();
        self.commit(
            &mut inner,
            Event::Scored {
                id: id.to_string(),
                scores,
            },
        )?;
        Ok(inner.state.items[id].clone())
    }

    /// pending → flagged. Once `bound` refinements have been made the item
    /// moves straight on to manual review. Returns the item and whether a
    /// regeneration must be started.
    pub fn flag(
        &self,
        id: &str,
        notes: Vec<String>,
        bound: u32,
    ) -> StoreResult<(ReviewItem, bool)> {
        let mut inner = self.lock();
        self.commit(
            &mut inner,
            Event::Flagged {
                id: id.to_string(),
                notes,
            },
        )?;
        if inner.state.items[id].revision() >= bound {
            self.commit(&mut inner, Event::ManualReview { id: id.to_string() })?;
            return Ok((inner.state.items[id].clone(), false));
        }
        Ok((inner.state.items[id].clone(), true))
    }

    /// flagged → pending (new revision or recorded failure) or manual review.
    pub fn finish_regeneration(&self, id: &str, outcome: Regeneration) -> StoreResult<ReviewItem> {
        let id_s = id.to_string();
        let ev = match outcome {
            Regeneration::Replaced(instance) => Event::Regenerated { id: id_s, instance },
            Regeneration::NeedsManualReview => Event::ManualReview { id: id_s },
            Regeneration::Failed(error) => Event::RegenerationFailed { id: id_s, error },
        };
        let mut inner = self.lock();
        self.commit(&mut inner, ev)?;
        Ok(inner.state.items[id].clone())
    }

    pub fn compact(&self) -> StoreResult<()> {
        let mut inner = self.lock();
        self.compact_locked(&mut inner)
    }

    fn compact_locked(&self, inner: &mut Inner) -> StoreResult<()> {
        let path = self.dir.join(LOG_FILE);
        let tmp = self.dir.join(format!("{LOG_FILE}.tmp"));
        {
            let mut f = std::io::BufWriter::new(File::create(&tmp)?);
            for id in &inner.state.order {
                let ev = Event::Snapshot {
                    item: inner.state.items[id].clone(),
                };
                serde_json::to_writer(&mut f, &ev)
                    .map_err(|e| StoreError::Invalid(e.to_string()))?;
                f.write_all(b"\n")?;
            }
            f.flush()?;
            f.get_ref().sync_all()?;
        }
        std::fs::rename(&tmp, &path)?;
        if let Ok(d) = File::open(&self.dir) {
            let _ = d.sync_all();
        }
        inner.log = OpenOptions::new().append(true).open(&path)?;
        inner.since_compaction = 0;
        Ok(())
    }
}

/// Replays the log into `state`; returns the byte length of the valid
/// prefix and the number of events read.
fn replay(path: &Path, state: &mut State) -> StoreResult<(u64, usize)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut good = 0u64;
    let mut count = 0;
    let mut line_no = 0;
    let mut buf = String::new();
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let parsed = if buf.ends_with('\n') {
            serde_json::from_str::<Event>(buf.trim_end()).map_err(|e| e.to_string())
        } else {
            Err("unterminated line".to_string())
        };
        match parsed {
            Ok(ev) => {
                state.check(&ev).map_err(|e| StoreError::Corrupt {
                    line: line_no,
                    message: e.to_string(),
                })?;
                state.apply(ev);
                good += n as u64;
                count += 1;
            }
            // only the final line may be torn
            Err(message) if reader.fill_buf()?.is_empty() => {
                log::warn!("review log line {line_no} unreadable: {message}");
                break;
            }
            Err(message) => {
                return Err(StoreError::Corrupt {
                    line: line_no,
                    message,
                })
            }
        }
    }
    Ok((good, count))
}
