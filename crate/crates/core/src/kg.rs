//! The user's knowledge graph.
//!
//! A [`KnowledgeGraph`] is a set of [`KnowledgeTriple`]s kept in a subject
//! index, so the one-depth retrieval set for a query entity is a single map
//! lookup. Every state-changing edit is appended to a journal; the graph as it
//! was loaded (or constructed) is the journal's epoch, and replaying the
//! journal over that epoch reproduces the live triple set.
//!
//! On disk a graph is a UTF-8, tab-separated `subject<TAB>relation<TAB>object`
//! file (blank lines and `#` comments ignored) with an optional sidecar
//! journal at `<graph>.journal.jsonl`, one JSON record per line.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Provenance prefix marking edits made by a tuning run in response to feedback.
pub const FEEDBACK_PROVENANCE_PREFIX: &str = "feedback:";

/// Trim and collapse internal whitespace runs to a single space. Case is kept.
pub fn normalize_label(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One `(subject, relation, object)` fact.
///
/// Fields are whitespace-normalized on construction and never empty, so a
/// triple can always be written to a tab-separated line. Ordering is
/// lexicographic by subject, then relation, then object.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawTriple")]
pub struct KnowledgeTriple {
    subject: String,
    relation: String,
    object: String,
}

#[derive(Deserialize)]
struct RawTriple {
    subject: String,
    relation: String,
    object: String,
}

impl TryFrom<RawTriple> for KnowledgeTriple {
    type Error = Error;

    fn try_from(raw: RawTriple) -> Result<Self> {
        KnowledgeTriple::new(&raw.subject, &raw.relation, &raw.object)
    }
}

impl KnowledgeTriple {
    pub fn new(subject: &str, relation: &str, object: &str) -> Result<Self> {
        let subject = normalize_label(subject);
        let relation = normalize_label(relation);
        let object = normalize_label(object);
        for (name, value) in [("subject", &subject), ("relation", &relation), ("object", &object)] {
            if value.is_empty() {
                return Err(Error::Validation(format!("triple {name} is empty")));
            }
        }
        Ok(Self {
            subject,
            relation,
            object,
        })
    }

    pub fn subject(&self) -> &str {
        &self.subject
    }

    pub fn relation(&self) -> &str {
        &self.relation
    }

    pub fn object(&self) -> &str {
        &self.object
    }
}

impl fmt::Display for KnowledgeTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.subject, self.relation, self.object)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditOp {
    Add,
    Remove,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditOutcome {
    Added,
    AlreadyPresent,
    Removed,
    Absent,
}

impl EditOutcome {
    pub fn changed(self) -> bool {
        matches!(self, EditOutcome::Added | EditOutcome::Removed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: u64,
    pub op: EditOp,
    pub triple: KnowledgeTriple,
    pub provenance: String,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

/// Result of parsing a triple file.
#[derive(Debug, Clone)]
pub struct LoadedGraph {
    pub graph: KnowledgeGraph,
    /// Lines whose triple had already been seen earlier in the file.
    pub duplicate_lines: usize,
}

fn system_clock_ms() -> u64 {
    #[cfg(not(target_arch = "wasm32"))]
    {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or_default()
    }
    #[cfg(target_arch = "wasm32")]
    {
        0
    }
}

#[derive(Clone)]
pub struct KnowledgeGraph {
    by_subject: BTreeMap<String, BTreeSet<KnowledgeTriple>>,
    len: usize,
    epoch: Arc<BTreeSet<KnowledgeTriple>>,
    journal: Vec<JournalEntry>,
    // provenance of the add that put each live triple in place, if journaled
    added_by: HashMap<KnowledgeTriple, String>,
    clock: fn() -> u64,
}

impl Default for KnowledgeGraph {
    fn default() -> Self {
        Self {
            by_subject: BTreeMap::new(),
            len: 0,
            epoch: Arc::default(),
            journal: Vec::new(),
            added_by: HashMap::new(),
            clock: system_clock_ms,
        }
    }
}

impl fmt::Debug for KnowledgeGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KnowledgeGraph")
            .field("len", &self.len)
            .field("subjects", &self.by_subject.len())
            .field("journal_len", &self.journal.len())
            .finish()
    }
}

impl PartialEq for KnowledgeGraph {
    fn eq(&self, other: &Self) -> bool {
        self.by_subject == other.by_subject && self.journal == other.journal
    }
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Build a graph whose epoch is the given triples (duplicates collapse).
    pub fn from_triples(triples: impl IntoIterator<Item = KnowledgeTriple>) -> Self {
        let mut graph = Self::default();
        for triple in triples {
            graph.insert_raw(triple);
        }
        graph.epoch = Arc::new(graph.triple_set());
        graph
    }

    /// Replace the wall clock used to stamp journal entries.
    pub fn set_clock(&mut self, clock: fn() -> u64) {
        self.clock = clock;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, triple: &KnowledgeTriple) -> bool {
        self.by_subject
            .get(triple.subject())
            .is_some_and(|bucket| bucket.contains(triple))
    }

    /// All triples in lexicographic order.
    pub fn iter(&self) -> impl Iterator<Item = &KnowledgeTriple> {
        self.by_subject.values().flatten()
    }

    pub fn triple_set(&self) -> BTreeSet<KnowledgeTriple> {
        self.iter().cloned().collect()
    }

    pub fn subjects(&self) -> impl Iterator<Item = &str> {
        self.by_subject.keys().map(String::as_str)
    }

    /// The one-depth retrieval set: every triple whose subject is `subject`.
    ///
    /// `subject` is normalized before lookup; an unknown subject yields an
    /// empty set.
    pub fn triples_from_subject(&self, subject: &str) -> BTreeSet<KnowledgeTriple> {
        self.subject_bucket(&normalize_label(subject))
            .cloned()
            .unwrap_or_default()
    }

    pub(crate) fn subject_bucket(&self, normalized_subject: &str) -> Option<&BTreeSet<KnowledgeTriple>> {
        self.by_subject.get(normalized_subject)
    }

    pub fn add_triple(&mut self, triple: KnowledgeTriple, provenance: &str) -> EditOutcome {
        if !self.insert_raw(triple.clone()) {
            return EditOutcome::AlreadyPresent;
        }
        self.added_by.insert(triple.clone(), provenance.to_owned());
        self.record(EditOp::Add, triple, provenance);
        EditOutcome::Added
    }

    pub fn remove_triple(&mut self, triple: &KnowledgeTriple, provenance: &str) -> EditOutcome {
        if !self.remove_raw(triple) {
            return EditOutcome::Absent;
        }
        self.added_by.remove(triple);
        self.record(EditOp::Remove, triple.clone(), provenance);
        EditOutcome::Removed
    }

    pub fn apply(&mut self, op: EditOp, triple: KnowledgeTriple, provenance: &str) -> EditOutcome {
        match op {
            EditOp::Add => self.add_triple(triple, provenance),
            EditOp::Remove => self.remove_triple(&triple, provenance),
        }
    }

    /// True when the live copy of `triple` was added by a feedback-driven edit.
    pub fn is_feedback_added(&self, triple: &KnowledgeTriple) -> bool {
        self.added_by
            .get(triple)
            .is_some_and(|p| p.starts_with(FEEDBACK_PROVENANCE_PREFIX))
    }

    pub fn journal(&self) -> &[JournalEntry] {
        &self.journal
    }

    /// Entries with `seq > since`, in order.
    pub fn journal_since(&self, since: u64) -> &[JournalEntry] {
        let start = self.journal.partition_point(|e| e.seq <= since);
        &self.journal[start..]
    }

    pub fn last_seq(&self) -> u64 {
        self.journal.last().map_or(0, |e| e.seq)
    }

    /// The triple set the journal starts from.
    pub fn epoch(&self) -> &BTreeSet<KnowledgeTriple> {
        &self.epoch
    }

    /// Replay the whole journal over the epoch.
    pub fn replay_journal(&self) -> Result<BTreeSet<KnowledgeTriple>> {
        replay(self.epoch.iter().cloned(), &self.journal)
    }

    fn insert_raw(&mut self, triple: KnowledgeTriple) -> bool {
        let inserted = self
            .by_subject
            .entry(triple.subject().to_owned())
            .or_default()
            .insert(triple);
        if inserted {
            self.len += 1;
        }
        inserted
    }

    fn remove_raw(&mut self, triple: &KnowledgeTriple) -> bool {
        let Some(bucket) = self.by_subject.get_mut(triple.subject()) else {
            return false;
        };
        if !bucket.remove(triple) {
            return false;
        }
        if bucket.is_empty() {
            self.by_subject.remove(triple.subject());
        }
        self.len -= 1;
        true
    }

    fn record(&mut self, op: EditOp, triple: KnowledgeTriple, provenance: &str) {
        let entry = JournalEntry {
            seq: self.last_seq() + 1,
            op,
            triple,
            provenance: provenance.to_owned(),
            timestamp: (self.clock)(),
        };
        self.journal.push(entry);
    }

    // ---- text formats ----

    /// Parse the tab-separated triple format. `source` names the input in errors.
    pub fn from_tsv(text: &str, source: &str) -> Result<LoadedGraph> {
        let mut graph = Self::default();
        let mut duplicate_lines = 0;
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    path: source.to_owned(),
                    line: line_no,
                    message: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            let triple = KnowledgeTriple::new(fields[0], fields[1], fields[2]).map_err(|e| Error::Parse {
                path: source.to_owned(),
                line: line_no,
                message: e.to_string(),
            })?;
            if !graph.insert_raw(triple) {
                duplicate_lines += 1;
            }
        }
        graph.epoch = Arc::new(graph.triple_set());
        Ok(LoadedGraph {
            graph,
            duplicate_lines,
        })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for t in self.iter() {
            out.push_str(t.subject());
            out.push('\t');
            out.push_str(t.relation());
            out.push('\t');
            out.push_str(t.object());
            out.push('\n');
        }
        out
    }

    pub fn journal_to_jsonl(&self) -> String {
        let mut out = String::new();
        for entry in &self.journal {
            let record = JournalRecord::from(entry);
            // JournalRecord has only string and integer fields
            out.push_str(&serde_json::to_string(&record).expect("journal record serializes"));
            out.push('\n');
        }
        out
    }

    /// Attach a journal to a graph whose triples are the journal's end state.
    ///
    /// The epoch is reconstructed by undoing the journal in reverse; an entry
    /// that cannot be undone means the journal does not belong to this graph.
    pub fn attach_journal(&mut self, text: &str, source: &str) -> Result<()> {
        let mut journal = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: source.to_owned(),
                line: idx + 1,
                message,
            };
            let record: JournalRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            let entry = record.into_entry().map_err(|e| parse_err(e.to_string()))?;
            let expected = journal.last().map_or(1, |e: &JournalEntry| e.seq + 1);
            if entry.seq != expected {
                return Err(parse_err(format!("journal seq {} out of order, expected {expected}", entry.seq)));
            }
            journal.push(entry);
        }

        let mut epoch = self.triple_set();
        for entry in journal.iter().rev() {
            let undone = match entry.op {
                EditOp::Add => epoch.remove(&entry.triple),
                EditOp::Remove => epoch.insert(entry.triple.clone()),
            };
            if !undone {
                return Err(Error::Parse {
                    path: source.to_owned(),
                    line: entry.seq as usize,
                    message: format!("journal entry {} is inconsistent with the graph", entry.seq),
                });
            }
        }

        let mut added_by = HashMap::new();
        for entry in &journal {
            match entry.op {
                EditOp::Add => {
                    added_by.insert(entry.triple.clone(), entry.provenance.clone());
                }
                EditOp::Remove => {
                    added_by.remove(&entry.triple);
                }
            }
        }
        self.epoch = Arc::new(epoch);
        self.journal = journal;
        self.added_by = added_by;
        Ok(())
    }

    /// Start a fresh journal whose epoch is the current triple set.
    pub fn rebase(&mut self) {
        self.epoch = Arc::new(self.triple_set());
        self.journal.clear();
        self.added_by.clear();
    }
}

#[derive(Serialize, Deserialize)]
struct JournalRecord {
    seq: u64,
    op: EditOp,
    subject: String,
    relation: String,
    object: String,
    provenance: String,
    timestamp: u64,
}

impl From<&JournalEntry> for JournalRecord {
    fn from(e: &JournalEntry) -> Self {
        Self {
            seq: e.seq,
            op: e.op,
            subject: e.triple.subject().to_owned(),
            relation: e.triple.relation().to_owned(),
            object: e.triple.object().to_owned(),
            provenance: e.provenance.clone(),
            timestamp: e.timestamp,
        }
    }
}

impl JournalRecord {
    fn into_entry(self) -> Result<JournalEntry> {
        Ok(JournalEntry {
            seq: self.seq,
            op: self.op,
            triple: KnowledgeTriple::new(&self.subject, &self.relation, &self.object)?,
            provenance: self.provenance,
            timestamp: self.timestamp,
        })
    }
}

/// Apply journal entries in order over a starting set. Fails on an entry that
/// did not change state when it was recorded.
pub fn replay(
    start: impl IntoIterator<Item = KnowledgeTriple>,
    journal: &[JournalEntry],
) -> Result<BTreeSet<KnowledgeTriple>> {
    let mut set: BTreeSet<_> = start.into_iter().collect();
    for entry in journal {
        let ok = match entry.op {
            EditOp::Add => set.insert(entry.triple.clone()),
            EditOp::Remove => set.remove(&entry.triple),
        };
        if !ok {
            return Err(Error::Validation(format!(
                "journal entry {} ({:?} {}) does not apply",
                entry.seq, entry.op, entry.triple
            )));
        }
    }
    Ok(set)
}

/// One `+ (s, r, o)` or `- (s, r, o)` line per entry, tagged with its
/// sequence number and provenance.
pub fn render_journal_delta(entries: &[JournalEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let sign = match e.op {
            EditOp::Add => '+',
            EditOp::Remove => '-',
        };
        out.push_str(&format!("{sign} {}\t#{} {}\n", e.triple, e.seq, e.provenance));
    }
    out
}

pub fn journal_path(graph_path: &Path) -> PathBuf {
    let mut name = graph_path.as_os_str().to_owned();
    name.push(".journal.jsonl");
    PathBuf::from(name)
}

/// Write the graph file and, when the journal is non-empty, its sidecar.
pub fn save_graph(graph: &KnowledgeGraph, path: &Path) -> Result<()> {
    std::fs::write(path, graph.to_tsv()).map_err(|e| Error::io(path, e))?;
    let sidecar = journal_path(path);
    if graph.journal().is_empty() {
        if sidecar.exists() {
            std::fs::remove_file(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        }
    } else {
        std::fs::write(&sidecar, graph.journal_to_jsonl()).map_err(|e| Error::io(&sidecar, e))?;
    }
    Ok(())
}

pub fn load_graph(path: &Path) -> Result<LoadedGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut loaded = KnowledgeGraph::from_tsv(&text, &path.display().to_string())?;
    let sidecar = journal_path(path);
    if sidecar.exists() {
        let journal = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        loaded
            .graph
            .attach_journal(&journal, &sidecar.display().to_string())?;
    }
    Ok(loaded)
}

/// Serialize a triple-keyed probability map as a list of
/// `{ "triple": .., "probability": .. }` records (JSON keys must be strings).
pub mod triple_probabilities {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::KnowledgeTriple;

    #[derive(Serialize, Deserialize)]
    struct Entry {
        triple: KnowledgeTriple,
        probability: f64,
    }

    pub fn serialize<S: Serializer>(map: &BTreeMap<KnowledgeTriple, f64>, s: S) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = map
            .iter()
            .map(|(triple, &probability)| Entry {
                triple: triple.clone(),
                probability,
            })
            .collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<KnowledgeTriple, f64>, D::Error> {
        let entries = Vec::<Entry>::deserialize(d)?;
        Ok(entries.into_iter().map(|e| (e.triple, e.probability)).collect())
    }
}
