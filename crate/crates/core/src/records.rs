//! Canonical record model and append-only JSONL persistence.
//!
//! Records are the contract between pipeline stages: probes go in, raw
//! generations come back, scored rows flow into analysis. Storage is
//! line-delimited JSON with stable field ordering, append-only semantics, and
//! a manifest of SHA-256 digests per artifact. Unknown fields survive a
//! read/write cycle so older artifacts stay loadable.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::agents::DiagnosticCategory;
use crate::ontology::ActionCode;
use crate::probes::ControlTag;

/// Key name a scorer-side target label would serialize under. Probe payloads
/// are audited for its absence; see [`crate::probes::leakage_audit`].
pub const SCORER_TARGET_KEY: &str = "expected_action_after";

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("record io at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("row {row} failed to serialize ({detail}): {source}")]
    Serialize {
        row: usize,
        detail: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}:{line}: malformed record: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("record key {component} must not contain '/': {value:?}")]
    KeyComponent { component: &'static str, value: String },
    #[error("malformed record key {value:?}: want dataset/base_event/condition/variant/replicate")]
    KeyParse { value: String },
    #[error("manifest digest mismatch for {path:?}: manifest {expected}, file {found}")]
    ManifestMismatch { path: String, expected: String, found: String },
    #[error("manifest lists {path:?} but the file is missing")]
    ManifestMissing { path: String },
}

// ── Record keys ──────────────────────────────────────────────────────────────

/// Identity of one probe row across every artifact.
///
/// Serializes bit-exactly as `dataset/base_event/condition/variant/replicate`;
/// components therefore must not contain `/`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RecordKey {
    pub dataset: String,
    pub base_event: String,
    pub condition: String,
    pub variant: String,
    pub replicate: u32,
}

impl RecordKey {
    pub fn new(
        dataset: impl Into<String>,
        base_event: impl Into<String>,
        condition: impl Into<String>,
        variant: impl Into<String>,
        replicate: u32,
    ) -> Result<RecordKey, RecordError> {
        let key = RecordKey {
            dataset: dataset.into(),
            base_event: base_event.into(),
            condition: condition.into(),
            variant: variant.into(),
            replicate,
        };
        for (component, value) in [
            ("dataset", &key.dataset),
            ("base_event", &key.base_event),
            ("condition", &key.condition),
            ("variant", &key.variant),
        ] {
            if value.contains('/') || value.is_empty() {
                return Err(RecordError::KeyComponent { component, value: value.clone() });
            }
        }
        Ok(key)
    }

    /// Returns a copy re-keyed to a concrete grid cell.
    pub fn with_cell(&self, variant: &str, replicate: u32) -> RecordKey {
        RecordKey { variant: variant.to_string(), replicate, ..self.clone() }
    }
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}/{}",
            self.dataset, self.base_event, self.condition, self.variant, self.replicate
        )
    }
}

impl FromStr for RecordKey {
    type Err = RecordError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('/').collect();
        let [dataset, base_event, condition, variant, replicate] = parts.as_slice() else {
            return Err(RecordError::KeyParse { value: s.to_string() });
        };
        let replicate: u32 =
            replicate.parse().map_err(|_| RecordError::KeyParse { value: s.to_string() })?;
        RecordKey::new(*dataset, *base_event, *condition, *variant, replicate)
    }
}

impl Serialize for RecordKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RecordKey {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Anything addressed by a [`RecordKey`].
pub trait Keyed {
    fn key(&self) -> &RecordKey;
}

/// Result of key-level deduplication.
#[derive(Debug)]
pub struct DedupOutcome<T> {
    pub retained: Vec<T>,
    pub dropped: usize,
}

/// Keeps the first occurrence per key, preserves input order, counts drops.
pub fn dedup<T: Keyed>(rows: Vec<T>) -> DedupOutcome<T> {
    let mut seen: HashSet<RecordKey> = HashSet::with_capacity(rows.len());
    let mut retained = Vec::with_capacity(rows.len());
    let mut dropped = 0usize;
    for row in rows {
        if seen.insert(row.key().clone()) {
            retained.push(row);
        } else {
            dropped += 1;
        }
    }
    DedupOutcome { retained, dropped }
}

// ── Probe records ────────────────────────────────────────────────────────────

/// Whether a condition manipulates the target construct, adds an irrelevant
/// cue, or leaves the event untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionClass {
    Target,
    Irrelevant,
    Placebo,
}

/// One structured state field visible to the agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldPayload {
    /// Short role label ("reason", "memory", "constraint", "self_state").
    pub label: String,
    pub text: String,
}

/// Visible prompt, kept structured so controls can strip sections without
/// re-parsing rendered text. [`ProbeRecord::render_prompt`] flattens it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPayload {
    pub surface: String,
    /// Non-decisive structured context preserved by the strict lesion.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub context_lines: Vec<String>,
    /// Visible note that a manipulation arrived (not its content).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manipulation: Option<String>,
    /// Sampled final-action prior exposed by prior-based controls.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_hint: Option<String>,
    /// Misleading surface cue; never decisive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub irrelevant_note: Option<String>,
    /// Valid answer set shown to the agent.
    pub allowed: Vec<ActionCode>,
}

/// One probe row: everything the agent may see plus the hidden labels the
/// scorer needs. The hidden target never enters the rendered prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub key: RecordKey,
    pub visible_prompt: PromptPayload,
    pub expected_before: ActionCode,
    pub expected_after: ActionCode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decisive_field: Option<FieldPayload>,
    /// Event the decisive field originated from; differs from
    /// `key.base_event` exactly on scrambled rows, absent when no field shows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_event_id: Option<String>,
    pub condition_class: ConditionClass,
    pub control: ControlTag,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl ProbeRecord {
    /// Flattens the structured payload into the text an agent receives.
    pub fn render_prompt(&self) -> String {
        let mut out = String::new();
        out.push_str("TASK\n");
        out.push_str(&self.visible_prompt.surface);
        out.push('\n');
        for line in &self.visible_prompt.context_lines {
            out.push_str("CONTEXT\n");
            out.push_str(line);
            out.push('\n');
        }
        if let Some(field) = &self.decisive_field {
            out.push_str("STATE ");
            out.push_str(&field.label);
            out.push('\n');
            out.push_str(&field.text);
            out.push('\n');
        }
        if let Some(manipulation) = &self.visible_prompt.manipulation {
            out.push_str("UPDATE\n");
            out.push_str(manipulation);
            out.push('\n');
        }
        if let Some(prior) = &self.visible_prompt.prior_hint {
            out.push_str("PRIOR\n");
            out.push_str(prior);
            out.push('\n');
        }
        if let Some(note) = &self.visible_prompt.irrelevant_note {
            out.push_str("NOTE\n");
            out.push_str(note);
            out.push('\n');
        }
        out.push_str("RESPOND\nAnswer with exactly one action: ");
        let allowed: Vec<&str> =
            self.visible_prompt.allowed.iter().map(|c| c.as_str()).collect();
        out.push_str(&allowed.join(" | "));
        out.push('\n');
        out
    }

    /// True when the visible decisive field belongs to this row's own event.
    pub fn field_is_current(&self) -> bool {
        match (&self.decisive_field, &self.field_event_id) {
            (Some(_), Some(origin)) => *origin == self.key.base_event,
            _ => false,
        }
    }
}

impl Keyed for ProbeRecord {
    fn key(&self) -> &RecordKey {
        &self.key
    }
}

// ── Generation records ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Ok,
    ParseError,
    Unrecovered,
}

/// Transport-level metadata. Token counts are unsigned by type; absent values
/// stay absent rather than defaulting to zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProviderMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
}

/// Provenance of one emitted trace field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Generated,
    Posthoc,
    Scrambled,
    Random,
    Absent,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelfState {
    pub identity_weight: f64,
    pub continuity_weight: f64,
    /// Explicit action commitment, when the agent locks one in.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub commitment: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VetoState {
    pub applied: bool,
    #[serde(default)]
    pub rationale: String,
}

/// Field names every trace must cover in its provenance map.
pub const TRACE_FIELDS: [&str; 8] = [
    "first_impulse",
    "candidate_actions",
    "reason_graph",
    "memory_trace",
    "self_state",
    "veto_state",
    "final_action",
    "final_action_rationale",
];

/// Structured decision trace in the matched interface shared by all variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceBundle {
    pub first_impulse: String,
    pub candidate_actions: Vec<String>,
    pub reason_graph: Vec<String>,
    pub memory_trace: Vec<String>,
    pub self_state: SelfState,
    pub veto_state: VetoState,
    pub final_action: String,
    pub final_action_rationale: String,
    /// Per-field provenance; must cover every name in [`TRACE_FIELDS`].
    pub provenance: BTreeMap<String, SourceTag>,
}

impl TraceBundle {
    /// Missing provenance entries, in schema order. Empty means valid.
    pub fn missing_provenance(&self) -> Vec<&'static str> {
        TRACE_FIELDS.iter().copied().filter(|f| !self.provenance.contains_key(*f)).collect()
    }

    pub fn weights_in_range(&self) -> bool {
        let w = &self.self_state;
        (0.0..=1.0).contains(&w.identity_weight) && (0.0..=1.0).contains(&w.continuity_weight)
    }

    pub fn provenance_of(&self, field: &str) -> SourceTag {
        self.provenance.get(field).copied().unwrap_or(SourceTag::Absent)
    }
}

/// One raw agent response, before any scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub key: RecordKey,
    pub raw_output: String,
    pub parse_status: ParseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_fields: Option<TraceBundle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider_meta: Option<ProviderMeta>,
    /// Failure category for non-ok rows; retained for triage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<DiagnosticCategory>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Keyed for GenerationRecord {
    fn key(&self) -> &RecordKey {
        &self.key
    }
}

// ── JSONL store ──────────────────────────────────────────────────────────────

/// Receipt for one append: rows written and digest of exactly those bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriteReceipt {
    pub count: usize,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, RecordError> {
    let bytes = std::fs::read(path)
        .map_err(|source| RecordError::Io { path: path.to_path_buf(), source })?;
    Ok(sha256_hex(&bytes))
}

/// Appends rows as newline-terminated JSON. All rows serialize before any
/// byte reaches the file, so a serialization failure leaves the store intact.
pub fn append_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<WriteReceipt, RecordError> {
    let mut buf: Vec<u8> = Vec::new();
    for (row, item) in rows.iter().enumerate() {
        let line = serde_json::to_vec(item).map_err(|source| RecordError::Serialize {
            row,
            detail: source.to_string(),
            source,
        })?;
        buf.extend_from_slice(&line);
        buf.push(b'\n');
    }
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| RecordError::Io { path: path.to_path_buf(), source })?;
    file.write_all(&buf).map_err(|source| RecordError::Io { path: path.to_path_buf(), source })?;
    file.flush().map_err(|source| RecordError::Io { path: path.to_path_buf(), source })?;
    Ok(WriteReceipt { count: rows.len(), sha256: sha256_hex(&buf) })
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, RecordError> {
    let file = std::fs::File::open(path)
        .map_err(|source| RecordError::Io { path: path.to_path_buf(), source })?;
    let reader = BufReader::new(file);
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| RecordError::Io { path: path.to_path_buf(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|source| RecordError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            source,
        })?;
        rows.push(row);
    }
    Ok(rows)
}

// ── Manifest ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the manifest's directory; keeps manifests portable
    /// and rerun-identical.
    pub path: String,
    /// Row count for record files, 0 for scalar artifacts.
    pub rows: usize,
    pub sha256: String,
}

/// Digest index over a run directory. Entries stay sorted by path so the
/// serialized form is canonical.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new() -> Manifest {
        Manifest::default()
    }

    /// Inserts or replaces the entry for `path`.
    pub fn upsert(&mut self, path: &str, rows: usize, sha256: String) {
        match self.entries.binary_search_by(|e| e.path.as_str().cmp(path)) {
            Ok(i) => {
                self.entries[i].rows = rows;
                self.entries[i].sha256 = sha256;
            }
            Err(i) => {
                self.entries.insert(i, ManifestEntry { path: path.to_string(), rows, sha256 });
            }
        }
    }

    pub fn get(&self, path: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.path == path)
    }

    pub fn write(&self, path: &Path) -> Result<(), RecordError> {
        let mut bytes = serde_json::to_vec_pretty(self).map_err(|source| {
            RecordError::Serialize { row: 0, detail: "manifest".into(), source }
        })?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)
            .map_err(|source| RecordError::Io { path: path.to_path_buf(), source })
    }

    pub fn read(path: &Path) -> Result<Manifest, RecordError> {
        let bytes = std::fs::read(path)
            .map_err(|source| RecordError::Io { path: path.to_path_buf(), source })?;
        serde_json::from_slice(&bytes).map_err(|source| RecordError::Parse {
            path: path.to_path_buf(),
            line: 0,
            source,
        })
    }

    /// Re-hashes every listed artifact under `root`.
    pub fn verify(&self, root: &Path) -> Result<(), RecordError> {
        for entry in &self.entries {
            let file = root.join(&entry.path);
            if !file.exists() {
                return Err(RecordError::ManifestMissing { path: entry.path.clone() });
            }
            let found = sha256_file(&file)?;
            if found != entry.sha256 {
                return Err(RecordError::ManifestMismatch {
                    path: entry.path.clone(),
                    expected: entry.sha256.clone(),
                    found,
                });
            }
        }
        Ok(())
    }
}
