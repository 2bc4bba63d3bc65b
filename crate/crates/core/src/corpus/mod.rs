//! Raw keystroke ingestion into a canonical event model, plus subject-level
//! train/validation/test splits.
//!
//! Every adapter produces [`SubjectStream`]s. Streams coming from the CMU
//! timing table additionally carry the table's precomputed timing rows
//! ([`TimingBlock`]) because that source has no raw timestamps to re-derive
//! from.

mod cmu;
mod event_log;
mod keys;
mod split;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureRow;

pub use cmu::load_fixed_text_table;
pub use event_log::{load_event_log, EventLogAdapter};
pub use keys::key_code_for_name;
pub use split::{make_split, SplitPlan};

/// One key press/release pair. Timestamps are integer milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KeystrokeEvent {
    /// Index into the owning stream's session list.
    pub session: u32,
    pub key_code: u8,
    pub press_ms: i64,
    pub release_ms: i64,
}

/// Precomputed timing rows for one fixed-text repetition.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingBlock {
    pub session: u32,
    pub repetition: u32,
    pub rows: Vec<FeatureRow>,
}

/// All keystrokes of one subject, sorted per session by press time (ties by
/// release time, then key code).
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectStream {
    subject_id: String,
    sessions: Vec<String>,
    events: Vec<KeystrokeEvent>,
    timing_blocks: Vec<TimingBlock>,
}

impl SubjectStream {
    /// Builds a stream, sorting events into canonical order. Sessions keep the
    /// given order; each event's `session` must index into `sessions`.
    pub fn new(
        subject_id: impl Into<String>,
        sessions: Vec<String>,
        mut events: Vec<KeystrokeEvent>,
    ) -> Result<Self> {
        let subject_id = subject_id.into();
        for ev in &events {
            if ev.session as usize >= sessions.len() {
                return Err(Error::Config(format!(
                    "subject `{subject_id}`: event references unknown session {}",
                    ev.session
                )));
            }
            if ev.release_ms < ev.press_ms {
                return Err(Error::Config(format!(
                    "subject `{subject_id}`: release {} before press {}",
                    ev.release_ms, ev.press_ms
                )));
            }
        }
        events.sort_by_key(|e| (e.session, e.press_ms, e.release_ms, e.key_code));
        Ok(SubjectStream {
            subject_id,
            sessions,
            events,
            timing_blocks: Vec::new(),
        })
    }

    pub(crate) fn with_timing_blocks(mut self, blocks: Vec<TimingBlock>) -> Self {
        self.timing_blocks = blocks;
        self
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn sessions(&self) -> &[String] {
        &self.sessions
    }

    pub fn events(&self) -> &[KeystrokeEvent] {
        &self.events
    }

    pub fn event_count(&self) -> usize {
        self.events.len()
    }

    /// Precomputed timing rows; empty unless loaded from a fixed-text table.
    pub fn timing_blocks(&self) -> &[TimingBlock] {
        &self.timing_blocks
    }

    /// Events of each session as contiguous slices, in session order.
    pub fn session_slices(&self) -> impl Iterator<Item = (u32, &[KeystrokeEvent])> {
        self.events
            .chunk_by(|a, b| a.session == b.session)
            .map(|chunk| (chunk[0].session, chunk))
    }
}

/// Counters accumulated while ingesting one dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: usize,
    /// Rows whose release precedes their press.
    pub rows_rejected: usize,
    /// Press or release events without a partner.
    pub unmatched_dropped: usize,
    /// Rows that are not keyboard events (e.g. mouse activity).
    pub rows_ignored: usize,
    pub subjects: usize,
    pub events: usize,
}

impl IngestReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.serialize(self)?;
        w.flush().map_err(|e| Error::io("<report>", e))?;
        Ok(())
    }
}

/// Subjects with at least `min_keystrokes` events (inclusive).
pub fn eligible_subjects(streams: &[SubjectStream], min_keystrokes: usize) -> BTreeSet<String> {
    streams
        .iter()
        .filter(|s| s.event_count() >= min_keystrokes)
        .map(|s| s.subject_id.clone())
        .collect()
}

pub const CANONICAL_HEADER: [&str; 5] = [
    "subject_id",
    "session_id",
    "key_code",
    "press_ms",
    "release_ms",
];

/// Writes streams in the canonical event format: comma-delimited UTF-8 with a
/// header row and one event per row.
pub fn write_canonical<W: Write>(writer: W, streams: &[SubjectStream]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CANONICAL_HEADER)?;
    for stream in streams {
        for ev in &stream.events {
            w.write_record([
                stream.subject_id.as_str(),
                stream.sessions[ev.session as usize].as_str(),
                &ev.key_code.to_string(),
                &ev.press_ms.to_string(),
                &ev.release_ms.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<canonical>", e))?;
    Ok(())
}

pub fn write_canonical_file(path: &Path, streams: &[SubjectStream]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_canonical(std::io::BufWriter::new(file), streams)
}
