//! Free-text event logs: one row per keystroke (press and release columns) or
//! one row per press/release event that must be paired up.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::keys::key_code_for_name;
use super::{IngestReport, KeystrokeEvent, SubjectStream};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventLogAdapter {
    /// Transcription logs with a sentence (session) column; one file per
    /// participant or a concatenation.
    Aalto,
    /// Uncontrolled logs of press/release events; the subject defaults to the
    /// file stem. Mouse rows are ignored.
    Clarkson2,
    /// Canonical files, or any log using the recognised column names.
    Generic,
}

const SUBJECT: &[&str] = &["subject_id", "subject", "participant_id", "user_id", "user"];
const SESSION: &[&str] = &["session_id", "session", "test_section_id", "sentence_id"];
const KEY_NAME: &[&str] = &["key", "letter", "key_name"];
const KEY_CODE: &[&str] = &["key_code", "keycode"];
const PRESS: &[&str] = &["press_ms", "press_time_ms", "press_time", "press"];
const RELEASE: &[&str] = &["release_ms", "release_time_ms", "release_time", "release"];
const EVENT_KIND: &[&str] = &["event", "event_type", "type", "direction", "action"];
const TIME: &[&str] = &["time_ms", "timestamp_ms", "time", "timestamp"];

pub(super) fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(super) fn detect_delimiter(text: &str) -> u8 {
    let header = text.lines().next().unwrap_or("");
    if header.contains('\t') {
        b'\t'
    } else if header.contains(';') && !header.contains(',') {
        b';'
    } else {
        b','
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Press,
    Release,
}

fn parse_kind(raw: &str) -> Option<Kind> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "press" | "pressed" | "down" | "keydown" | "key_down" | "p" | "d" => Some(Kind::Press),
        "release" | "released" | "up" | "keyup" | "key_up" | "r" | "u" => Some(Kind::Release),
        _ => None,
    }
}

fn parse_ms(raw: &str) -> Option<i64> {
    let raw = raw.trim();
    if let Ok(v) = raw.parse::<i64>() {
        return Some(v);
    }
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(|v| v.round() as i64)
}

struct Layout {
    subject: Option<usize>,
    session: Option<usize>,
    key_name: Option<usize>,
    key_code: Option<usize>,
    mode: Mode,
}

enum Mode {
    Paired { press: usize, release: usize },
    Events { kind: usize, time: usize },
}

fn find(header: &csv::StringRecord, names: &[&str]) -> Option<usize> {
    names
        .iter()
        .find_map(|n| header.iter().position(|h| h.trim().eq_ignore_ascii_case(n)))
}

fn resolve_layout(
    path: &Path,
    header: &csv::StringRecord,
    adapter: EventLogAdapter,
) -> Result<Layout> {
    let missing = |column: &str| Error::MissingColumn {
        path: path.to_owned(),
        column: column.to_owned(),
    };
    let mode = match (find(header, PRESS), find(header, RELEASE)) {
        (Some(press), Some(release)) => Mode::Paired { press, release },
        _ => match (find(header, EVENT_KIND), find(header, TIME)) {
            (Some(kind), Some(time)) => Mode::Events { kind, time },
            _ => return Err(missing("press_ms/release_ms or event/time_ms")),
        },
    };
    let layout = Layout {
        subject: find(header, SUBJECT),
        session: find(header, SESSION),
        key_name: find(header, KEY_NAME),
        key_code: find(header, KEY_CODE),
        mode,
    };
    if layout.key_name.is_none() && layout.key_code.is_none() {
        return Err(missing("key or key_code"));
    }
    if adapter == EventLogAdapter::Aalto && layout.session.is_none() {
        return Err(missing("session_id (sentence boundary)"));
    }
    Ok(layout)
}

#[derive(Default)]
struct Builder {
    /// subject → session label → events (session index filled in later).
    subjects: BTreeMap<String, HashMap<String, Vec<KeystrokeEvent>>>,
    report: IngestReport,
}

impl Builder {
    fn push(&mut self, subject: &str, session: &str, key_code: u8, press_ms: i64, release_ms: i64) {
        if release_ms < press_ms {
            self.report.rows_rejected += 1;
            return;
        }
        self.subjects
            .entry(subject.to_owned())
            .or_default()
            .entry(session.to_owned())
            .or_default()
            .push(KeystrokeEvent {
                session: 0,
                key_code,
                press_ms,
                release_ms,
            });
    }

    fn finish(self) -> Result<(Vec<SubjectStream>, IngestReport)> {
        let mut report = self.report;
        let mut streams = Vec::with_capacity(self.subjects.len());
        for (subject, sessions) in self.subjects {
            // Sessions are ordered by their earliest press, then label, so
            // the result does not depend on row order.
            let mut labelled: Vec<(String, Vec<KeystrokeEvent>)> = sessions.into_iter().collect();
            labelled.sort_by(|(la, ea), (lb, eb)| {
                let first = |e: &[KeystrokeEvent]| e.iter().map(|x| x.press_ms).min();
                first(ea).cmp(&first(eb)).then_with(|| la.cmp(lb))
            });
            let mut names = Vec::with_capacity(labelled.len());
            let mut events = Vec::new();
            for (idx, (label, evs)) in labelled.into_iter().enumerate() {
                names.push(label);
                events.extend(evs.into_iter().map(|e| KeystrokeEvent {
                    session: idx as u32,
                    ..e
                }));
            }
            report.events += events.len();
            streams.push(SubjectStream::new(subject, names, events)?);
        }
        report.subjects = streams.len();
        Ok((streams, report))
    }
}

struct PendingEvent {
    session: String,
    key_code: u8,
    kind: Kind,
    time_ms: i64,
}

fn files_under(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_owned()]);
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let entry = entry.map_err(|e| Error::io(path, e))?;
        let p = entry.path();
        let hidden = p
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with('.'));
        if p.is_file() && !hidden {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads a free-text event log (a file, or every file in a directory) into
/// sorted per-subject streams.
///
/// Rows whose release precedes their press are rejected; press or release
/// events without a partner are dropped. Both are counted in the returned
/// report. An unparseable timestamp is an error naming the row.
pub fn load_event_log(
    path: &Path,
    adapter: EventLogAdapter,
) -> Result<(Vec<SubjectStream>, IngestReport)> {
    let mut builder = Builder::default();
    for file in files_under(path)? {
        load_file(&file, adapter, &mut builder)?;
    }
    builder.finish()
}

fn load_file(path: &Path, adapter: EventLogAdapter, builder: &mut Builder) -> Result<()> {
    let text = read_to_string(path)?;
    if text.trim().is_empty() {
        return Ok(());
    }
    let delimiter = detect_delimiter(&text);
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        // Tab-separated transcription logs contain raw quote characters.
        .quoting(delimiter != b'\t')
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    let layout = resolve_layout(path, &header, adapter)?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_owned();

    let mut pending: BTreeMap<String, Vec<PendingEvent>> = BTreeMap::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| Error::row(path, line, e.to_string()))?;
        builder.report.rows_read += 1;
        let field = |col: usize| -> Result<&str> {
            record
                .get(col)
                .ok_or_else(|| Error::row(path, line, format!("missing field `{}`", &header[col])))
        };
        let subject = match layout.subject {
            Some(col) => field(col)?.trim().to_owned(),
            None => stem.clone(),
        };
        let session = match layout.session {
            Some(col) => field(col)?.trim().to_owned(),
            None => String::new(),
        };
        let key_code = match (layout.key_name, layout.key_code) {
            (Some(col), _) if !field(col)?.is_empty() => key_code_for_name(field(col)?),
            (_, Some(col)) => field(col)?
                .trim()
                .parse::<i64>()
                .ok()
                .and_then(|c| u8::try_from(c).ok())
                .unwrap_or(0),
            _ => 0,
        };
        let timestamp = |col: usize| -> Result<i64> {
            let raw = field(col)?;
            parse_ms(raw).ok_or_else(|| {
                Error::row(
                    path,
                    line,
                    format!("`{}`: unparseable timestamp `{raw}`", &header[col]),
                )
            })
        };
        match layout.mode {
            Mode::Paired { press, release } => {
                let (p, r) = (timestamp(press)?, timestamp(release)?);
                builder.push(&subject, &session, key_code, p, r);
            }
            Mode::Events { kind, time } => {
                let Some(kind) = parse_kind(field(kind)?) else {
                    builder.report.rows_ignored += 1;
                    continue;
                };
                let time_ms = timestamp(time)?;
                pending.entry(subject).or_default().push(PendingEvent {
                    session,
                    key_code,
                    kind,
                    time_ms,
                });
            }
        }
    }

    for (subject, mut events) in pending {
        events.sort_by_key(|e| e.time_ms);
        pair_events(&subject, events, builder);
    }
    Ok(())
}

/// Pairs each release with the open press of the same key in the same
/// session. Repeated presses of a held key (auto-repeat) and releases with no
/// open press are unmatched, as are presses still open at the end.
fn pair_events(subject: &str, events: Vec<PendingEvent>, builder: &mut Builder) {
    let mut open: HashMap<(String, u8), i64> = HashMap::new();
    for ev in events {
        let slot = (ev.session, ev.key_code);
        match ev.kind {
            Kind::Press => {
                if let std::collections::hash_map::Entry::Vacant(e) = open.entry(slot) {
                    e.insert(ev.time_ms);
                } else {
                    builder.report.unmatched_dropped += 1;
                }
            }
            Kind::Release => match open.remove(&slot) {
                Some(press) => builder.push(subject, &slot.0, slot.1, press, ev.time_ms),
                None => builder.report.unmatched_dropped += 1,
            },
        }
    }
    builder.report.unmatched_dropped += open.len();
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn shuffled_rows_come_back_sorted() {
        let f = write(
            "subject_id,key,press_time_ms,release_time_ms\n\
             b,x,300,350\na,c,200,260\nb,y,100,130\na,a,0,90\nb,z,200,240\na,b,100,150\n",
        );
        let (streams, report) = load_event_log(f.path(), EventLogAdapter::Generic).unwrap();
        assert_eq!(streams.len(), 2);
        assert_eq!(report.events, 6);
        for s in &streams {
            let presses: Vec<_> = s.events().iter().map(|e| e.press_ms).collect();
            let mut sorted = presses.clone();
            sorted.sort();
            assert_eq!(presses, sorted);
            assert_eq!(s.event_count(), 3);
        }
        assert_eq!(streams[0].events()[0].key_code, b'a');
    }

    #[test]
    fn inverted_row_is_rejected_and_counted() {
        let f = write("subject_id,key,press_ms,release_ms\na,q,100,50\na,w,200,260\n");
        let (streams, report) = load_event_log(f.path(), EventLogAdapter::Generic).unwrap();
        assert_eq!(report.rows_rejected, 1);
        assert_eq!(report.rows_read, 2);
        assert_eq!(streams[0].event_count(), 1);
    }

    #[test]
    fn unparseable_timestamp_names_row() {
        let f = write("subject_id,key,press_ms,release_ms\na,q,100,150\na,w,2x0,260\n");
        let err = load_event_log(f.path(), EventLogAdapter::Generic).unwrap_err();
        assert!(matches!(err, Error::MalformedRow { row: 3, .. }), "{err}");
    }

    #[test]
    fn decimal_milliseconds_round() {
        let f = write("subject_id,key,press_ms,release_ms\na,q,100.4,150.6\n");
        let (streams, _) = load_event_log(f.path(), EventLogAdapter::Generic).unwrap();
        assert_eq!(streams[0].events()[0].press_ms, 100);
        assert_eq!(streams[0].events()[0].release_ms, 151);
    }

    #[test]
    fn aalto_sentences_become_sessions() {
        let mut text = String::from(
            "PARTICIPANT_ID\tTEST_SECTION_ID\tSENTENCE\tUSER_INPUT\tKEYSTROKE_ID\tPRESS_TIME\tRELEASE_TIME\tLETTER\tKEYCODE\n",
        );
        let mut t = 1_473_000_000_000i64;
        let mut id = 0;
        for section in 0..15 {
            for letter in ["T", "h", "e", " ", "\"q\""] {
                text.push_str(&format!(
                    "5\t{}\tThe \"q\"\tThe q\t{id}\t{t}\t{}\t{letter}\t0\n",
                    1000 + section,
                    t + 80
                ));
                t += 150;
                id += 1;
            }
        }
        let f = write(&text);
        let (streams, report) = load_event_log(f.path(), EventLogAdapter::Aalto).unwrap();
        assert_eq!(streams.len(), 1);
        assert_eq!(streams[0].sessions().len(), 15);
        assert_eq!(report.events, 75);
        assert_eq!(streams[0].events()[3].key_code, b' ');
        assert_eq!(streams[0].events()[4].key_code, b'q');
    }

    #[test]
    fn aalto_requires_session_column() {
        let f = write("subject_id,key,press_ms,release_ms\na,q,100,150\n");
        assert!(matches!(
            load_event_log(f.path(), EventLogAdapter::Aalto),
            Err(Error::MissingColumn { .. })
        ));
    }

    #[test]
    fn event_rows_are_paired_and_unmatched_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("user42.csv");
        std::fs::write(
            &path,
            "timestamp,key,direction\n\
             0,a,down\n40,a,down\n90,a,up\n\
             100,b,down\n120,c,down\n150,b,up\n\
             160,mouse,move\n170,d,up\n200,e,down\n",
        )
        .unwrap();
        let (streams, report) = load_event_log(dir.path(), EventLogAdapter::Clarkson2).unwrap();
        assert_eq!(streams.len(), 1);
        assert_eq!(streams[0].subject_id(), "user42");
        let pairs: Vec<_> = streams[0]
            .events()
            .iter()
            .map(|e| (e.key_code, e.press_ms, e.release_ms))
            .collect();
        assert_eq!(pairs, vec![(b'a', 0, 90), (b'b', 100, 150)]);
        // auto-repeat a, open c, orphan release d, open e
        assert_eq!(report.unmatched_dropped, 4);
        assert_eq!(report.rows_ignored, 1);
    }
}
