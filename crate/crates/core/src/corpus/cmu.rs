//! Fixed-text timing tables in the CMU password-benchmark layout:
//! `subject, sessionIndex, rep, H.<k0>, DD.<k0>.<k1>, UD.<k0>.<k1>, H.<k1>, ...`
//! with durations in seconds.

use std::collections::HashMap;
use std::path::Path;

use super::event_log::{detect_delimiter, read_to_string};
use super::keys::key_code_for_name;
use super::{KeystrokeEvent, SubjectStream, TimingBlock};
use crate::error::{Error, Result};
use crate::features::FeatureRow;

struct Columns {
    subject: usize,
    session: usize,
    rep: usize,
    keys: Vec<u8>,
    /// (hold, down-down, up-down) column per digraph, plus the hold of the
    /// final key in `last_hold`.
    digraphs: Vec<(usize, usize, usize)>,
    last_hold: usize,
}

fn resolve_columns(path: &Path, header: &csv::StringRecord) -> Result<Columns> {
    let find = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn {
                path: path.to_owned(),
                column: name.to_owned(),
            })
    };
    let key_names: Vec<&str> = header
        .iter()
        .filter_map(|h| h.trim().strip_prefix("H."))
        .collect();
    if key_names.len() < 2 {
        return Err(Error::MissingColumn {
            path: path.to_owned(),
            column: "H.<key> (at least two keys)".into(),
        });
    }
    let mut digraphs = Vec::with_capacity(key_names.len() - 1);
    for pair in key_names.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        digraphs.push((
            find(&format!("H.{a}"))?,
            find(&format!("DD.{a}.{b}"))?,
            find(&format!("UD.{a}.{b}"))?,
        ));
    }
    Ok(Columns {
        subject: find("subject")?,
        session: find("sessionIndex")?,
        rep: find("rep")?,
        keys: key_names.iter().map(|k| key_code_for_name(k)).collect(),
        last_hold: find(&format!("H.{}", key_names[key_names.len() - 1]))?,
        digraphs,
    })
}

#[derive(Default)]
struct Pending {
    sessions: Vec<String>,
    events: Vec<KeystrokeEvent>,
    blocks: Vec<TimingBlock>,
}

/// Loads a fixed-text timing table. Each repetition becomes its own session
/// (labelled `<sessionIndex>:<rep>`) carrying a [`TimingBlock`] with one row
/// per digraph, preserved exactly as tabulated. Press/release events are also
/// reconstructed at millisecond resolution so keystroke counts are available.
pub fn load_fixed_text_table(path: &Path) -> Result<Vec<SubjectStream>> {
    let text = read_to_string(path)?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(detect_delimiter(&text))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    let cols = resolve_columns(path, &header)?;

    let mut order: Vec<String> = Vec::new();
    let mut by_subject: HashMap<String, Pending> = HashMap::new();
    for (idx, record) in reader.records().enumerate() {
        // Line numbers count the header as line 1.
        let line = idx + 2;
        let record = record.map_err(|e| Error::row(path, line, e.to_string()))?;
        if record.len() != header.len() {
            return Err(Error::row(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let num = |col: usize| -> Result<f64> {
            let raw = &record[col];
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    Error::row(
                        path,
                        line,
                        format!("`{}`: not a number: `{raw}`", &header[col]),
                    )
                })
        };
        let subject = record[cols.subject].to_owned();
        let label = format!("{}:{}", &record[cols.session], &record[cols.rep]);
        let repetition: u32 = record[cols.rep].parse().map_err(|_| {
            Error::row(
                path,
                line,
                format!("bad repetition `{}`", &record[cols.rep]),
            )
        })?;

        let pending = by_subject.entry(subject.clone()).or_insert_with(|| {
            order.push(subject.clone());
            Pending::default()
        });
        let session = pending.sessions.len() as u32;
        pending.sessions.push(label);

        let mut rows = Vec::with_capacity(cols.digraphs.len());
        let mut press = 0.0f64;
        for (i, &(hold_col, dd_col, ud_col)) in cols.digraphs.iter().enumerate() {
            let (m, dd, ud) = (num(hold_col)?, num(dd_col)?, num(ud_col)?);
            if m < 0.0 {
                return Err(Error::row(
                    path,
                    line,
                    format!("negative hold time in `{}`", &header[hold_col]),
                ));
            }
            rows.push(FeatureRow {
                session,
                m,
                ud,
                dd,
                uu: None,
                id: f64::from(cols.keys[i]) / 255.0,
            });
            pending.events.push(event(session, cols.keys[i], press, m));
            press += dd;
        }
        let last_hold = num(cols.last_hold)?;
        if last_hold < 0.0 {
            return Err(Error::row(path, line, "negative hold time on final key"));
        }
        pending.events.push(event(
            session,
            cols.keys[cols.keys.len() - 1],
            press,
            last_hold,
        ));
        pending.blocks.push(TimingBlock {
            session,
            repetition,
            rows,
        });
    }

    order
        .into_iter()
        .map(|subject| {
            let p = by_subject
                .remove(&subject)
                .expect("subject recorded in order");
            Ok(SubjectStream::new(subject, p.sessions, p.events)?.with_timing_blocks(p.blocks))
        })
        .collect()
}

fn event(session: u32, key_code: u8, press_s: f64, hold_s: f64) -> KeystrokeEvent {
    let press_ms = (press_s * 1000.0).round() as i64;
    let release_ms = ((press_s + hold_s) * 1000.0).round() as i64;
    KeystrokeEvent {
        session,
        key_code,
        press_ms,
        release_ms: release_ms.max(press_ms),
    }
}
