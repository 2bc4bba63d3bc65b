//! Timing and key-identity features, outlier filtering, and segmentation into
//! fixed-shape samples with a padding mask.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::SubjectStream;
use crate::error::{Error, Result};

/// Default digraph outlier bound, in seconds.
pub const DIGRAPH_THRESHOLD_S: f64 = 5.0;

/// Features of one key and its successor. Durations are in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    /// Session index within the source stream.
    pub session: u32,
    /// Hold time of the first key.
    pub m: f64,
    /// Release of the first key to press of the second; negative on rollover.
    pub ud: f64,
    /// Press to press.
    pub dd: f64,
    /// Release to release. Absent for fixed-text timing tables.
    pub uu: Option<f64>,
    /// Key code of the first key divided by 255.
    pub id: f64,
}

/// Column layout of a sample matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureLayout {
    /// `m, ud, dd, id` (timing tables without release-to-release latency).
    FixedText,
    /// `m, ud, dd, uu, id`.
    FreeText,
}

impl FeatureLayout {
    pub fn columns(self) -> usize {
        match self {
            FeatureLayout::FixedText => 4,
            FeatureLayout::FreeText => 5,
        }
    }

    pub fn column_names(self) -> &'static [&'static str] {
        match self {
            FeatureLayout::FixedText => &["m", "ud", "dd", "id"],
            FeatureLayout::FreeText => &["m", "ud", "dd", "uu", "id"],
        }
    }

    pub fn of_stream(stream: &SubjectStream) -> Self {
        if stream.timing_blocks().is_empty() {
            FeatureLayout::FreeText
        } else {
            FeatureLayout::FixedText
        }
    }

    fn write_row(self, row: &FeatureRow, out: &mut [f32]) {
        out[0] = row.m as f32;
        out[1] = row.ud as f32;
        out[2] = row.dd as f32;
        match self {
            FeatureLayout::FixedText => out[3] = row.id as f32,
            FeatureLayout::FreeText => {
                out[3] = row.uu.unwrap_or(0.0) as f32;
                out[4] = row.id as f32;
            }
        }
    }
}

/// One feature row per consecutive key pair inside each session. Streams
/// loaded from a timing table return their tabulated rows unchanged.
pub fn extract_features(stream: &SubjectStream) -> Vec<FeatureRow> {
    if !stream.timing_blocks().is_empty() {
        return stream
            .timing_blocks()
            .iter()
            .flat_map(|b| b.rows.iter().copied())
            .collect();
    }
    let ms = |v: i64| v as f64 / 1000.0;
    let mut rows = Vec::with_capacity(stream.event_count());
    for (session, events) in stream.session_slices() {
        rows.extend(events.windows(2).map(|pair| {
            let (a, b) = (pair[0], pair[1]);
            FeatureRow {
                session,
                m: ms(a.release_ms - a.press_ms),
                ud: ms(b.press_ms - a.release_ms),
                dd: ms(b.press_ms - a.press_ms),
                uu: Some(ms(b.release_ms - a.release_ms)),
                id: f64::from(a.key_code) / 255.0,
            }
        }));
    }
    rows
}

/// Drops rows with any digraph latency strictly above `threshold` seconds.
/// Returns the kept rows (in order) and the number removed.
pub fn filter_outliers(rows: Vec<FeatureRow>, threshold: f64) -> (Vec<FeatureRow>, usize) {
    let before = rows.len();
    let kept: Vec<FeatureRow> = rows
        .into_iter()
        .filter(|r| r.ud <= threshold && r.dd <= threshold && r.uu.is_none_or(|uu| uu <= threshold))
        .collect();
    let removed = before - kept.len();
    (kept, removed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentPolicy {
    /// One sample per session, truncated or zero-padded to the sequence length.
    SessionPerSample,
    /// Consecutive non-overlapping windows of exactly the sequence length; a
    /// trailing partial window is discarded.
    FixedWindow,
}

/// Where a sample's first row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSource {
    pub session: u32,
    /// Index of the first row within the filtered row list.
    pub start: usize,
}

/// An `M × n` feature matrix with a prefix validity mask. Padding rows are
/// all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSample {
    subject_id: String,
    matrix: Array2<f32>,
    valid_rows: usize,
    source: SampleSource,
}

impl FeatureSample {
    /// Builds a sample, checking that the mask is a prefix of `true`s and that
    /// every masked-out row is zero.
    pub fn new(
        subject_id: impl Into<String>,
        matrix: Array2<f32>,
        mask: &[bool],
        source: SampleSource,
    ) -> Result<Self> {
        if mask.len() != matrix.nrows() {
            return Err(Error::Shape(format!(
                "mask has {} entries for {} rows",
                mask.len(),
                matrix.nrows()
            )));
        }
        let valid_rows = mask.iter().take_while(|&&v| v).count();
        if mask[valid_rows..].iter().any(|&v| v) {
            return Err(Error::Shape("mask is not a prefix mask".into()));
        }
        if matrix
            .rows()
            .into_iter()
            .skip(valid_rows)
            .any(|r| r.iter().any(|&x| x != 0.0))
        {
            return Err(Error::Shape("padding rows must be zero".into()));
        }
        Ok(FeatureSample {
            subject_id: subject_id.into(),
            matrix,
            valid_rows,
            source,
        })
    }

    fn from_rows(
        subject_id: &str,
        rows: &[FeatureRow],
        seq_len: usize,
        layout: FeatureLayout,
        start: usize,
    ) -> Self {
        let mut matrix = Array2::zeros((seq_len, layout.columns()));
        let valid_rows = rows.len().min(seq_len);
        for (i, row) in rows.iter().take(valid_rows).enumerate() {
            layout.write_row(
                row,
                matrix.row_mut(i).as_slice_mut().expect("standard layout"),
            );
        }
        FeatureSample {
            subject_id: subject_id.to_owned(),
            matrix,
            valid_rows,
            source: SampleSource {
                session: rows.first().map_or(0, |r| r.session),
                start,
            },
        }
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn matrix(&self) -> &Array2<f32> {
        &self.matrix
    }

    pub fn seq_len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.matrix.ncols()
    }

    /// Number of leading real rows.
    pub fn valid_rows(&self) -> usize {
        self.valid_rows
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.seq_len()).map(|i| i < self.valid_rows).collect()
    }

    pub fn source(&self) -> SampleSource {
        self.source
    }
}

/// Cuts rows into at most `max_samples` samples of `seq_len` rows, in stream
/// order. Returns an empty list when nothing can be produced.
pub fn segment_samples(
    subject_id: &str,
    rows: &[FeatureRow],
    layout: FeatureLayout,
    policy: SegmentPolicy,
    seq_len: usize,
    max_samples: usize,
) -> Vec<FeatureSample> {
    assert!(
        seq_len >= 1 && max_samples >= 1,
        "seq_len and max_samples must be positive"
    );
    match policy {
        SegmentPolicy::SessionPerSample => {
            let mut start = 0;
            rows.chunk_by(|a, b| a.session == b.session)
                .map(|block| {
                    let sample =
                        FeatureSample::from_rows(subject_id, block, seq_len, layout, start);
                    start += block.len();
                    sample
                })
                .take(max_samples)
                .collect()
        }
        SegmentPolicy::FixedWindow => rows
            .chunks_exact(seq_len)
            .take(max_samples)
            .enumerate()
            .map(|(i, w)| FeatureSample::from_rows(subject_id, w, seq_len, layout, i * seq_len))
            .collect(),
    }
}

/// End-to-end recipe from a stream to samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleRecipe {
    pub policy: SegmentPolicy,
    pub seq_len: usize,
    pub max_samples: usize,
    pub outlier_threshold_s: f64,
}

pub fn prepare_samples(stream: &SubjectStream, recipe: &SampleRecipe) -> Vec<FeatureSample> {
    let (rows, _) = filter_outliers(extract_features(stream), recipe.outlier_threshold_s);
    segment_samples(
        stream.subject_id(),
        &rows,
        FeatureLayout::of_stream(stream),
        recipe.policy,
        recipe.seq_len,
        recipe.max_samples,
    )
}

/// Writes the real rows of each sample, one line per row, prefixed by the
/// sample's index.
pub fn write_feature_dump<W: Write>(writer: W, samples: &[FeatureSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let Some(first) = samples.first() else {
        w.flush().map_err(|e| Error::io("<features>", e))?;
        return Ok(());
    };
    let layout = if first.n_features() == 4 {
        FeatureLayout::FixedText
    } else {
        FeatureLayout::FreeText
    };
    let mut header = vec!["subject_id", "sample_index", "row"];
    header.extend_from_slice(layout.column_names());
    w.write_record(&header)?;
    for (idx, sample) in samples.iter().enumerate() {
        for (r, row) in sample
            .matrix
            .rows()
            .into_iter()
            .take(sample.valid_rows)
            .enumerate()
        {
            let mut rec = vec![sample.subject_id.clone(), idx.to_string(), r.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io("<features>", e))?;
    Ok(())
}
