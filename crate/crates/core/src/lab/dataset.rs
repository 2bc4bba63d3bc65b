use std::collections::BTreeMap;

use super::config::{DatasetKind, DatasetSpec, ExperimentConfig};
use super::synth::generate_corpus;
use crate::corpus::{
    eligible_subjects, load_event_log, load_fixed_text_table, make_split, EventLogAdapter,
    IngestReport, SplitPlan, SubjectStream,
};
use crate::error::{Error, Result};
use crate::features::{
    extract_features, filter_outliers, prepare_samples, FeatureLayout, FeatureSample, SampleRecipe,
    SegmentPolicy,
};

/// Reads the configured dataset. File-backed event logs also return their
/// ingestion report.
pub fn load_streams(spec: &DatasetSpec) -> Result<(Vec<SubjectStream>, Option<IngestReport>)> {
    let path = || {
        spec.path.as_deref().ok_or_else(|| {
            Error::Config(format!("dataset.path is required for {:?} data", spec.kind))
        })
    };
    let event_log = |adapter| load_event_log(path()?, adapter).map(|(s, r)| (s, Some(r)));
    match spec.kind {
        DatasetKind::Cmu => Ok((load_fixed_text_table(path()?)?, None)),
        DatasetKind::Aalto => event_log(EventLogAdapter::Aalto),
        DatasetKind::Clarkson2 => event_log(EventLogAdapter::Clarkson2),
        DatasetKind::Generic => event_log(EventLogAdapter::Generic),
        DatasetKind::Synthetic => Ok((generate_corpus(&spec.synthetic)?, None)),
    }
}

/// What segmentation can get out of one subject, independent of `M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubjectVolume {
    /// Feature rows surviving the outlier filter.
    pub rows: usize,
    /// Sessions with at least one surviving row.
    pub sessions: usize,
}

impl SubjectVolume {
    fn of(stream: &SubjectStream, threshold: f64) -> Self {
        let (rows, _) = filter_outliers(extract_features(stream), threshold);
        let sessions = rows.chunk_by(|a, b| a.session == b.session).count();
        SubjectVolume {
            rows: rows.len(),
            sessions,
        }
    }

    pub fn samples(&self, policy: SegmentPolicy, seq_len: usize) -> usize {
        match policy {
            SegmentPolicy::SessionPerSample => self.sessions,
            SegmentPolicy::FixedWindow => self.rows / seq_len,
        }
    }
}

/// A loaded, split dataset.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub spec: DatasetSpec,
    pub split: SplitPlan,
    pub layout: FeatureLayout,
    pub ingest: Option<IngestReport>,
    streams: BTreeMap<String, SubjectStream>,
    volumes: BTreeMap<String, SubjectVolume>,
}

impl PreparedDataset {
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        let (streams, ingest) = load_streams(&config.dataset)?;
        Self::from_streams(config, streams, ingest)
    }

    /// Applies eligibility and the subject split to already loaded streams.
    pub fn from_streams(
        config: &ExperimentConfig,
        streams: Vec<SubjectStream>,
        ingest: Option<IngestReport>,
    ) -> Result<Self> {
        let layout = match streams.first() {
            Some(s) => FeatureLayout::of_stream(s),
            None => {
                return Err(Error::InsufficientSubjects {
                    needed: 2,
                    available: 0,
                })
            }
        };
        let eligible = eligible_subjects(&streams, config.split.min_keystrokes);
        let split = make_split(
            &eligible,
            config.split.n_test,
            config.split.n_validation,
            config.split.seed,
        )?;
        let threshold = config.dataset.outlier_threshold_s;
        let streams: BTreeMap<String, SubjectStream> = streams
            .into_iter()
            .filter(|s| eligible.contains(s.subject_id()))
            .map(|s| (s.subject_id().to_owned(), s))
            .collect();
        let volumes = streams
            .iter()
            .map(|(id, s)| (id.clone(), SubjectVolume::of(s, threshold)))
            .collect();
        Ok(PreparedDataset {
            spec: config.dataset.clone(),
            split,
            layout,
            ingest,
            streams,
            volumes,
        })
    }

    pub fn n_features(&self) -> usize {
        self.layout.columns()
    }

    pub fn subject_count(&self) -> usize {
        self.streams.len()
    }

    pub fn stream(&self, subject: &str) -> Option<&SubjectStream> {
        self.streams.get(subject)
    }

    /// Samples a subject can supply at sequence length `seq_len`.
    pub fn available_samples(&self, subject: &str, seq_len: usize) -> usize {
        self.volumes
            .get(subject)
            .map_or(0, |v| v.samples(self.spec.policy, seq_len))
    }

    /// Mean samples per eligible subject at `seq_len`.
    pub fn mean_samples(&self, seq_len: usize) -> f64 {
        if self.volumes.is_empty() {
            return 0.0;
        }
        let total: usize = self
            .volumes
            .keys()
            .map(|s| self.available_samples(s, seq_len))
            .sum();
        total as f64 / self.volumes.len() as f64
    }

    /// The first `max_samples` samples of each subject, in subject order.
    pub fn samples(
        &self,
        subjects: impl IntoIterator<Item = impl AsRef<str>>,
        seq_len: usize,
        max_samples: usize,
    ) -> Result<Vec<(String, Vec<FeatureSample>)>> {
        let recipe = SampleRecipe {
            policy: self.spec.policy,
            seq_len,
            max_samples,
            outlier_threshold_s: self.spec.outlier_threshold_s,
        };
        subjects
            .into_iter()
            .map(|s| {
                let s = s.as_ref();
                let stream = self
                    .stream(s)
                    .ok_or_else(|| Error::Config(format!("unknown subject `{s}`")))?;
                Ok((s.to_owned(), prepare_samples(stream, &recipe)))
            })
            .collect()
    }
}
