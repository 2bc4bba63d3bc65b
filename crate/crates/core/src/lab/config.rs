use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::diagnose::{QuadrantThresholds, StabilityThresholds};
use super::synth::SynthConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::Aggregation;
use crate::features::{SegmentPolicy, DIGRAPH_THRESHOLD_S};

/// Environment variable overriding [`ExperimentConfig::results_dir`].
pub const RESULTS_DIR_ENV: &str = "KSNN_RESULTS_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Fixed-text timing table (one row per password repetition).
    Cmu,
    Aalto,
    Clarkson2,
    /// Any event log readable by the generic adapter, including canonical
    /// event files.
    Generic,
    /// Generated in memory from `dataset.synthetic`.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub kind: DatasetKind,
    pub path: Option<PathBuf>,
    pub policy: SegmentPolicy,
    pub outlier_threshold_s: f64,
    pub synthetic: SynthConfig,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            name: "synthetic".into(),
            kind: DatasetKind::Synthetic,
            path: None,
            policy: SegmentPolicy::SessionPerSample,
            outlier_threshold_s: DIGRAPH_THRESHOLD_S,
            synthetic: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub n_test: usize,
    pub n_validation: usize,
    /// Subjects with fewer keystrokes are excluded before splitting.
    pub min_keystrokes: usize,
    pub seed: u64,
    /// Samples kept per test or validation subject; all when unset.
    pub heldout_samples_per_subject: Option<usize>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            n_test: 5,
            n_validation: 5,
            min_keystrokes: 0,
            seed: 0,
            heldout_samples_per_subject: None,
        }
    }
}

/// The experiment grid. Every combination of `breadth`, `samples_per_subject`,
/// `seq_len` and `triplets` is one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    /// Training-pool sizes. A depth sweep with an empty list trains on every
    /// eligible training subject.
    pub breadth: Vec<usize>,
    pub samples_per_subject: Vec<usize>,
    /// Sequence lengths (M).
    pub seq_len: Vec<usize>,
    /// Triplet budgets.
    pub triplets: Vec<u64>,
    pub g_list: Vec<usize>,
    pub reruns: u32,
    pub base_seed: u64,
    pub aggregation: Aggregation,
    /// Select the best state on the validation subjects.
    pub validate: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            breadth: vec![10],
            samples_per_subject: vec![15],
            seq_len: vec![70],
            triplets: vec![120_000],
            g_list: vec![10],
            reruns: 10,
            base_seed: 0,
            aggregation: Aggregation::Mean,
            validate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub split: SplitSpec,
    pub grid: GridSpec,
    /// Base encoder hyperparameters. `seq_len`, `n_features`,
    /// `triplet_budget` and `seed` are set per run.
    pub encoder: EncoderConfig,
    pub stability: StabilityThresholds,
    pub quadrant: QuadrantThresholds,
    pub results_dir: PathBuf,
    pub save_checkpoints: bool,
    /// Skip runs whose record already exists in the results directory.
    pub resume: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::default(),
            split: SplitSpec::default(),
            grid: GridSpec::default(),
            encoder: EncoderConfig::default(),
            stability: StabilityThresholds::default(),
            quadrant: QuadrantThresholds::default(),
            results_dir: PathBuf::from("results"),
            save_checkpoints: true,
            resume: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a TOML config. A relative dataset path or results directory is
    /// taken relative to the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(p) = config.dataset.path.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if config.results_dir.is_relative() {
            config.results_dir = base.join(&config.results_dir);
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Results directory after applying the environment override.
    pub fn resolved_results_dir(&self) -> PathBuf {
        match std::env::var_os(RESULTS_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.results_dir.clone(),
        }
    }

    /// SHA-256 over the JSON form of the config, hex encoded. Fields that
    /// only say where and whether to write results are left out.
    pub fn hash(&self) -> String {
        let mut outcome = self.clone();
        outcome.results_dir = PathBuf::new();
        outcome.save_checkpoints = true;
        outcome.resume = true;
        let json = serde_json::to_vec(&outcome).expect("config serializes");
        hex(&Sha256::digest(json))
    }

    /// Structural checks that need no data.
    pub fn validate(&self) -> Result<()> {
        let grid = &self.grid;
        let lists: [(&str, bool, bool); 5] = [
            ("breadth", false, grid.breadth.contains(&0)),
            (
                "samples_per_subject",
                grid.samples_per_subject.is_empty(),
                grid.samples_per_subject.contains(&0),
            ),
            (
                "seq_len",
                grid.seq_len.is_empty(),
                grid.seq_len.contains(&0),
            ),
            (
                "triplets",
                grid.triplets.is_empty(),
                grid.triplets.contains(&0),
            ),
            ("g_list", grid.g_list.is_empty(), grid.g_list.contains(&0)),
        ];
        for (name, empty, zero) in lists {
            if empty {
                return Err(Error::Config(format!("grid.{name} is empty")));
            }
            if zero {
                return Err(Error::Config(format!(
                    "grid.{name} entries must be positive"
                )));
            }
        }
        if grid.reruns == 0 {
            return Err(Error::Config("grid.reruns must be at least 1".into()));
        }
        if self.split.n_test < 2 {
            return Err(Error::Config("split.n_test must be at least 2".into()));
        }
        if !(self.dataset.outlier_threshold_s > 0.0) {
            return Err(Error::Config(
                "dataset.outlier_threshold_s must be positive".into(),
            ));
        }
        match (self.dataset.kind, &self.dataset.path) {
            (DatasetKind::Synthetic, _) | (_, Some(_)) => {}
            (kind, None) => {
                return Err(Error::Config(format!(
                    "dataset.path is required for {kind:?} data"
                )))
            }
        }
        let mut probe = self.encoder.clone();
        probe.seq_len = grid.seq_len[0];
        probe.validate()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
