//! On-disk results layout:
//!
//! ```text
//! <root>/runs/<run_id>.csv        per-G result rows
//! <root>/runs/<run_id>.log.csv    training log
//! <root>/runs/<run_id>.json       the run record, written last
//! <root>/checkpoints/<sha256>.safetensors
//! <root>/manifest-<sweep>.json
//! ```
//!
//! Each run owns its files, so concurrent runs never share a writer. A run
//! counts as finished once its JSON record exists; records are never
//! overwritten.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{hex, ExperimentConfig};
use super::run::{Cell, RunRecord, SweepKind};
use crate::encoder::{save_state, state_digest, write_training_log, EncoderState, TrainLogEntry};
use crate::error::{Error, Result};

pub const RESULTS_HEADER: [&str; 9] = [
    "run_id",
    "dataset",
    "breadth",
    "samples_per_subject",
    "M",
    "triplets",
    "G",
    "seed",
    "eer",
];

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub cell: Cell,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRun {
    pub run_id: String,
    pub cell: Cell,
    pub rerun: u32,
    pub seed: u64,
    pub checkpoint: Option<String>,
}

/// Everything needed to rerun a sweep exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub sweep: SweepKind,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub eval_seed: u64,
    pub validation_seed: u64,
    pub runs: Vec<ManifestRun>,
    pub skipped: Vec<SkippedCell>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "{}: manifest format version {} is not supported",
                path.display(),
                manifest.format_version
            )));
        }
        if manifest.config.hash() != manifest.config_hash {
            return Err(Error::Config(format!(
                "{}: config does not match its recorded hash",
                path.display()
            )));
        }
        Ok(manifest)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// File name a checkpoint of `state` is stored under.
pub fn checkpoint_name(state: &EncoderState) -> Result<String> {
    Ok(format!("{}.safetensors", hex(&state_digest(state)?)))
}

#[derive(Debug, Clone)]
pub struct ResultsStore {
    root: PathBuf,
}

impl ResultsStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for dir in [root.join("runs"), root.join("checkpoints")] {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(ResultsStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn run_path(&self, run_id: &str, suffix: &str) -> PathBuf {
        self.root.join("runs").join(format!("{run_id}{suffix}"))
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn manifest_path(&self, sweep: SweepKind) -> PathBuf {
        self.root.join(format!("manifest-{sweep}.json"))
    }

    pub fn load_record(&self, run_id: &str) -> Result<Option<RunRecord>> {
        let path = self.run_path(run_id, ".json");
        match fs::read_to_string(&path) {
            Ok(text) => Ok(Some(serde_json::from_str(&text)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    /// Writes the result rows, then the record. Refuses to replace an
    /// existing record.
    pub fn write_record(&self, record: &RunRecord) -> Result<()> {
        let json_path = self.run_path(&record.run_id, ".json");
        if json_path.exists() {
            return Err(Error::Config(format!(
                "run `{}` already has a record",
                record.run_id
            )));
        }
        let mut rows = Vec::new();
        write_result_rows(&mut rows, std::slice::from_ref(record), true)?;
        write_atomic(&self.run_path(&record.run_id, ".csv"), &rows)?;
        write_atomic(&json_path, &serde_json::to_vec_pretty(record)?)
    }

    pub fn write_training_log(&self, run_id: &str, log: &[TrainLogEntry]) -> Result<()> {
        let mut bytes = Vec::new();
        write_training_log(&mut bytes, log)?;
        write_atomic(&self.run_path(run_id, ".log.csv"), &bytes)
    }

    /// Saves a checkpoint named by the digest of its contents and returns the
    /// file name.
    pub fn store_checkpoint(&self, state: &EncoderState) -> Result<String> {
        let name = checkpoint_name(state)?;
        let path = self.checkpoint_path(&name);
        if !path.exists() {
            save_state(state, &path)?;
        }
        Ok(name)
    }

    /// Every finished record, ordered by run id.
    pub fn load_records(&self) -> Result<Vec<RunRecord>> {
        let dir = self.root.join("runs");
        let mut records = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                records.push(serde_json::from_str::<RunRecord>(&text)?);
            }
        }
        records.sort_by(|a, b| a.run_id.cmp(&b.run_id));
        Ok(records)
    }

    pub fn write_manifest(&self, manifest: &Manifest) -> Result<PathBuf> {
        let path = self.manifest_path(manifest.sweep);
        write_atomic(&path, &serde_json::to_vec_pretty(manifest)?)?;
        Ok(path)
    }
}

/// One row per (record, G) in the results-table layout. EER is a fraction.
pub fn write_result_rows<W: std::io::Write>(
    writer: W,
    records: &[RunRecord],
    header: bool,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if header {
        w.write_record(RESULTS_HEADER)?;
    }
    for r in records {
        for (g, eer) in &r.eer_by_g {
            w.write_record([
                r.run_id.clone(),
                r.dataset.clone(),
                r.cell.breadth.to_string(),
                r.cell.samples_per_subject.to_string(),
                r.cell.seq_len.to_string(),
                r.cell.triplets.to_string(),
                g.to_string(),
                r.seed.to_string(),
                eer.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<results>", e))?;
    Ok(())
}
