use std::collections::BTreeMap;
use std::fmt;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::dataset::PreparedDataset;
use super::store::{
    checkpoint_name, Manifest, ManifestRun, ResultsStore, SkippedCell, MANIFEST_FORMAT_VERSION,
};
use crate::encoder::{train, EncoderConfig, EncoderState, TrainLogEntry};
use crate::error::{Error, Result};
use crate::eval::{EmbeddedTestSet, EvalResult};
use crate::features::FeatureSample;
use crate::sampler::TripletPool;

/// Deterministic 64-bit seed from a base seed and a list of labels: the first
/// eight bytes of SHA-256 over the base seed and the length-prefixed labels.
pub fn derive_seed(base: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(b"ksnn-seed");
    h.update(base.to_le_bytes());
    for label in labels {
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// One point of the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub breadth: usize,
    pub samples_per_subject: usize,
    pub seq_len: usize,
    pub triplets: u64,
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "b{}-n{}-m{}-t{}",
            self.breadth, self.samples_per_subject, self.seq_len, self.triplets
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Breadth,
    Depth,
    Single,
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepKind::Breadth => "breadth",
            SweepKind::Depth => "depth",
            SweepKind::Single => "single",
        })
    }
}

pub fn run_id(sweep: SweepKind, cell: &Cell, rerun: u32) -> String {
    format!("{sweep}-{cell}-r{rerun:02}")
}

/// Seed of one rerun of one cell; independent of every other cell.
pub fn run_seed(base_seed: u64, cell: &Cell, rerun: u32) -> u64 {
    derive_seed(base_seed, &["run", &cell.to_string(), &rerun.to_string()])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub initial: f64,
    #[serde(rename = "final")]
    pub last: f64,
    pub min: f64,
    pub steps: u64,
    pub best_step: u64,
}

impl LossSummary {
    fn of(log: &[TrainLogEntry], best_step: u64) -> Self {
        LossSummary {
            initial: log.first().map_or(f64::NAN, |e| e.mean_loss),
            last: log.last().map_or(f64::NAN, |e| e.mean_loss),
            min: log
                .iter()
                .map(|e| e.mean_loss)
                .fold(f64::INFINITY, f64::min),
            steps: log.len() as u64,
            best_step,
        }
    }
}

/// The outcome of one training-and-evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub sweep: SweepKind,
    pub dataset: String,
    pub cell: Cell,
    pub rerun: u32,
    pub seed: u64,
    pub eval_seed: u64,
    pub config_hash: String,
    pub train_subjects: Vec<String>,
    pub possible_triplets: u128,
    /// Mean EER (fraction) per gallery size.
    pub eer_by_g: BTreeMap<usize, f64>,
    pub loss: LossSummary,
    pub best_validation_eer: Option<f64>,
    pub wall_clock_s: f64,
    pub finished_unix_s: u64,
    pub checkpoint: Option<String>,
}

impl RunRecord {
    /// Equality ignoring wall-clock fields.
    pub fn same_outcome(&self, other: &RunRecord) -> bool {
        let strip = |r: &RunRecord| RunRecord {
            wall_clock_s: 0.0,
            finished_unix_s: 0,
            ..r.clone()
        };
        strip(self) == strip(other)
    }
}

/// A cell together with the subjects eligible to train it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedCell {
    pub cell: Cell,
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SweepPlan {
    pub cells: Vec<PlannedCell>,
    pub skipped: Vec<SkippedCell>,
}

/// Outcome of a sweep: one record per finished run plus skipped cells.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub records: Vec<RunRecord>,
    pub skipped: Vec<SkippedCell>,
    pub manifest: Manifest,
}

struct HeldOut {
    test: EmbeddableSet,
    validation: Option<(EmbeddableSet, usize)>,
}

type EmbeddableSet = Vec<(String, Vec<FeatureSample>)>;

/// A loaded dataset plus everything a run needs besides its cell.
pub struct Lab {
    config: ExperimentConfig,
    data: PreparedDataset,
    store: Option<ResultsStore>,
    heldout: BTreeMap<usize, HeldOut>,
}

impl Lab {
    /// Validates the config and loads the dataset. Results are persisted only
    /// after [`Lab::with_store`].
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let data = PreparedDataset::load(&config)?;
        Ok(Self::with_dataset(config, data))
    }

    pub fn with_dataset(config: ExperimentConfig, data: PreparedDataset) -> Self {
        Lab {
            config,
            data,
            store: None,
            heldout: BTreeMap::new(),
        }
    }

    pub fn with_store(mut self, store: ResultsStore) -> Self {
        self.store = Some(store);
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn data(&self) -> &PreparedDataset {
        &self.data
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.config.grid.base_seed, &["eval"])
    }

    pub fn validation_seed(&self) -> u64 {
        derive_seed(self.config.grid.base_seed, &["validation"])
    }

    fn heldout_cap(&self) -> usize {
        self.config
            .split
            .heldout_samples_per_subject
            .unwrap_or(usize::MAX)
    }

    fn max_g(&self) -> usize {
        self.config.grid.g_list.iter().copied().max().unwrap_or(0)
    }

    /// Enumerates the grid and checks each cell against the data. With
    /// `fill_breadth`, an empty breadth list means every eligible training
    /// subject.
    pub fn plan(&self, fill_breadth: bool) -> SweepPlan {
        let grid = &self.config.grid;
        let mut plan = SweepPlan::default();
        let breadths: Vec<Option<usize>> = if grid.breadth.is_empty() && fill_breadth {
            vec![None]
        } else {
            grid.breadth.iter().map(|&b| Some(b)).collect()
        };
        for &m in &grid.seq_len {
            for &n in &grid.samples_per_subject {
                let candidates: Vec<String> = self
                    .data
                    .split
                    .train_subjects
                    .iter()
                    .filter(|s| self.data.available_samples(s, m) >= n)
                    .cloned()
                    .collect();
                for &b in &breadths {
                    for &t in &grid.triplets {
                        let cell = Cell {
                            breadth: b.unwrap_or(candidates.len()),
                            samples_per_subject: n,
                            seq_len: m,
                            triplets: t,
                        };
                        match self.infeasibility(&cell, candidates.len()) {
                            Some(reason) => plan.skipped.push(SkippedCell { cell, reason }),
                            None => plan.cells.push(PlannedCell {
                                cell,
                                candidates: candidates.clone(),
                            }),
                        }
                    }
                }
            }
        }
        plan
    }

    fn infeasibility(&self, cell: &Cell, candidates: usize) -> Option<String> {
        if cell.samples_per_subject < 2 {
            return Some("samples_per_subject must be at least 2 to form genuine pairs".into());
        }
        if cell.breadth < 2 {
            return Some(format!(
                "training pool of {} subjects; at least 2 needed",
                cell.breadth
            ));
        }
        if cell.breadth > candidates {
            return Some(format!(
                "pool of {} subjects requested but only {candidates} training subjects supply {} samples at M={}",
                cell.breadth, cell.samples_per_subject, cell.seq_len
            ));
        }
        let need = self.max_g() + 1;
        let cap = self.heldout_cap();
        if let Some(s) = self
            .data
            .split
            .test_subjects
            .iter()
            .find(|s| self.data.available_samples(s, cell.seq_len).min(cap) < need)
        {
            return Some(format!(
                "test subject `{s}` supplies {} samples at M={}; G={} needs {need}",
                self.data.available_samples(s, cell.seq_len).min(cap),
                cell.seq_len,
                self.max_g()
            ));
        }
        None
    }

    fn heldout(&mut self, seq_len: usize) -> Result<&HeldOut> {
        if !self.heldout.contains_key(&seq_len) {
            let cap = self.heldout_cap();
            let test = self
                .data
                .samples(&self.data.split.test_subjects, seq_len, cap)?;
            let mut validation = None;
            if self.config.grid.validate && self.data.split.validation_subjects.len() >= 2 {
                let set = self
                    .data
                    .samples(&self.data.split.validation_subjects, seq_len, cap)?;
                let fewest = set.iter().map(|(_, v)| v.len()).min().unwrap_or(0);
                let g = self
                    .config
                    .grid
                    .g_list
                    .iter()
                    .copied()
                    .min()
                    .unwrap_or(1)
                    .min(fewest.saturating_sub(1));
                if g >= 1 {
                    validation = Some((set, g));
                }
            }
            self.heldout.insert(seq_len, HeldOut { test, validation });
        }
        Ok(&self.heldout[&seq_len])
    }

    /// Encoder hyperparameters for one run.
    pub fn encoder_config(&self, cell: &Cell, seed: u64) -> EncoderConfig {
        EncoderConfig {
            seq_len: cell.seq_len,
            n_features: self.data.n_features(),
            triplet_budget: cell.triplets,
            seed: derive_seed(seed, &["encoder"]),
            ..self.config.encoder.clone()
        }
    }

    /// Draws the training pool for one run: `cell.breadth` distinct subjects
    /// from `candidates`, returned in sorted order.
    pub fn draw_pool(&self, candidates: &[String], cell: &Cell, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["pool"]));
        let mut picked: Vec<String> =
            rand::seq::index::sample(&mut rng, candidates.len(), cell.breadth)
                .into_iter()
                .map(|i| candidates[i].clone())
                .collect();
        picked.sort();
        picked
    }

    /// Trains and evaluates one rerun of a planned cell with an explicit seed.
    pub fn run_planned(
        &mut self,
        sweep: SweepKind,
        planned: &PlannedCell,
        rerun: u32,
        seed: u64,
    ) -> Result<RunRecord> {
        let started = Instant::now();
        let cell = planned.cell;
        let id = run_id(sweep, &cell, rerun);
        let pool_names = self.draw_pool(&planned.candidates, &cell, seed);
        let pool_samples =
            self.data
                .samples(&pool_names, cell.seq_len, cell.samples_per_subject)?;
        let pool = TripletPool::new(pool_samples.iter().map(|(s, v)| (s.clone(), v.len())))?;
        let samples: Vec<Vec<FeatureSample>> = pool_samples.into_iter().map(|(_, v)| v).collect();
        let encoder = self.encoder_config(&cell, seed);
        let triplets = pool.generate(cell.triplets, derive_seed(seed, &["triplets"]));

        let (eval_seed, validation_seed, aggregation) = (
            self.eval_seed(),
            self.validation_seed(),
            self.config.grid.aggregation,
        );
        let g_list = self.config.grid.g_list.clone();
        let heldout = self.heldout(cell.seq_len)?;
        let mut best_validation: Option<f64> = None;
        let outcome = match &heldout.validation {
            Some((set, g)) => {
                let g = *g;
                let mut hook = |state: &EncoderState| -> Result<f64> {
                    let eer = EmbeddedTestSet::embed(state, set)?.evaluate(
                        &[g],
                        validation_seed,
                        aggregation,
                    )?[0]
                        .mean_eer;
                    best_validation = Some(best_validation.map_or(eer, |b: f64| b.min(eer)));
                    Ok(eer)
                };
                train(&encoder, &samples, triplets, Some(&mut hook))?
            }
            None => train(&encoder, &samples, triplets, None)?,
        };
        let results: Vec<EvalResult> = EmbeddedTestSet::embed(&outcome.state, &heldout.test)?
            .evaluate(&g_list, eval_seed, aggregation)?;

        // The name is a content hash, so replays without a store still
        // record which weights they produced.
        let checkpoint = match (&self.store, self.config.save_checkpoints) {
            (Some(store), true) => Some(store.store_checkpoint(&outcome.state)?),
            (None, true) => Some(checkpoint_name(&outcome.state)?),
            (_, false) => None,
        };
        if let Some(store) = &self.store {
            store.write_training_log(&id, &outcome.log)?;
        }
        let record = RunRecord {
            run_id: id,
            sweep,
            dataset: self.config.dataset.name.clone(),
            cell,
            rerun,
            seed,
            eval_seed,
            config_hash: self.config.hash(),
            train_subjects: pool_names,
            possible_triplets: pool.possible(),
            eer_by_g: results.iter().map(|r| (r.g, r.mean_eer)).collect(),
            loss: LossSummary::of(&outcome.log, outcome.best_step),
            best_validation_eer: best_validation,
            wall_clock_s: started.elapsed().as_secs_f64(),
            finished_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            checkpoint,
        };
        if let Some(store) = &self.store {
            store.write_record(&record)?;
        }
        Ok(record)
    }

    /// Runs every planned cell for every rerun, reusing finished records when
    /// the config asks to resume.
    pub fn run_plan(&mut self, sweep: SweepKind, plan: SweepPlan) -> Result<SweepOutcome> {
        for s in &plan.skipped {
            log::warn!("skipping cell {}: {}", s.cell, s.reason);
        }
        let mut records = Vec::new();
        let mut runs = Vec::new();
        for planned in &plan.cells {
            for rerun in 0..self.config.grid.reruns {
                let seed = run_seed(self.config.grid.base_seed, &planned.cell, rerun);
                let id = run_id(sweep, &planned.cell, rerun);
                let existing = match (&self.store, self.config.resume) {
                    (Some(store), true) => store.load_record(&id)?,
                    _ => None,
                };
                let record = match existing {
                    Some(r) if r.config_hash == self.config.hash() => {
                        log::info!("{id}: reusing finished record");
                        r
                    }
                    Some(_) => return Err(Error::Config(format!(
                        "run `{id}` exists with a different config; use a fresh results directory"
                    ))),
                    None => {
                        log::info!("{id}: training {} triplets", planned.cell.triplets);
                        let r = self.run_planned(sweep, planned, rerun, seed)?;
                        log::info!("{id}: EER by G {:?} in {:.1}s", r.eer_by_g, r.wall_clock_s);
                        r
                    }
                };
                runs.push(ManifestRun {
                    run_id: record.run_id.clone(),
                    cell: record.cell,
                    rerun,
                    seed,
                    checkpoint: record.checkpoint.clone(),
                });
                records.push(record);
            }
        }
        let manifest = Manifest {
            format_version: MANIFEST_FORMAT_VERSION,
            sweep,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            eval_seed: self.eval_seed(),
            validation_seed: self.validation_seed(),
            runs,
            skipped: plan.skipped.clone(),
        };
        if let Some(store) = &self.store {
            store.write_manifest(&manifest)?;
        }
        Ok(SweepOutcome {
            records,
            skipped: plan.skipped,
            manifest,
        })
    }

    /// Breadth sweep: every pool size must be feasible before anything
    /// trains; each rerun draws a fresh pool while the test subjects stay
    /// fixed.
    pub fn run_breadth_sweep(&mut self) -> Result<SweepOutcome> {
        if self.config.grid.breadth.is_empty() {
            return Err(Error::Config("grid.breadth is empty".into()));
        }
        let plan = self.plan(false);
        if let Some(s) = plan.skipped.first() {
            return Err(Error::Infeasible(format!("cell {}: {}", s.cell, s.reason)));
        }
        self.run_plan(SweepKind::Breadth, plan)
    }

    /// Depth sweep: the full factorial over samples per subject, sequence
    /// length and triplet budget. Infeasible cells are skipped and reported.
    pub fn run_depth_sweep(&mut self) -> Result<SweepOutcome> {
        let plan = self.plan(true);
        self.run_plan(SweepKind::Depth, plan)
    }

    /// Reruns every run listed in a manifest with its recorded seed.
    pub fn replay(&mut self, manifest: &Manifest) -> Result<Vec<RunRecord>> {
        let plan =
            self.plan(manifest.sweep != SweepKind::Breadth || self.config.grid.breadth.is_empty());
        manifest
            .runs
            .iter()
            .map(|run| {
                let planned = plan
                    .cells
                    .iter()
                    .find(|p| p.cell == run.cell)
                    .cloned()
                    .ok_or_else(|| {
                        Error::Infeasible(format!("cell {} is not feasible on this data", run.cell))
                    })?;
                self.run_planned(manifest.sweep, &planned, run.rerun, run.seed)
            })
            .collect()
    }
}

fn open_lab(config: ExperimentConfig) -> Result<Lab> {
    let store = ResultsStore::open(config.resolved_results_dir())?;
    Ok(Lab::new(config)?.with_store(store))
}

/// Loads the dataset, runs the breadth grid and persists every record.
pub fn run_breadth_sweep(config: ExperimentConfig) -> Result<SweepOutcome> {
    open_lab(config)?.run_breadth_sweep()
}

/// Loads the dataset, runs the depth grid and persists every record.
pub fn run_depth_sweep(config: ExperimentConfig) -> Result<SweepOutcome> {
    open_lab(config)?.run_depth_sweep()
}

/// Reruns a manifest without touching the original results. Records go to
/// `results_dir` when given.
pub fn replay_manifest(
    manifest: &Manifest,
    results_dir: Option<std::path::PathBuf>,
) -> Result<Vec<RunRecord>> {
    let mut lab = Lab::new(manifest.config.clone())?;
    if let Some(dir) = results_dir {
        lab = lab.with_store(ResultsStore::open(dir)?);
    }
    lab.replay(manifest)
}
