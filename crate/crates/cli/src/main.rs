//! `ksnn`: command-line front end for the keystroke metric-learning lab.
//!
//! Every subcommand reads one TOML experiment config (`--config`, or the
//! built-in defaults). Flags override config fields; `--set path=value`
//! reaches any field by its dotted TOML path.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use ksnn::corpus::write_canonical_file;
use ksnn::encoder::{load_state, EncoderState};
use ksnn::eval::{write_scores, EmbeddedTestSet};
use ksnn::lab::synth::generate_corpus;
use ksnn::lab::{
    classify_quadrant, derive_seed, diagnose_cells, report, stability_table, summary_table,
    DatasetKind, ExperimentConfig, Lab, Manifest, PreparedDataset, ResultsStore, SweepKind,
    SweepOutcome, Table, RESULTS_DIR_ENV,
};

#[derive(Parser, Debug)]
#[command(
    name = "ksnn",
    version,
    about = "Keystroke-dynamics metric learning lab"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Results directory; overrides the environment and the config.
    #[arg(long, global = true, env = RESULTS_DIR_ENV)]
    results_dir: Option<PathBuf>,
    /// Log verbosity (repeat for more).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug, Clone, Default)]
struct Overrides {
    /// dataset.kind
    #[arg(long, global = true, value_parser = parse_kind)]
    dataset_kind: Option<DatasetKind>,
    /// dataset.path
    #[arg(long, global = true)]
    dataset_path: Option<PathBuf>,
    /// grid.breadth (comma separated)
    #[arg(long, global = true, value_delimiter = ',')]
    breadth: Option<Vec<usize>>,
    /// grid.samples_per_subject (comma separated)
    #[arg(long, global = true, value_delimiter = ',')]
    samples: Option<Vec<usize>>,
    /// grid.seq_len (comma separated)
    #[arg(long, global = true, value_delimiter = ',')]
    seq_len: Option<Vec<usize>>,
    /// grid.triplets (comma separated)
    #[arg(long, global = true, value_delimiter = ',')]
    triplets: Option<Vec<u64>>,
    /// grid.g_list (comma separated)
    #[arg(long, global = true, value_delimiter = ',')]
    g_list: Option<Vec<usize>>,
    /// grid.reruns
    #[arg(long, global = true)]
    reruns: Option<u32>,
    /// grid.base_seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// split.n_test
    #[arg(long, global = true)]
    n_test: Option<usize>,
    /// split.n_validation
    #[arg(long, global = true)]
    n_validation: Option<usize>,
    /// Any config field, as `dotted.path=value` (TOML value syntax; bare
    /// words are strings). Repeatable; applied after the named flags.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Read the dataset and write it in the canonical event format.
    Ingest {
        #[arg(long)]
        out: PathBuf,
        /// Also write the ingestion counters as CSV.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print the train/validation/test subject split as JSON.
    Split {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the breadth-wise grid.
    SweepBreadth,
    /// Run the depth-wise grid; infeasible cells are skipped.
    SweepDepth,
    /// Train a single cell, given by the first value of each grid list.
    Train,
    /// Evaluate a checkpoint on the held-out test subjects.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write every genuine and impostor score for the largest G.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Training-sufficiency verdict per cell from stored records.
    Diagnose,
    /// Tables, box plots and manifests from stored records.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Rerun every run of a manifest and compare against the records stored
    /// next to it. New records are written only with --results-dir.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Write the configured synthetic corpus as canonical events.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved config as TOML.
    ShowConfig,
}

fn parse_kind(s: &str) -> Result<DatasetKind, String> {
    toml::Value::String(s.to_owned())
        .try_into()
        .map_err(|_| format!("unknown dataset kind `{s}`"))
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

/// Sets `path` (dotted) inside a serialized config.
fn set_field(root: &mut toml::Table, path: &str, value: toml::Value) -> Result<(), String> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| format!("empty path in `{path}`"))?;
    let mut table = root;
    for part in parts {
        table = table
            .entry(part)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| format!("`{part}` in `{path}` is not a table"))?;
    }
    table.insert(last.to_owned(), value);
    Ok(())
}

impl Overrides {
    fn apply(&self, config: &mut ExperimentConfig) -> anyhow::Result<()> {
        if let Some(k) = self.dataset_kind {
            config.dataset.kind = k;
        }
        if let Some(p) = &self.dataset_path {
            config.dataset.path = Some(p.clone());
        }
        let grid = &mut config.grid;
        if let Some(v) = &self.breadth {
            grid.breadth = v.clone();
        }
        if let Some(v) = &self.samples {
            grid.samples_per_subject = v.clone();
        }
        if let Some(v) = &self.seq_len {
            grid.seq_len = v.clone();
        }
        if let Some(v) = &self.triplets {
            grid.triplets = v.clone();
        }
        if let Some(v) = &self.g_list {
            grid.g_list = v.clone();
        }
        if let Some(v) = self.reruns {
            grid.reruns = v;
        }
        if let Some(v) = self.seed {
            grid.base_seed = v;
        }
        if let Some(v) = self.n_test {
            config.split.n_test = v;
        }
        if let Some(v) = self.n_validation {
            config.split.n_validation = v;
        }
        if !self.set.is_empty() {
            let mut table = toml::Table::try_from(&*config)?;
            for item in &self.set {
                let (path, raw) = item
                    .split_once('=')
                    .ok_or_else(|| anyhow::anyhow!("--set expects PATH=VALUE, got `{item}`"))?;
                set_field(&mut table, path.trim(), parse_value(raw.trim()))
                    .map_err(anyhow::Error::msg)?;
            }
            *config = table
                .try_into()
                .map_err(|e| anyhow::anyhow!("--set: {e}"))?;
        }
        Ok(())
    }
}

impl Common {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        self.overrides.apply(&mut config)?;
        // Flag, then environment (both via clap), then the config file.
        if let Some(dir) = &self.results_dir {
            config.results_dir = dir.clone();
        }
        config.validate()?;
        Ok(config)
    }

    fn store(&self, config: &ExperimentConfig) -> anyhow::Result<ResultsStore> {
        Ok(ResultsStore::open(&config.results_dir)?)
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(
        env_logger::Env::default().default_filter_or(format!("ksnn={level}")),
    )
    .format_timestamp_secs()
    .init();
}

fn print_table(table: &Table) -> anyhow::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_writer(std::io::stdout().lock());
    w.write_record(&table.header)?;
    for row in &table.rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json(path: Option<&Path>, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => fs::write(p, text + "\n")?,
        None => writeln!(std::io::stdout().lock(), "{text}")?,
    }
    Ok(())
}

fn finish_sweep(outcome: &SweepOutcome, store: &ResultsStore) -> anyhow::Result<()> {
    for s in &outcome.skipped {
        eprintln!("skipped {}: {}", s.cell, s.reason);
    }
    print_table(&summary_table(&outcome.records))?;
    eprintln!(
        "{} runs; records and manifest in {}",
        outcome.records.len(),
        store.root().display()
    );
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::ShowConfig => {
            print!("{}", common.config()?.to_toml()?);
        }
        Command::Ingest { out, report } => {
            let config = common.config()?;
            let (streams, ingest) = ksnn::lab::load_streams(&config.dataset)?;
            write_canonical_file(&out, &streams)?;
            let events: usize = streams.iter().map(|s| s.event_count()).sum();
            eprintln!(
                "{} subjects, {events} events → {}",
                streams.len(),
                out.display()
            );
            if let (Some(path), Some(r)) = (report, ingest) {
                r.write_csv(fs::File::create(&path)?)?;
            }
        }
        Command::Split { out } => {
            let config = common.config()?;
            let data = PreparedDataset::load(&config)?;
            write_json(out.as_deref(), &data.split)?;
            let m = config.grid.seq_len[0];
            let label = classify_quadrant(
                data.subject_count() as u64,
                data.mean_samples(m),
                config.quadrant,
            );
            eprintln!(
                "{} eligible subjects, {:.1} samples per subject at M={m}: {label}",
                data.subject_count(),
                data.mean_samples(m)
            );
        }
        Command::SweepBreadth | Command::SweepDepth | Command::Train => {
            let mut config = common.config()?;
            let store = common.store(&config)?;
            let sweep = match cli.command {
                Command::SweepBreadth => SweepKind::Breadth,
                Command::SweepDepth => SweepKind::Depth,
                _ => {
                    let g = &mut config.grid;
                    g.breadth.truncate(1);
                    g.samples_per_subject.truncate(1);
                    g.seq_len.truncate(1);
                    g.triplets.truncate(1);
                    SweepKind::Single
                }
            };
            let mut lab = Lab::new(config)?.with_store(store.clone());
            let outcome = match sweep {
                SweepKind::Breadth => lab.run_breadth_sweep()?,
                SweepKind::Depth => lab.run_depth_sweep()?,
                SweepKind::Single => {
                    let plan = lab.plan(true);
                    if let Some(s) = plan.skipped.first() {
                        anyhow::bail!("cell {} is infeasible: {}", s.cell, s.reason);
                    }
                    lab.run_plan(SweepKind::Single, plan)?
                }
            };
            finish_sweep(&outcome, &store)?;
        }
        Command::Evaluate { checkpoint, scores } => {
            let config = common.config()?;
            let state: EncoderState = load_state(&checkpoint)?;
            let data = PreparedDataset::load(&config)?;
            if state.config.n_features != data.n_features() {
                anyhow::bail!(
                    "checkpoint expects n_features = {}, dataset has {}",
                    state.config.n_features,
                    data.n_features()
                );
            }
            let cap = config
                .split
                .heldout_samples_per_subject
                .unwrap_or(usize::MAX);
            let test = data.samples(&data.split.test_subjects, state.config.seq_len, cap)?;
            let embedded = EmbeddedTestSet::embed(&state, &test)?;
            let seed = derive_seed(config.grid.base_seed, &["eval"]);
            let results = embedded.evaluate(&config.grid.g_list, seed, config.grid.aggregation)?;
            println!("G\tmean_eer_pct");
            for r in &results {
                println!("{}\t{}", r.g, ksnn::lab::pct(r.mean_eer));
            }
            if let Some(path) = scores {
                let g = *config
                    .grid
                    .g_list
                    .iter()
                    .max()
                    .expect("validated non-empty");
                let sets = embedded.build_eval_sets(g, seed)?;
                write_scores(fs::File::create(&path)?, &sets, config.grid.aggregation)?;
            }
        }
        Command::Diagnose => {
            let config = common.config()?;
            let records = common.store(&config)?.load_records()?;
            if records.is_empty() {
                anyhow::bail!("no run records found");
            }
            print_table(&stability_table(&records, config.stability))?;
            for (cell, report) in diagnose_cells(&records, config.stability) {
                match report {
                    Ok(r) => eprintln!("{cell}: {}", r.verdict),
                    Err(e) => eprintln!("{cell}: not diagnosed ({e})"),
                }
            }
        }
        Command::Report { out } => {
            let config = common.config()?;
            let store = common.store(&config)?;
            let records = store.load_records()?;
            let manifests: Vec<Manifest> =
                [SweepKind::Breadth, SweepKind::Depth, SweepKind::Single]
                    .into_iter()
                    .map(|k| store.manifest_path(k))
                    .filter(|p| p.exists())
                    .map(|p| Manifest::load(&p))
                    .collect::<Result<_, _>>()?;
            fs::create_dir_all(&out)?;
            for path in report(&records, &manifests, &out, config.stability)? {
                println!("{}", path.display());
            }
        }
        Command::Replay { manifest: path } => {
            let manifest = Manifest::load(&path)?;
            let mut lab = Lab::new(manifest.config.clone())?;
            if let Some(dir) = &common.results_dir {
                lab = lab.with_store(ResultsStore::open(dir)?);
            }
            let records = lab.replay(&manifest)?;
            // A manifest sits at the root of the results it describes.
            let original = ResultsStore::open(path.parent().unwrap_or(Path::new(".")))?;
            let mut mismatches = 0;
            for record in &records {
                info!("{}: {:?}", record.run_id, record.eer_by_g);
                if let Some(o) = original.load_record(&record.run_id)? {
                    if !o.same_outcome(record) {
                        mismatches += 1;
                        eprintln!("{}: replay differs from the stored record", record.run_id);
                    }
                }
            }
            print_table(&summary_table(&records))?;
            if mismatches > 0 {
                anyhow::bail!("{mismatches} runs did not reproduce");
            }
        }
        Command::Synth { out } => {
            let config = common.config()?;
            let streams = generate_corpus(&config.dataset.synthetic)?;
            write_canonical_file(&out, &streams)?;
            eprintln!("{} synthetic subjects → {}", streams.len(), out.display());
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    init_logging(cli.common.verbose);
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
