//! Command-line entry point: prepare, train, gridsearch, augment, analyze.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::augment::expand_training_set;
use crate::config::{prepare_corpus, ExperimentConfig};
use crate::corpus::{task_stats, Corpus};
use crate::error::{Error, Result};
use crate::eval::report::{analyze_grid, analyze_run, write_grid_reports, write_run_reports, CorrelationInput};
use crate::eval::{grid_search, GridSummary};
use crate::exec::Execution;
use crate::nn::Parameters;
use crate::trainer::{record::CONFIG_FILE, train, RunRecord};

pub const CORPUS_DIR: &str = "corpus";
pub const AUGMENTED_DIR: &str = "augmented";
pub const RUN_DIR: &str = "run";
pub const GRID_DIR: &str = "grid";
pub const GRID_FILE: &str = "grid.json";
pub const REPORT_DIR: &str = "report";

#[derive(Debug, Parser)]
#[command(name = "discotask", version, about = "Multitask sentence-level discourse classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Replaces the config's top-level seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Replaces the config's output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Config override as dotted.key=value; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the adapter chains and write the canonical corpus with statistics.
    Prepare,
    /// Train one model with the configured α.
    Train,
    /// Train one model per α of the configured grid.
    Gridsearch,
    /// Write the training set expanded with paraphrases.
    Augment,
    /// Recompute reports from a run or grid directory.
    Analyze {
        /// Run or grid directory; defaults to the configured run directory.
        dir: Option<PathBuf>,
        /// Correlate predicted probabilities instead of label indicators.
        #[arg(long)]
        probabilities: bool,
    },
}

/// Serialized outcome of a grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub primary: String,
    pub tasks: Vec<String>,
    pub summary: GridSummary,
}

/// Exit status for an error: 1 for invalid input or configuration, 2 for
/// failures while computing.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Validation(_) | Error::UnknownTask(_) | Error::Parse { .. } => 1,
        _ => 2,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn split_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::validation(format!("override `{s}` is not KEY=VALUE")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::validation("--config is required for this command"))?;
    let mut overrides = cli
        .overrides
        .iter()
        .map(|s| split_override(s))
        .collect::<Result<Vec<_>>>()?;
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    let mut config = ExperimentConfig::load(path, &overrides)?;
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    config.validate()?;
    Ok(config)
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Prepare => cmd_prepare(&load_config(cli)?).map(|_| ()),
        Command::Train => cmd_train(&load_config(cli)?).map(|_| ()),
        Command::Gridsearch => cmd_gridsearch(&load_config(cli)?).map(|_| ()),
        Command::Augment => cmd_augment(&load_config(cli)?).map(|_| ()),
        Command::Analyze { dir, probabilities } => {
            let dir = match dir {
                Some(d) => d.clone(),
                None => load_config(cli)?.out.join(RUN_DIR),
            };
            let input = if *probabilities {
                CorrelationInput::Probability
            } else {
                CorrelationInput::Indicator
            };
            cmd_analyze(&dir, &dir.join(REPORT_DIR), input).map(|_| ())
        }
    }
}

fn stats_csv(corpus: &Corpus) -> Result<String> {
    let mut s = String::from("task,kind,documents,sentences,tags,imbalance\n");
    for r in task_stats(corpus)? {
        let _ = writeln!(
            s,
            "{},{:?},{},{},{},{}",
            r.task,
            r.kind,
            r.documents,
            r.sentences,
            r.k,
            r.imbalance.map_or(String::new(), |v| format!("{v:.4}"))
        );
    }
    Ok(s)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Writes `<out>/corpus`, `corpus_stats.csv`/`.json` and the downsampling
/// report.
pub fn cmd_prepare(config: &ExperimentConfig) -> Result<Corpus> {
    let prepared = prepare_corpus(config)?;
    let out = &config.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    prepared.corpus.save(out.join(CORPUS_DIR))?;
    let stats = out.join("corpus_stats.csv");
    fs::write(&stats, stats_csv(&prepared.corpus)?).map_err(|e| Error::io(&stats, e))?;
    write_json(&out.join("corpus_stats.json"), &task_stats(&prepared.corpus)?)?;
    if !prepared.downsampling.is_empty() {
        write_json(&out.join("downsampling.json"), &prepared.downsampling)?;
    }
    log::info!(
        "prepared {} documents, {} sentences into {}",
        prepared.corpus.documents.len(),
        prepared.corpus.sentence_count(),
        out.join(CORPUS_DIR).display()
    );
    Ok(prepared.corpus)
}

/// The prepared corpus when present, otherwise a fresh preparation (not
/// written to disk).
fn corpus_for(config: &ExperimentConfig) -> Result<Corpus> {
    let dir = config.out.join(CORPUS_DIR);
    if dir.exists() {
        Corpus::load(dir)
    } else {
        Ok(prepare_corpus(config)?.corpus)
    }
}

fn training_corpus(config: &ExperimentConfig) -> Result<Corpus> {
    let corpus = corpus_for(config)?;
    match &config.augment {
        Some(a) if a.use_in_training => {
            expand_training_set(&corpus, config.augmenter()?.as_ref(), a.n, config.train.execution)
        }
        _ => Ok(corpus),
    }
}

pub fn cmd_train(config: &ExperimentConfig) -> Result<RunRecord> {
    let corpus = training_corpus(config)?;
    let outcome = train(&corpus, &config.model, &config.weighting(), &config.train_config())?;
    let dir = config.out.join(RUN_DIR);
    outcome.record.save(&dir, Some(&outcome.model.checkpoint()))?;
    if let Some(r) = outcome.record.primary_report() {
        log::info!("test macro F1 {:.4}, micro F1 {:.4}", r.macro_f1, r.micro_f1);
    }
    Ok(outcome.record)
}

pub fn cmd_gridsearch(config: &ExperimentConfig) -> Result<GridRecord> {
    let corpus = training_corpus(config)?;
    let grid = config.grid_points()?;
    let execution = if config.grid.as_ref().is_some_and(|g| g.parallel) {
        Execution::Parallel
    } else {
        Execution::Sequential
    };
    let (summary, records) = grid_search(&corpus, &config.model, &config.train_config(), &grid, execution)?;
    let dir = config.out.join(GRID_DIR);
    for (i, r) in records.iter().enumerate() {
        if let Some(r) = r {
            r.save(dir.join(format!("trial_{i:03}")), None)?;
        }
    }
    let record = GridRecord {
        primary: config.primary.clone(),
        tasks: corpus.task_names(),
        summary,
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(&dir.join(GRID_FILE), &record)?;
    for (name, best) in [("macro", record.summary.best_macro), ("micro", record.summary.best_micro)] {
        if let Some(i) = best {
            log::info!("best by {name} F1: trial {i}, α {:?}", record.summary.trials[i].alpha);
        }
    }
    Ok(record)
}

pub fn cmd_augment(config: &ExperimentConfig) -> Result<Corpus> {
    let a = config
        .augment
        .as_ref()
        .ok_or_else(|| Error::validation("no [augment] section in the config"))?;
    let corpus = corpus_for(config)?;
    let expanded = expand_training_set(&corpus, config.augmenter()?.as_ref(), a.n, config.train.execution)?;
    expanded.save(config.out.join(AUGMENTED_DIR))?;
    Ok(expanded)
}

/// Reports for a run directory (holding `config.json`) or a grid directory
/// (holding `grid.json`), written to `out`.
pub fn cmd_analyze(dir: &Path, out: &Path, input: CorrelationInput) -> Result<Vec<PathBuf>> {
    if dir.join(GRID_FILE).exists() {
        let path = dir.join(GRID_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let grid: GridRecord = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        write_grid_reports(&analyze_grid(&grid.summary, &grid.tasks, &grid.primary), out)
    } else if dir.join(CONFIG_FILE).exists() {
        let record = RunRecord::load(dir)?;
        write_run_reports(&analyze_run(&record, input)?, out)
    } else {
        Err(Error::io(
            dir.join(CONFIG_FILE),
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a run or grid directory"),
        ))
    }
}
