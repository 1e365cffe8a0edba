//! End-to-end pipeline: synthesize or ingest data, train the population
//! model, build the memory bank, run every strategy online over the test
//! patients and write reports.
//!
//! All stages read one [`RunConfig`]. The master `seed` drives the synthetic
//! generator, parameter initialization, the train/test split and training
//! shuffles, so a fixed seed reproduces every artifact byte for byte.

mod files;
mod report;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptation::{AdaptConfig, AdaptError};
use crate::evaluation::{evaluate_strategies, split_repetitive, EvalError, MetricReport, RepetitiveSplit};
use crate::event_data::{
    discretize, generate_synthetic, load_event_log, load_vocabulary, save_event_log, save_ground_truth,
    save_vocabulary, sequences_to_logs, split_train_test, DataError, EventSequence, EventVocabulary, SynthConfig,
};
use crate::exec::ExecMode;
use crate::memory::{build_memory, load_bank, save_bank, MemoryBank, MemoryError};
use crate::neural::{load_model, save_model, ModelConfig, ModelError, ModelState};
use crate::switching::{run_patients, PatientRun, Strategy, SwitchConfig, SwitchError};
use crate::trainer::{grid_select_l2, train_population, TrainConfig, TrainError, TrainReport};

pub use files::{read_records, read_traces, write_event_choices, write_records, write_traces};
pub use report::{write_reports, ReportSet};

#[derive(Error, Debug)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot parse config file: {0}")]
    ConfigParse(#[from] toml::de::Error),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Format { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Switch(#[from] SwitchError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{failed} of {total} patients failed during the run")]
    PatientFailures { failed: usize, total: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Stable machine-readable code for the error class.
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::Config(_) | PipelineError::ConfigParse(_) => "E-CONFIG",
            PipelineError::File { .. } | PipelineError::Io(_) => "E-IO",
            PipelineError::Format { .. } => "E-FORMAT",
            PipelineError::Data(_) => "E-DATA",
            PipelineError::Model(_) => "E-MODEL",
            PipelineError::Train(_) => "E-TRAIN",
            PipelineError::Memory(_) => "E-MEMORY",
            PipelineError::Adapt(_) => "E-ADAPT",
            PipelineError::Switch(_) | PipelineError::PatientFailures { .. } => "E-RUN",
            PipelineError::Eval(_) => "E-EVAL",
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::File { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
    /// Event log to ingest; defaults to `<out_dir>/events.tsv`.
    pub events: Option<PathBuf>,
    /// Vocabulary to ingest; defaults to `<out_dir>/vocab.tsv`.
    pub vocab: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("out"), events: None, vocab: None }
    }
}

impl PathsConfig {
    pub fn events(&self) -> PathBuf {
        self.events.clone().unwrap_or_else(|| self.out_dir.join("events.tsv"))
    }

    pub fn vocab(&self) -> PathBuf {
        self.vocab.clone().unwrap_or_else(|| self.out_dir.join("vocab.tsv"))
    }

    pub fn ground_truth(&self) -> PathBuf {
        self.out_dir.join("ground_truth.tsv")
    }

    pub fn model(&self) -> PathBuf {
        self.out_dir.join("model.bin")
    }

    pub fn train_report(&self) -> PathBuf {
        self.out_dir.join("train_report.csv")
    }

    pub fn bank(&self) -> PathBuf {
        self.out_dir.join("bank.bin")
    }

    pub fn records(&self) -> PathBuf {
        self.out_dir.join("records.csv")
    }

    pub fn traces(&self) -> PathBuf {
        self.out_dir.join("traces.csv")
    }

    pub fn event_choices(&self) -> PathBuf {
        self.out_dir.join("event_choices.csv")
    }

    pub fn reports(&self) -> PathBuf {
        self.out_dir.join("reports")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub window_hours: f64,
    /// Share of patients used to train the population model and fill the bank.
    pub train_ratio: f64,
    pub exec: ExecMode,
    /// Candidate L2 weights; when more than one is given the best on the
    /// validation split is used.
    pub l2_grid: Vec<f64>,
    /// Patients processed per batch by `run`; bounds memory use.
    pub run_batch: usize,
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub switch: SwitchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            window_hours: 24.0,
            train_ratio: 0.8,
            exec: ExecMode::default(),
            l2_grid: Vec::new(),
            run_batch: 64,
            paths: PathsConfig::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            switch: SwitchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&fs::read_to_string(path).map_err(file_err(path))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.window_hours.is_finite() && self.window_hours > 0.0) {
            return Err(PipelineError::Config(format!("window_hours must be positive, got {}", self.window_hours)));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(PipelineError::Config(format!("train_ratio must lie in (0, 1), got {}", self.train_ratio)));
        }
        if self.run_batch == 0 {
            return Err(PipelineError::Config("run_batch must be at least 1".into()));
        }
        if self.l2_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(PipelineError::Config("l2_grid entries must be nonnegative".into()));
        }
        self.train.validate()?;
        self.adapt.validate()?;
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig { rng_seed: self.seed, window_hours: self.window_hours, ..self.synth.clone() }
    }

    pub fn model_config(&self, vocab: &EventVocabulary) -> ModelConfig {
        ModelConfig { n_input: vocab.len(), n_target: vocab.n_targets(), rng_seed: self.seed, ..self.model.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { shuffle_seed: self.seed, ..self.train.clone() }
    }
}

/// A discretized cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: EventVocabulary,
    pub sequences: Vec<EventSequence>,
    /// Events whose names are not in the vocabulary.
    pub skipped_unknown: usize,
}

impl Dataset {
    /// Patient-level split by the master seed.
    pub fn split(&self, cfg: &RunConfig) -> Result<(Vec<EventSequence>, Vec<EventSequence>)> {
        Ok(split_train_test(&self.sequences, cfg.train_ratio, cfg.seed)?)
    }
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let vocab = load_vocabulary(cfg.paths.vocab())?;
    let logs = load_event_log(cfg.paths.events())?;
    let mut sequences = Vec::with_capacity(logs.len());
    let mut skipped_unknown = 0;
    for log in &logs {
        let d = discretize(log, &vocab, cfg.window_hours)?;
        skipped_unknown += d.skipped_unknown;
        sequences.push(d.sequence);
    }
    Ok(Dataset { vocab, sequences, skipped_unknown })
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<()> {
    let dir = &cfg.paths.out_dir;
    fs::create_dir_all(dir).map_err(file_err(dir))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub n_patients: usize,
    pub n_windows: usize,
}

/// Writes a synthetic event log, its vocabulary and the planted
/// subpopulation of every patient.
pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthSummary> {
    cfg.validate()?;
    ensure_out_dir(cfg)?;
    let data = generate_synthetic(&cfg.synth_config().to_spec()?)?;
    save_event_log(cfg.paths.events(), &sequences_to_logs(&data.sequences, &data.vocabulary, cfg.seed))?;
    save_vocabulary(cfg.paths.vocab(), &data.vocabulary)?;
    save_ground_truth(cfg.paths.ground_truth(), &data.ground_truth())?;
    let n_windows = data.sequences.iter().map(EventSequence::len).sum();
    log::info!("wrote {} synthetic patients ({n_windows} windows)", data.sequences.len());
    Ok(SynthSummary { n_patients: data.sequences.len(), n_windows })
}

fn train_model(cfg: &RunConfig, vocab: &EventVocabulary, train: &[EventSequence]) -> Result<(ModelState, TrainReport)> {
    let mcfg = cfg.model_config(vocab);
    let mut tcfg = cfg.train_config();
    if cfg.l2_grid.len() > 1 {
        tcfg.l2_weight = grid_select_l2(train, &mcfg, &tcfg, &cfg.l2_grid, cfg.exec)?;
        log::info!("selected l2 weight {}", tcfg.l2_weight);
    } else if let [only] = cfg.l2_grid[..] {
        tcfg.l2_weight = only;
    }
    Ok(train_population(train, &mcfg, &tcfg)?)
}

/// Trains the population model on the training split.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    ensure_out_dir(cfg)?;
    let data = load_dataset(cfg)?;
    let (train, _) = data.split(cfg)?;
    let (model, report) = train_model(cfg, &data.vocab, &train)?;
    save_model(cfg.paths.model(), &model)?;
    let path = cfg.paths.train_report();
    fs::write(&path, report.to_csv()).map_err(file_err(&path))?;
    log::info!("trained for {} epochs, best epoch {}", report.epochs_run(), report.best_epoch);
    Ok(report)
}

fn load_trained_model(cfg: &RunConfig, vocab: &EventVocabulary) -> Result<ModelState> {
    let path = cfg.paths.model();
    if !path.exists() {
        return Err(PipelineError::File {
            path,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "model file not found; run `train` first"),
        });
    }
    let model = load_model(&path)?;
    if model.config.n_input != vocab.len() || model.config.n_target != vocab.n_targets() {
        return Err(PipelineError::Config("model dimensions do not match the vocabulary".into()));
    }
    Ok(model)
}

/// Builds the memory bank from the training split.
pub fn cmd_build_memory(cfg: &RunConfig) -> Result<usize> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let model = load_trained_model(cfg, &data.vocab)?;
    let (train, _) = data.split(cfg)?;
    let bank = build_memory(&model, &train)?;
    save_bank(cfg.paths.bank(), &bank)?;
    log::info!("memory bank holds {} entries", bank.len());
    Ok(bank.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub n_patients: usize,
    pub n_failed: usize,
    pub n_records: usize,
}

fn runnable(test: Vec<EventSequence>) -> Vec<EventSequence> {
    let (keep, short): (Vec<_>, Vec<_>) = test.into_iter().partition(|s| s.len() >= 2);
    if !short.is_empty() {
        log::info!("skipping {} test patients with fewer than 2 windows", short.len());
    }
    keep
}

/// Runs every strategy over the test split, streaming records and switch
/// traces to disk batch by batch. Patients that fail are logged and skipped;
/// the run then ends with an error after all output is written.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let model = load_trained_model(cfg, &data.vocab)?;
    let bank = load_bank(cfg.paths.bank())?;
    let (_, test) = data.split(cfg)?;
    let test = runnable(test);
    let open = |p: PathBuf| fs::File::create(&p).map(BufWriter::new).map_err(file_err(&p));
    let mut rec_out = open(cfg.paths.records())?;
    let mut trace_out = open(cfg.paths.traces())?;
    let mut choice_out = open(cfg.paths.event_choices())?;
    files::write_records_header(&mut rec_out)?;
    files::write_traces_header(&mut trace_out)?;
    files::write_event_choices_header(&mut choice_out, &data.vocab)?;
    let mut summary = RunSummary { n_patients: test.len(), n_failed: 0, n_records: 0 };
    for batch in test.chunks(cfg.run_batch) {
        for (seq, run) in batch.iter().zip(run_patients(&model, &bank, batch, &cfg.adapt, &cfg.switch, cfg.exec)) {
            match run {
                Ok(run) => {
                    summary.n_records += run.records.len();
                    write_records(&mut rec_out, &run.records)?;
                    write_traces(&mut trace_out, std::slice::from_ref(&run.trace))?;
                    write_event_choices(&mut choice_out, std::slice::from_ref(&run.trace))?;
                }
                Err(e) => {
                    log::error!("patient {}: {e}", seq.patient_id);
                    summary.n_failed += 1;
                }
            }
        }
    }
    rec_out.flush()?;
    trace_out.flush()?;
    choice_out.flush()?;
    if summary.n_failed > 0 {
        return Err(PipelineError::PatientFailures { failed: summary.n_failed, total: summary.n_patients });
    }
    Ok(summary)
}

/// Regenerates every report from the stored records and traces.
pub fn cmd_report(cfg: &RunConfig) -> Result<ReportSet> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let (_, test) = data.split(cfg)?;
    let records = read_records(cfg.paths.records(), data.vocab.n_targets())?;
    let traces = read_traces(cfg.paths.traces())?;
    let set = ReportSet::build(&records, &traces, &test, &data.vocab)?;
    write_reports(&cfg.paths.reports(), &set)?;
    Ok(set)
}

/// Everything produced by an in-memory run of the pipeline.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub vocab: EventVocabulary,
    pub train: Vec<EventSequence>,
    pub test: Vec<EventSequence>,
    pub model: ModelState,
    pub train_report: TrainReport,
    pub bank: MemoryBank,
    pub runs: Vec<PatientRun>,
    pub reports: std::collections::BTreeMap<Strategy, MetricReport>,
    pub repetitive: std::collections::BTreeMap<Strategy, RepetitiveSplit>,
}

/// Synthesizes a cohort and runs every stage without touching the disk.
pub fn run_synthetic_experiment(cfg: &RunConfig) -> Result<Experiment> {
    cfg.validate()?;
    let data = generate_synthetic(&cfg.synth_config().to_spec()?)?;
    let vocab = data.vocabulary;
    let (train, test) = split_train_test(&data.sequences, cfg.train_ratio, cfg.seed)?;
    let test = runnable(test);
    let (model, train_report) = train_model(cfg, &vocab, &train)?;
    let bank = build_memory(&model, &train)?;
    let mut runs = Vec::with_capacity(test.len());
    for r in run_patients(&model, &bank, &test, &cfg.adapt, &cfg.switch, cfg.exec) {
        runs.push(r?);
    }
    let records: Vec<_> = runs.iter().flat_map(|r| r.records.iter().cloned()).collect();
    let reports = evaluate_strategies(&records, &vocab)?;
    let mut repetitive = std::collections::BTreeMap::new();
    for s in Strategy::ALL {
        let mine: Vec<_> = records.iter().filter(|r| r.strategy == s).cloned().collect();
        repetitive.insert(s, split_repetitive(&mine, &test)?);
    }
    Ok(Experiment { vocab, train, test, model, train_report, bank, runs, reports, repetitive })
}
