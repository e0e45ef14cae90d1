//! Command-line front end. `main.rs` only forwards the process arguments to
//! [`run`] and exits with [`CliError::exit_code`].

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureScaler;
use crate::error::{Error, ErrorKind};
use crate::ingest::{parse_dataset, FeatureSchema, LabelMap, ParseOptions};
use crate::model::Checkpoint;
use crate::stream::{self, Clock, Detector, FixedClock, SystemClock};
use crate::synth::{self, SynthSpec};
use crate::trainer::{self, run_experiment, EncodedSet, Experiment, TrainConfig};

pub const SCALER_FILE: &str = "scaler.json";
pub const BENCH_FILE: &str = "bench.json";
pub const SYNTH_DATA_FILE: &str = "synth.csv";
pub const SYNTH_SCHEMA_FILE: &str = "schema.cfg";

const DEFAULT_SYNTH_CLASSES: [&str; 3] = ["normal", "iodine", "dnscat2"];

/// A failure reported on stderr as one JSON line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Usage,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Usage => 2,
            ErrorKind::Data => 3,
            ErrorKind::Model => 4,
        }
    }

    /// `{"error":"usage|data|model","code":N,"message":"..."}`
    pub fn to_json_line(&self) -> String {
        let kind = match self.kind {
            ErrorKind::Usage => "usage",
            ErrorKind::Data => "data",
            ErrorKind::Model => "model",
        };
        serde_json::json!({ "error": kind, "code": self.exit_code(), "message": self.message }).to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "hyxnet", version, about = "DNS tunnel detection with a hashed-token recurrent classifier")]
pub struct Cli {
    /// TOML file of default flag values; flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads for benchmarking (training and evaluation run on one).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, log and test report into --out.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labeled dataset.
    Eval(EvalArgs),
    /// Classify records from a file or stdin and print alerts as JSON lines.
    Detect(DetectArgs),
    /// Measure per-record detection latency.
    Bench(BenchArgs),
    /// Fit the feature standardizer on a dataset and write it for inspection.
    FitScaler(FitScalerArgs),
    /// Write a labeled synthetic dataset and its schema into --out.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset CSV with a header row.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Column schema, one `name:kind` per line (default: the built-in DNS schema).
    #[arg(long, value_name = "FILE")]
    pub schema: Option<PathBuf>,
    /// Field delimiter.
    #[arg(long)]
    pub delimiter: Option<char>,
    /// Skip malformed rows instead of failing.
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub input: DataArgs,
    /// Comma-separated class names in index order (default: inferred).
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
    #[arg(long)]
    pub train_ratio: Option<f64>,
    #[arg(long)]
    pub val_ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Maximum number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    #[arg(long)]
    pub delimiter: Option<char>,
    #[arg(long)]
    pub lenient: bool,
    /// Directory for report files; the text report goes to stdout when absent.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Record source (default: stdin).
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Minimum confidence for an alert, in (0, 1).
    #[arg(long)]
    pub threshold: Option<f32>,
    /// Confidence at which an alert recommends blocking, in (0, 1).
    #[arg(long)]
    pub block_threshold: Option<f32>,
    /// Comma-separated classes that never alert.
    #[arg(long, value_delimiter = ',')]
    pub benign: Option<Vec<String>>,
    #[arg(long)]
    pub delimiter: Option<char>,
    /// Stamp every alert with this Unix time instead of the wall clock.
    #[arg(long, value_name = "SECS")]
    pub fixed_time: Option<f64>,
    /// Print a JSON summary with peak memory to stderr at end of input.
    #[arg(long)]
    pub stats: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Timed repetitions; the median one is reported.
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub delimiter: Option<char>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitScalerArgs {
    #[command(flatten)]
    pub input: DataArgs,
    /// Comma-separated class names accepted in the label column.
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Comma-separated preset class names.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

/// Defaults read from `--config`. Keys use the flag names with underscores.
#[derive(Debug, Default, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub schema: Option<PathBuf>,
    pub labels: Option<Vec<String>>,
    pub delimiter: Option<char>,
    pub train_ratio: Option<f64>,
    pub val_ratio: Option<f64>,
    pub seed: Option<u64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub threshold: Option<f32>,
    pub block_threshold: Option<f32>,
    pub benign: Option<Vec<String>>,
    pub reps: Option<usize>,
    pub threads: Option<usize>,
    pub classes: Option<Vec<String>>,
    pub per_class: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| {
            let msg = e.message().to_string();
            CliError::usage(format!("{}: {msg}", path.display()))
        })
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return Ok(());
            }
            return Err(CliError::usage(one_line(&e.to_string())));
        }
    };
    init_logging(cli.verbose);
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let threads = cli.threads.or(file.threads).unwrap_or(1);
    if threads == 0 {
        return Err(CliError::usage("--threads must be at least 1"));
    }
    match cli.command {
        Command::Train(a) => cmd_train(a, &file, threads),
        Command::Eval(a) => cmd_eval(a, &file, threads),
        Command::Detect(a) => cmd_detect(a, &file),
        Command::Bench(a) => cmd_bench(a, &file, threads),
        Command::FitScaler(a) => cmd_fit_scaler(a, &file),
        Command::Synth(a) => cmd_synth(a, &file),
    }
}

/// Folds clap's multi-line message into one line, dropping the usage block.
fn one_line(msg: &str) -> String {
    let parts: Vec<&str> = msg
        .lines()
        .map(str::trim)
        .take_while(|l| !l.starts_with("Usage:"))
        .filter(|l| !l.is_empty() && !l.starts_with("For more information"))
        .collect();
    let joined = parts.join(" ");
    let joined = joined.strip_prefix("error: ").unwrap_or(&joined);
    if joined.is_empty() {
        "invalid arguments".to_string()
    } else {
        joined.to_string()
    }
}

/// Writes to stdout; a closed pipe downstream is not an error.
fn emit(text: &str) -> CliResult<()> {
    let mut out = io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e).into()),
        _ => Ok(()),
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn delimiter(flag: Option<char>, file: &FileConfig) -> CliResult<char> {
    let d = flag.or(file.delimiter).unwrap_or(',');
    if !d.is_ascii() || d == '"' || d == '\n' || d == '\r' {
        return Err(CliError::usage(format!("delimiter `{}` must be a single ASCII character", d.escape_default())));
    }
    Ok(d)
}

fn load_schema(flag: &Option<PathBuf>, file: &FileConfig) -> CliResult<FeatureSchema> {
    match flag.as_ref().or(file.schema.as_ref()) {
        Some(p) => Ok(FeatureSchema::load(p)?),
        None => Ok(FeatureSchema::default_dns()),
    }
}

fn label_map(names: Option<&Vec<String>>) -> CliResult<Option<LabelMap>> {
    names.map(|n| LabelMap::new(n).map_err(CliError::from)).transpose()
}

fn single_threaded(threads: usize, what: &str) {
    if threads > 1 {
        log::info!("{what} runs on one thread; --threads applies to bench");
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Record(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| CliError {
        kind: ErrorKind::Model,
        message: e.to_string(),
    })
}

pub fn cmd_train(a: TrainArgs, file: &FileConfig, threads: usize) -> CliResult<()> {
    let defaults = TrainConfig::default();
    let train = TrainConfig {
        train_ratio: a.train_ratio.or(file.train_ratio).unwrap_or(defaults.train_ratio),
        val_ratio: a.val_ratio.or(file.val_ratio).unwrap_or(defaults.val_ratio),
        seed: a.seed.or(file.seed).unwrap_or(defaults.seed),
        batch_size: a.batch_size.or(file.batch_size).unwrap_or(defaults.batch_size),
        max_epochs: a.epochs.or(file.epochs).unwrap_or(defaults.max_epochs),
        lr: a.lr.or(file.lr).unwrap_or(defaults.lr),
        ..defaults
    };
    train.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let delim = delimiter(a.input.delimiter, file)?;
    let labels = label_map(a.labels.as_ref().or(file.labels.as_ref()))?;
    let schema = load_schema(&a.input.schema, file)?;
    if !schema.has_label() {
        return Err(Error::Schema("training needs a label column".into()).into());
    }
    single_threaded(threads, "training");

    let mut exp = Experiment::new(schema);
    exp.labels = labels;
    exp.parse = ParseOptions {
        delimiter: delim as u8,
        lenient: a.input.lenient,
    };
    exp.train = train;
    exp.out_dir = Some(a.out.clone());
    let outcome = run_experiment(&a.input.data, &exp)?;
    let [n_train, n_val, n_test] = outcome.split_sizes;
    log::info!(
        "trained {} epochs on {n_train} rows (val {n_val}, test {n_test}); best epoch {}",
        outcome.log.epochs.len().saturating_sub(1),
        outcome.log.best_epoch
    );
    emit(&outcome.report.to_text())
}

fn parse_for_checkpoint(
    cp: &Checkpoint,
    data: &Path,
    delim: char,
    lenient: bool,
) -> CliResult<Vec<crate::ingest::DnsEvent>> {
    let opts = ParseOptions {
        delimiter: delim as u8,
        lenient,
    };
    let (events, report) = parse_dataset(data, &cp.schema, &cp.labels, opts)?;
    if report.rejected > 0 {
        log::warn!("{} rows rejected while parsing {}", report.rejected, data.display());
    }
    if events.is_empty() {
        return Err(Error::Empty(format!("{} has no usable rows", data.display())).into());
    }
    Ok(events)
}

pub fn cmd_eval(a: EvalArgs, file: &FileConfig, threads: usize) -> CliResult<()> {
    let delim = delimiter(a.delimiter, file)?;
    let cp = load_checkpoint(&a.model)?;
    if !cp.schema.has_label() {
        return Err(Error::Schema("checkpoint schema has no label column to evaluate against".into()).into());
    }
    single_threaded(threads, "evaluation");
    let events = parse_for_checkpoint(&cp, &a.data, delim, a.lenient)?;
    let set = EncodedSet::encode(&events, &cp.tokenizer(), &cp.scaler)?;
    let report = trainer::evaluate(&cp.model, &set, cp.labels.names())?;
    match &a.out {
        Some(dir) => trainer::write_report(dir, &report)?,
        None => emit(&report.to_text())?,
    }
    Ok(())
}

fn check_unit(value: f32, flag: &str) -> CliResult<()> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(CliError::usage(format!("--{flag} must lie in (0, 1), got {value}")))
    }
}

#[derive(Serialize)]
struct DetectStats<'a> {
    #[serde(flatten)]
    summary: &'a stream::StreamSummary,
    peak_rss_mb: Option<f64>,
}

pub fn cmd_detect(a: DetectArgs, file: &FileConfig) -> CliResult<()> {
    let delim = delimiter(a.delimiter, file)?;
    let threshold = a.threshold.or(file.threshold).unwrap_or(stream::DEFAULT_THRESHOLD);
    let block = a
        .block_threshold
        .or(file.block_threshold)
        .unwrap_or(stream::DEFAULT_BLOCK_THRESHOLD);
    check_unit(threshold, "threshold")?;
    check_unit(block, "block-threshold")?;
    if let Some(t) = a.fixed_time {
        if !t.is_finite() {
            return Err(CliError::usage("--fixed-time must be finite"));
        }
    }
    let input: Box<dyn BufRead> = match &a.input {
        Some(p) => Box::new(BufReader::new(File::open(p).map_err(|e| Error::io(p, e))?)),
        None => Box::new(io::stdin().lock()),
    };

    let mut detector = Detector::new(load_checkpoint(&a.model)?);
    detector.set_threshold(threshold)?;
    detector.set_block_threshold(block)?;
    if let Some(benign) = a.benign.as_ref().or(file.benign.as_ref()) {
        detector.set_benign(benign).map_err(|e| CliError::usage(e.to_string()))?;
    }
    let mut clock: Box<dyn Clock> = match a.fixed_time {
        Some(t) => Box::new(FixedClock(t)),
        None => Box::new(SystemClock),
    };
    let stdout = io::stdout();
    let mut sink = stdout.lock();
    let summary = stream::run_stream(input, &detector, delim, &mut sink, clock.as_mut())?;
    if a.stats {
        let stats = DetectStats {
            summary: &summary,
            peak_rss_mb: stream::peak_rss_mb(),
        };
        eprintln!("{}", serde_json::to_string(&stats).map_err(|e| Error::Record(e.to_string()))?);
    }
    Ok(())
}

pub fn cmd_bench(a: BenchArgs, file: &FileConfig, threads: usize) -> CliResult<()> {
    let delim = delimiter(a.delimiter, file)?;
    let reps = a.reps.or(file.reps).unwrap_or(3);
    if reps == 0 {
        return Err(CliError::usage("--reps must be at least 1"));
    }
    let cp = load_checkpoint(&a.model)?;
    let events = parse_for_checkpoint(&cp, &a.data, delim, true)?;
    let detector = Detector::new(cp);
    let report = stream::bench(&detector, &events, reps, threads)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Record(e.to_string()))?;
    emit(&format!("{json}\n"))?;
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_json(&dir.join(BENCH_FILE), &report)?;
    }
    Ok(())
}

pub fn cmd_fit_scaler(a: FitScalerArgs, file: &FileConfig) -> CliResult<()> {
    let delim = delimiter(a.input.delimiter, file)?;
    let schema = load_schema(&a.input.schema, file)?;
    let labels = match label_map(a.labels.as_ref().or(file.labels.as_ref()))? {
        Some(l) => l,
        None if schema.has_label() => {
            let seen = crate::ingest::scan_label_names(&a.input.data, &schema, delim as u8)?;
            LabelMap::infer(seen.iter().map(String::as_str))?
        }
        None => LabelMap::canonical(),
    };
    let opts = ParseOptions {
        delimiter: delim as u8,
        lenient: a.input.lenient,
    };
    let (events, _) = parse_dataset(&a.input.data, &schema, &labels, opts)?;
    let scaler = FeatureScaler::fit(events.iter().map(|e| e.numerics.as_slice()))?;
    let names = schema.numeric_names();
    for (name, _) in names.iter().zip(&scaler.zero_variance).filter(|(_, z)| **z) {
        log::warn!("feature `{name}` has zero variance; scaled with std 1");
    }
    create_dir(&a.out)?;
    scaler.save_named(&names, a.out.join(SCALER_FILE))?;
    Ok(())
}

pub fn cmd_synth(a: SynthArgs, file: &FileConfig) -> CliResult<()> {
    let classes: Vec<String> = a
        .classes
        .or_else(|| file.classes.clone())
        .unwrap_or_else(|| DEFAULT_SYNTH_CLASSES.iter().map(|s| s.to_string()).collect());
    let per_class = a.per_class.or(file.per_class).unwrap_or(1000);
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let spec = SynthSpec::with_classes(&classes, per_class, seed).map_err(|e| CliError::usage(e.to_string()))?;
    spec.validate().map_err(|e| CliError::usage(e.to_string()))?;
    create_dir(&a.out)?;
    let path = a.out.join(SYNTH_DATA_FILE);
    let out = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(out);
    let rows = synth::write_csv(&spec, &mut w)?;
    w.flush().map_err(|e| Error::io(&path, e))?;
    let schema_path = a.out.join(SYNTH_SCHEMA_FILE);
    fs::write(&schema_path, FeatureSchema::default_dns().to_text()).map_err(|e| Error::io(&schema_path, e))?;
    log::info!("wrote {rows} rows to {}", path.display());
    Ok(())
}
