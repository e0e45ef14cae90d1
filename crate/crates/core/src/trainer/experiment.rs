use std::fs;
use std::path::{Path, PathBuf};

use super::{evaluate, train, EncodedSet, EvalReport, TrainConfig, TrainLog};
use crate::encoder::{FeatureScaler, Tokenizer};
use crate::error::{Error, Result};
use crate::ingest::{parse_dataset, scan_label_names, split_events, DnsEvent, FeatureSchema, LabelMap, ParseOptions};
use crate::model::{Checkpoint, HyxnetConfig, Model};

pub const CHECKPOINT_FILE: &str = "model.hyxn";
pub const LOG_FILE: &str = "train.log";
pub const TIMING_FILE: &str = "timing.log";
pub const REPORT_FILE: &str = "report.txt";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const CONFUSION_FILE: &str = "confusion.csv";

/// Everything one training run needs. `model.numeric_dim` and
/// `model.num_classes` are overwritten from the schema and label map.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub schema: FeatureSchema,
    /// Class names; inferred from the dataset when absent.
    pub labels: Option<LabelMap>,
    pub parse: ParseOptions,
    pub model: HyxnetConfig,
    pub train: TrainConfig,
    pub out_dir: Option<PathBuf>,
}

impl Experiment {
    pub fn new(schema: FeatureSchema) -> Self {
        Experiment {
            schema,
            labels: None,
            parse: ParseOptions::default(),
            model: HyxnetConfig::default(),
            train: TrainConfig::default(),
            out_dir: None,
        }
    }

    /// Split, fit, train and evaluate on already parsed events.
    pub fn run_events(&self, events: &[DnsEvent], labels: LabelMap) -> Result<ExperimentOutcome> {
        self.train.validate()?;
        if events.is_empty() {
            return Err(Error::Empty("dataset has no usable rows".into()));
        }
        let split = split_events(events, self.train.train_ratio, self.train.val_ratio, self.train.seed)?;
        if split.val.is_empty() || split.test.is_empty() {
            return Err(Error::Empty(format!(
                "split left {} validation and {} test rows",
                split.val.len(),
                split.test.len()
            )));
        }

        let scaler = FeatureScaler::fit(split.train.iter().map(|e| e.numerics.as_slice()))?;
        let names = self.schema.numeric_names();
        for (name, _) in names.iter().zip(&scaler.zero_variance).filter(|(_, z)| **z) {
            log::warn!("feature `{name}` is constant on the training split; scaled with std 1");
        }

        let mut cfg = self.model;
        cfg.numeric_dim = self.schema.numeric_count();
        cfg.num_classes = labels.len();
        cfg.validate()?;
        let tokenizer = Tokenizer::new(cfg.seq_len, cfg.buckets)?;
        let train_set = EncodedSet::encode(&split.train, &tokenizer, &scaler)?;
        let val_set = EncodedSet::encode(&split.val, &tokenizer, &scaler)?;
        let test_set = EncodedSet::encode(&split.test, &tokenizer, &scaler)?;

        let mut model = Model::<f32>::new(cfg, self.train.seed)?;
        let log = train(&mut model, &train_set, &val_set, &self.train)?;
        let report = evaluate(&model, &test_set, labels.names())?;
        let checkpoint = Checkpoint::new(model, self.schema.clone(), labels, scaler)?;

        let outcome = ExperimentOutcome {
            report,
            log,
            checkpoint,
            split_sizes: [train_set.len(), val_set.len(), test_set.len()],
        };
        if let Some(dir) = &self.out_dir {
            outcome.write_artifacts(dir)?;
        }
        Ok(outcome)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    /// Metrics on the held-out test split.
    pub report: EvalReport,
    pub log: TrainLog,
    pub checkpoint: Checkpoint,
    /// Train, validation and test row counts.
    pub split_sizes: [usize; 3],
}

impl ExperimentOutcome {
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.checkpoint.save(dir.join(CHECKPOINT_FILE))?;
        write_file(&dir.join(LOG_FILE), self.log.to_jsonl().as_bytes())?;
        write_file(&dir.join(TIMING_FILE), self.log.timing_jsonl().as_bytes())?;
        write_report(dir, &self.report)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the text report, its JSON form and the raw confusion counts.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(REPORT_FILE), report.to_text().as_bytes())?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Record(e.to_string()))?;
    write_file(&dir.join(REPORT_JSON_FILE), json.as_bytes())?;
    let path = dir.join(CONFUSION_FILE);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    report.write_confusion_csv(file)
}

/// Parses `data` and runs the whole pipeline.
pub fn run_experiment(data: impl AsRef<Path>, experiment: &Experiment) -> Result<ExperimentOutcome> {
    let data = data.as_ref();
    let labels = match &experiment.labels {
        Some(l) => l.clone(),
        None => {
            let seen = scan_label_names(data, &experiment.schema, experiment.parse.delimiter)?;
            LabelMap::infer(seen.iter().map(String::as_str))?
        }
    };
    let (events, parsed) = parse_dataset(data, &experiment.schema, &labels, experiment.parse)?;
    if parsed.rejected > 0 {
        log::warn!("{} rows rejected while parsing {}", parsed.rejected, data.display());
    }
    experiment.run_events(&events, labels)
}
