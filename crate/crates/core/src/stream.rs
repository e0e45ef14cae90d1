//! Online detection: per-record classification with threshold alerting, a
//! line-stream driver and a latency benchmark.

use std::io::{BufRead, Write};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::encoder::Tokenizer;
use crate::error::{Error, Result};
use crate::ingest::{parse_log_line, DnsEvent, FeatureSchema};
use crate::model::{Checkpoint, Prediction};

pub const DEFAULT_THRESHOLD: f32 = 0.5;
pub const DEFAULT_BLOCK_THRESHOLD: f32 = 0.99;
pub const DEFAULT_BENIGN: [&str; 2] = ["normal", "wildcard"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    Alert,
    BlockRecommend,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Alert {
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
    pub qname: String,
    pub class: String,
    pub confidence: f32,
    pub action: Action,
}

/// Timestamp source for alerts.
pub trait Clock {
    fn now(&mut self) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&mut self) -> f64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0)
    }
}

/// Always returns the same instant.
#[derive(Debug, Clone, Copy, Default)]
pub struct FixedClock(pub f64);

impl Clock for FixedClock {
    fn now(&mut self) -> f64 {
        self.0
    }
}

fn check_threshold(t: f32, what: &str) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} must lie in (0, 1), got {t}")))
    }
}

/// A loaded checkpoint plus alerting policy. Shared read-only across threads.
#[derive(Debug, Clone)]
pub struct Detector {
    checkpoint: Checkpoint,
    tokenizer: Tokenizer,
    threshold: f32,
    block_threshold: f32,
    benign: Vec<bool>,
}

impl Detector {
    /// Default policy: threshold 0.5, block recommendation at 0.99, and the
    /// `normal` and `wildcard` classes (where present) treated as benign.
    pub fn new(checkpoint: Checkpoint) -> Self {
        let benign = checkpoint
            .labels
            .names()
            .iter()
            .map(|n| DEFAULT_BENIGN.contains(&n.as_str()))
            .collect();
        Detector {
            tokenizer: checkpoint.tokenizer(),
            checkpoint,
            threshold: DEFAULT_THRESHOLD,
            block_threshold: DEFAULT_BLOCK_THRESHOLD,
            benign,
        }
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.checkpoint.schema
    }

    pub fn class_names(&self) -> &[String] {
        self.checkpoint.labels.names()
    }

    pub fn threshold(&self) -> f32 {
        self.threshold
    }

    pub fn set_threshold(&mut self, threshold: f32) -> Result<()> {
        check_threshold(threshold, "threshold")?;
        self.threshold = threshold;
        Ok(())
    }

    pub fn block_threshold(&self) -> f32 {
        self.block_threshold
    }

    /// Confidence at which an alert recommends blocking.
    pub fn set_block_threshold(&mut self, threshold: f32) -> Result<()> {
        check_threshold(threshold, "block threshold")?;
        self.block_threshold = threshold;
        Ok(())
    }

    /// Replaces the benign class set; every name must be a model class.
    pub fn set_benign<S: AsRef<str>>(&mut self, names: &[S]) -> Result<()> {
        let mut benign = vec![false; self.benign.len()];
        for name in names {
            let idx = self
                .checkpoint
                .labels
                .index_of(name.as_ref())
                .ok_or_else(|| Error::UnknownLabel(name.as_ref().to_string()))?;
            benign[idx] = true;
        }
        self.benign = benign;
        Ok(())
    }

    pub fn is_benign(&self, class: usize) -> bool {
        self.benign.get(class).copied().unwrap_or(false)
    }

    /// Encodes and classifies one event with dropout off.
    pub fn classify(&self, event: &DnsEvent) -> Result<Prediction> {
        let cfg = &self.checkpoint.model.config;
        if event.numerics.len() != cfg.numeric_dim {
            return Err(Error::Shape(format!(
                "event has {} numeric features, checkpoint expects {}",
                event.numerics.len(),
                cfg.numeric_dim
            )));
        }
        let mut tokens = vec![0u32; cfg.seq_len];
        let mut numerics = vec![0f32; cfg.numeric_dim];
        self.tokenizer.tokenize_into(&event.qname, &mut tokens)?;
        self.checkpoint.scaler.transform_into(&event.numerics, &mut numerics)?;
        self.checkpoint.model.predict(&tokens, &numerics)
    }

    /// The alerting rule: non-benign class at or above the threshold.
    pub fn decide(&self, event: &DnsEvent, prediction: &Prediction, timestamp: f64) -> Option<Alert> {
        if self.is_benign(prediction.label) || prediction.confidence < self.threshold {
            return None;
        }
        let action = if prediction.confidence >= self.block_threshold {
            Action::BlockRecommend
        } else {
            Action::Alert
        };
        Some(Alert {
            timestamp,
            qname: event.qname.clone(),
            class: self.class_names()[prediction.label].clone(),
            confidence: prediction.confidence,
            action,
        })
    }

    pub fn detect(&self, event: &DnsEvent, clock: &mut dyn Clock) -> Result<(Prediction, Option<Alert>)> {
        let prediction = self.classify(event)?;
        let alert = self.decide(event, &prediction, clock.now());
        Ok((prediction, alert))
    }

    /// Parses one live record per the checkpoint schema.
    pub fn parse_line(&self, line: &str, delimiter: char) -> Result<DnsEvent> {
        parse_log_line(line, self.schema(), delimiter)
    }
}

/// Intake stage between the line source and the classifier.
pub trait EventBuffer {
    /// Takes one event; returns the event to classify now, if any.
    fn push(&mut self, event: DnsEvent) -> Option<&DnsEvent>;
    fn clear(&mut self);
}

/// Holds exactly one event: every record is classified on arrival.
#[derive(Debug, Default)]
pub struct PerRecord {
    slot: Option<DnsEvent>,
}

impl EventBuffer for PerRecord {
    fn push(&mut self, event: DnsEvent) -> Option<&DnsEvent> {
        self.slot = Some(event);
        self.slot.as_ref()
    }

    fn clear(&mut self) {
        self.slot = None;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamSummary {
    pub processed: u64,
    pub alerted: u64,
    pub malformed: u64,
    pub class_names: Vec<String>,
    pub per_class: Vec<u64>,
}

const MALFORMED_LOG_LIMIT: u64 = 10;

fn is_header(line: &str, schema: &FeatureSchema, delimiter: char) -> bool {
    let fields: Vec<&str> = line.split(delimiter).map(str::trim).collect();
    let header = schema.header();
    fields == header || fields == schema.without_label().header()
}

/// Classifies every record from `input` in order, writing one JSON alert per
/// line to `sink` and flushing after each. Malformed records are counted and
/// skipped; blank lines, `#` comments and a leading header line are ignored.
pub fn run_stream<R: BufRead, W: Write>(
    mut input: R,
    detector: &Detector,
    delimiter: char,
    sink: &mut W,
    clock: &mut dyn Clock,
) -> Result<StreamSummary> {
    let mut buffer = PerRecord::default();
    run_stream_with(&mut input, detector, delimiter, sink, clock, &mut buffer)
}

pub fn run_stream_with<R: BufRead, W: Write>(
    input: &mut R,
    detector: &Detector,
    delimiter: char,
    sink: &mut W,
    clock: &mut dyn Clock,
    buffer: &mut dyn EventBuffer,
) -> Result<StreamSummary> {
    let k = detector.class_names().len();
    let mut summary = StreamSummary {
        processed: 0,
        alerted: 0,
        malformed: 0,
        class_names: detector.class_names().to_vec(),
        per_class: vec![0; k],
    };
    let mut line = String::new();
    let mut line_no = 0u64;
    let mut seen_record = false;
    loop {
        line.clear();
        let n = input.read_line(&mut line).map_err(|e| Error::io("<input>", e))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let text = line.trim_end_matches(['\r', '\n']);
        if text.trim().is_empty() || text.starts_with('#') {
            continue;
        }
        if !seen_record && is_header(text, detector.schema(), delimiter) {
            seen_record = true;
            continue;
        }
        seen_record = true;
        let outcome = detector
            .parse_line(text, delimiter)
            .and_then(|ev| match buffer.push(ev) {
                Some(ev) => detector.classify(ev).map(|p| Some((p, ev))),
                None => Ok(None),
            });
        let (prediction, event) = match outcome {
            Ok(Some(found)) => found,
            Ok(None) => continue,
            Err(e) => {
                summary.malformed += 1;
                if summary.malformed <= MALFORMED_LOG_LIMIT {
                    log::warn!("line {line_no}: skipped: {e}");
                }
                continue;
            }
        };
        summary.processed += 1;
        summary.per_class[prediction.label] += 1;
        if let Some(alert) = detector.decide(event, &prediction, clock.now()) {
            summary.alerted += 1;
            let json = serde_json::to_string(&alert).map_err(|e| Error::Record(e.to_string()))?;
            writeln!(sink, "{json}")
                .and_then(|_| sink.flush())
                .map_err(|e| Error::io("<alerts>", e))?;
        }
    }
    buffer.clear();
    Ok(summary)
}

/// Latency figures for per-record inference. Timing covers encoding plus one
/// forward pass per sample; no window fill time is included since records are
/// classified on arrival.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub samples: usize,
    pub reps: usize,
    pub workers: usize,
    /// Average detection time per sample, from the median repetition.
    pub adt_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub throughput: f64,
    pub total_s: f64,
    /// Per-worker ADT of the median repetition.
    pub worker_adt_ms: Vec<f64>,
    /// Peak resident set size of this process, where the OS reports it.
    pub peak_rss_mb: Option<f64>,
}

fn read_status_kb(key: &str) -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with(key))?;
    line[key.len()..].trim().trim_end_matches("kB").trim().parse().ok()
}

/// Peak resident memory of this process in MB.
pub fn peak_rss_mb() -> Option<f64> {
    read_status_kb("VmHWM:").map(|kb| kb as f64 / 1024.0)
}

/// Current resident memory of this process in MB.
pub fn current_rss_mb() -> Option<f64> {
    read_status_kb("VmRSS:").map(|kb| kb as f64 / 1024.0)
}

pub const MIN_BENCH_SAMPLES: usize = 1000;

struct RepTiming {
    wall_s: f64,
    latencies_ms: Vec<f64>,
    worker_adt_ms: Vec<f64>,
}

fn time_slice(detector: &Detector, events: &[DnsEvent], out: &mut Vec<f64>) -> Result<f64> {
    let start = Instant::now();
    for ev in events {
        let t = Instant::now();
        std::hint::black_box(detector.classify(ev)?);
        out.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(start.elapsed().as_secs_f64())
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

/// Times `reps` passes over `events` after one untimed warm-up pass and
/// reports the repetition with the median ADT. With `workers > 1` the events
/// are split into contiguous shards classified on separate threads.
pub fn bench(detector: &Detector, events: &[DnsEvent], reps: usize, workers: usize) -> Result<BenchReport> {
    if events.is_empty() {
        return Err(Error::Empty("no events to benchmark".into()));
    }
    if reps == 0 || workers == 0 {
        return Err(Error::InvalidArgument("repetitions and workers must be positive".into()));
    }
    if events.len() < MIN_BENCH_SAMPLES {
        log::warn!(
            "benchmarking {} samples; at least {MIN_BENCH_SAMPLES} give stable figures",
            events.len()
        );
    }
    for ev in events.iter().take(MIN_BENCH_SAMPLES) {
        std::hint::black_box(detector.classify(ev)?);
    }

    let shard = events.len().div_ceil(workers);
    let mut timings = Vec::with_capacity(reps);
    for _ in 0..reps {
        let timing = if workers == 1 {
            let mut lat = Vec::with_capacity(events.len());
            let wall = time_slice(detector, events, &mut lat)?;
            RepTiming {
                wall_s: wall,
                worker_adt_ms: vec![wall * 1e3 / events.len() as f64],
                latencies_ms: lat,
            }
        } else {
            let start = Instant::now();
            let results: Vec<Result<(f64, Vec<f64>, usize)>> = std::thread::scope(|s| {
                let handles: Vec<_> = events
                    .chunks(shard)
                    .map(|part| {
                        s.spawn(move || {
                            let mut lat = Vec::with_capacity(part.len());
                            let wall = time_slice(detector, part, &mut lat)?;
                            Ok((wall, lat, part.len()))
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(Error::Record("benchmark worker panicked".into()))))
                    .collect()
            });
            let wall = start.elapsed().as_secs_f64();
            let mut lat = Vec::with_capacity(events.len());
            let mut worker_adt_ms = Vec::new();
            for r in results {
                let (w, l, n) = r?;
                worker_adt_ms.push(w * 1e3 / n as f64);
                lat.extend(l);
            }
            RepTiming {
                wall_s: wall,
                latencies_ms: lat,
                worker_adt_ms,
            }
        };
        timings.push(timing);
    }
    timings.sort_by(|a, b| a.wall_s.total_cmp(&b.wall_s));
    let mut median = timings.swap_remove(timings.len() / 2);
    median.latencies_ms.sort_by(f64::total_cmp);
    let n = events.len();
    Ok(BenchReport {
        samples: n,
        reps,
        workers,
        adt_ms: median.wall_s * 1e3 / n as f64,
        p50_ms: percentile(&median.latencies_ms, 0.50),
        p99_ms: percentile(&median.latencies_ms, 0.99),
        throughput: n as f64 / median.wall_s,
        total_s: median.wall_s,
        worker_adt_ms: median.worker_adt_ms,
        peak_rss_mb: peak_rss_mb(),
    })
}
