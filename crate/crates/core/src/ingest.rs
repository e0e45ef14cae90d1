//! DNS record ingestion: dataset CSV files, live log lines, class labels and
//! train/validation/test partitioning.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class names of the twelve-class tunnel corpus, in canonical index order.
pub const CANONICAL_CLASSES: [&str; 12] = [
    "normal",
    "wildcard",
    "tcp-over-dns",
    "dnscat2",
    "andiodine",
    "dns2tcp",
    "iodine",
    "dnspot",
    "dns-shell",
    "tuns",
    "CobaltStrike",
    "OzymanDNS",
];

/// One DNS query record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnsEvent {
    pub qname: String,
    pub numerics: Vec<f64>,
    pub label: Option<usize>,
}

impl DnsEvent {
    /// Builds an event, normalizing the query name (surrounding whitespace and
    /// one trailing dot removed) and rejecting empty names or non-finite
    /// numerics.
    pub fn new(qname: &str, numerics: Vec<f64>, label: Option<usize>) -> Result<Self> {
        let qname = normalize_qname(qname)?;
        if let Some(pos) = numerics.iter().position(|v| !v.is_finite()) {
            return Err(Error::Record(format!("numeric feature {pos} is not finite")));
        }
        Ok(DnsEvent {
            qname,
            numerics,
            label,
        })
    }
}

fn normalize_qname(raw: &str) -> Result<String> {
    let trimmed = raw.trim();
    let trimmed = trimmed.strip_suffix('.').unwrap_or(trimmed);
    if trimmed.is_empty() {
        return Err(Error::Record("empty query name".into()));
    }
    Ok(trimmed.to_string())
}

/// Ordered class names with reverse lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelMap {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Schema("label map needs at least one class".into()));
        }
        let mut index = HashMap::with_capacity(names.len());
        let mut owned = Vec::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            let name = name.as_ref().trim();
            if name.is_empty() {
                return Err(Error::Schema(format!("class {i} has an empty name")));
            }
            if index.insert(name.to_string(), i).is_some() {
                return Err(Error::Schema(format!("duplicate class name `{name}`")));
            }
            owned.push(name.to_string());
        }
        Ok(LabelMap {
            names: owned,
            index,
        })
    }

    /// The twelve-class map in canonical order.
    pub fn canonical() -> Self {
        Self::new(&CANONICAL_CLASSES).expect("canonical names are unique")
    }

    /// Derives a label map from observed class names. Names that belong to
    /// the canonical set are ordered canonically and come first; any others
    /// follow in lexicographic order.
    pub fn infer<'a, I: IntoIterator<Item = &'a str>>(observed: I) -> Result<Self> {
        let mut known = Vec::new();
        let mut other = Vec::new();
        for name in observed {
            let name = name.trim();
            if name.is_empty() {
                continue;
            }
            match CANONICAL_CLASSES.iter().position(|c| *c == name) {
                Some(pos) => known.push(pos),
                None => other.push(name.to_string()),
            }
        }
        known.sort_unstable();
        known.dedup();
        other.sort();
        other.dedup();
        let names: Vec<String> = known
            .into_iter()
            .map(|i| CANONICAL_CLASSES[i].to_string())
            .chain(other)
            .collect();
        Self::new(&names)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name.trim()).copied()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Qname,
    Label,
}

impl fmt::Display for ColumnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColumnKind::Numeric => "numeric",
            ColumnKind::Qname => "qname",
            ColumnKind::Label => "label",
        })
    }
}

impl FromStr for ColumnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "numeric" => Ok(ColumnKind::Numeric),
            "qname" => Ok(ColumnKind::Qname),
            "label" => Ok(ColumnKind::Label),
            other => Err(Error::Schema(format!("unknown column kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

/// Column layout of a dataset file or log line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSchema {
    columns: Vec<Column>,
    qname_col: usize,
    label_col: Option<usize>,
    numeric_cols: Vec<usize>,
}

/// Columns of the default schema: query name, eight numeric features, label.
pub const DEFAULT_COLUMNS: [(&str, ColumnKind); 10] = [
    ("dns.qry.name", ColumnKind::Qname),
    ("frame.len", ColumnKind::Numeric),
    ("dns.resp.ttl", ColumnKind::Numeric),
    ("qname.len", ColumnKind::Numeric),
    ("qname.labels", ColumnKind::Numeric),
    ("qname.entropy", ColumnKind::Numeric),
    ("dns.qry.type", ColumnKind::Numeric),
    ("dns.count.answers", ColumnKind::Numeric),
    ("frame.time_delta", ColumnKind::Numeric),
    ("label", ColumnKind::Label),
];

impl FeatureSchema {
    pub fn new(columns: Vec<Column>) -> Result<Self> {
        let mut qname_col = None;
        let mut label_col = None;
        let mut numeric_cols = Vec::new();
        let mut seen = HashMap::new();
        for (i, col) in columns.iter().enumerate() {
            if col.name.trim().is_empty() || col.name.contains(',') {
                return Err(Error::Schema(format!("invalid column name `{}`", col.name)));
            }
            if seen.insert(col.name.as_str(), i).is_some() {
                return Err(Error::Schema(format!("duplicate column `{}`", col.name)));
            }
            match col.kind {
                ColumnKind::Numeric => numeric_cols.push(i),
                ColumnKind::Qname if qname_col.is_some() => {
                    return Err(Error::Schema("more than one qname column".into()))
                }
                ColumnKind::Qname => qname_col = Some(i),
                ColumnKind::Label if label_col.is_some() => {
                    return Err(Error::Schema("more than one label column".into()))
                }
                ColumnKind::Label => label_col = Some(i),
            }
        }
        let qname_col = qname_col.ok_or_else(|| Error::Schema("no qname column".into()))?;
        Ok(FeatureSchema {
            columns,
            qname_col,
            label_col,
            numeric_cols,
        })
    }

    pub fn default_dns() -> Self {
        let columns = DEFAULT_COLUMNS
            .iter()
            .map(|(name, kind)| Column {
                name: name.to_string(),
                kind: *kind,
            })
            .collect();
        Self::new(columns).expect("default schema is valid")
    }

    /// Parses the `name:kind` per-line text form. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut columns = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, kind) = line
                .rsplit_once(':')
                .ok_or_else(|| Error::Schema(format!("line {}: expected `name:kind`", n + 1)))?;
            columns.push(Column {
                name: name.trim().to_string(),
                kind: kind.parse()?,
            });
        }
        Self::new(columns)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.columns
            .iter()
            .map(|c| format!("{}:{}\n", c.name, c.kind))
            .collect()
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    /// Number of numeric features, `d_n`.
    pub fn numeric_count(&self) -> usize {
        self.numeric_cols.len()
    }

    pub fn numeric_names(&self) -> Vec<&str> {
        self.numeric_cols
            .iter()
            .map(|&i| self.columns[i].name.as_str())
            .collect()
    }

    pub fn has_label(&self) -> bool {
        self.label_col.is_some()
    }

    /// The same schema with the label column removed.
    pub fn without_label(&self) -> Self {
        let columns = self
            .columns
            .iter()
            .filter(|c| c.kind != ColumnKind::Label)
            .cloned()
            .collect();
        Self::new(columns).expect("removing the label keeps a valid schema")
    }

    pub fn header(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ParseOptions {
    pub delimiter: u8,
    /// Reject bad rows and keep going instead of failing on the first one.
    pub lenient: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            delimiter: b',',
            lenient: false,
        }
    }
}

/// Outcome counts of a dataset parse.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParseReport {
    pub accepted: usize,
    pub rejected: usize,
    /// First rejection reasons (capped), as `(line, reason)`.
    pub samples: Vec<(u64, String)>,
}

const MAX_REJECTION_SAMPLES: usize = 32;

/// Parses a header-first CSV dataset.
pub fn parse_dataset(
    path: impl AsRef<Path>,
    schema: &FeatureSchema,
    labels: &LabelMap,
    opts: ParseOptions,
) -> Result<(Vec<DnsEvent>, ParseReport)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(file, schema, labels, opts)
}

pub fn read_dataset<R: Read>(
    reader: R,
    schema: &FeatureSchema,
    labels: &LabelMap,
    opts: ParseOptions,
) -> Result<(Vec<DnsEvent>, ParseReport)> {
    let mut rdr = csv_reader(reader, opts.delimiter);
    let positions = header_positions(&mut rdr, schema)?;

    let mut events = Vec::new();
    let mut report = ParseReport::default();
    let mut record = csv::StringRecord::new();
    loop {
        let line = rdr.position().line();
        let parsed = match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => event_from_record(&record, &positions, schema, Some(labels)),
            Err(e) => Err(Error::Record(e.to_string())),
        };
        match parsed {
            Ok(ev) => {
                events.push(ev);
                report.accepted += 1;
            }
            Err(e) if opts.lenient => {
                report.rejected += 1;
                if report.samples.len() < MAX_REJECTION_SAMPLES {
                    report.samples.push((line, e.to_string()));
                }
            }
            Err(e) => {
                return Err(Error::Row {
                    line,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok((events, report))
}

/// Collects the distinct values of the label column, in first-seen order.
pub fn scan_label_names(
    path: impl AsRef<Path>,
    schema: &FeatureSchema,
    delimiter: u8,
) -> Result<Vec<String>> {
    let path = path.as_ref();
    let label_col = schema
        .label_col
        .ok_or_else(|| Error::Schema("schema has no label column".into()))?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv_reader(file, delimiter);
    let positions = header_positions(&mut rdr, schema)?;
    let mut seen = Vec::<String>::new();
    for record in rdr.records() {
        let Ok(record) = record else { continue };
        if let Some(v) = record.get(positions[label_col]) {
            if !v.is_empty() && !seen.iter().any(|s| s == v) {
                seen.push(v.to_string());
            }
        }
    }
    Ok(seen)
}

fn csv_reader<R: Read>(reader: R, delimiter: u8) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader)
}

/// Maps each schema column to its position in the file header.
fn header_positions<R: Read>(rdr: &mut csv::Reader<R>, schema: &FeatureSchema) -> Result<Vec<usize>> {
    let header = rdr
        .headers()
        .map_err(|e| Error::Schema(format!("unreadable header: {e}")))?
        .clone();
    if header.len() != schema.columns.len() {
        return Err(Error::Schema(format!(
            "header has {} columns, schema expects {} ({})",
            header.len(),
            schema.columns.len(),
            schema.header().join(",")
        )));
    }
    schema
        .columns
        .iter()
        .map(|col| {
            header
                .iter()
                .position(|h| h == col.name)
                .ok_or_else(|| Error::Schema(format!("header lacks column `{}`", col.name)))
        })
        .collect()
}

fn parse_numeric(raw: &str, name: &str) -> Result<f64> {
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| Error::Record(format!("column `{name}`: `{raw}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::Record(format!("column `{name}`: `{raw}` is not finite")));
    }
    Ok(v)
}

fn event_from_record(
    record: &csv::StringRecord,
    positions: &[usize],
    schema: &FeatureSchema,
    labels: Option<&LabelMap>,
) -> Result<DnsEvent> {
    let field = |col: usize| -> Result<&str> {
        record.get(positions[col]).ok_or_else(|| {
            Error::Record(format!(
                "expected {} fields, found {}",
                schema.columns.len(),
                record.len()
            ))
        })
    };
    if record.len() != schema.columns.len() {
        return Err(Error::Record(format!(
            "expected {} fields, found {}",
            schema.columns.len(),
            record.len()
        )));
    }
    let mut numerics = Vec::with_capacity(schema.numeric_cols.len());
    for &col in &schema.numeric_cols {
        numerics.push(parse_numeric(field(col)?, &schema.columns[col].name)?);
    }
    let label = match (schema.label_col, labels) {
        (Some(col), Some(labels)) => {
            let name = field(col)?;
            Some(
                labels
                    .index_of(name)
                    .ok_or_else(|| Error::UnknownLabel(name.to_string()))?,
            )
        }
        _ => None,
    };
    DnsEvent::new(field(schema.qname_col)?, numerics, label)
}

/// Parses one live log record. Fields follow the schema order with the label
/// column omitted; a record that still carries the label field is accepted
/// and the label ignored.
pub fn parse_log_line(line: &str, schema: &FeatureSchema, delimiter: char) -> Result<DnsEvent> {
    let fields: Vec<&str> = line.trim_end_matches(['\r', '\n']).split(delimiter).collect();
    let full = schema.columns.len();
    let unlabeled = full - usize::from(schema.has_label());
    let with_label = if fields.len() == full {
        true
    } else if fields.len() == unlabeled {
        false
    } else {
        return Err(Error::Record(format!(
            "expected {unlabeled} fields, found {}",
            fields.len()
        )));
    };
    let mut qname = "";
    let mut numerics = Vec::with_capacity(schema.numeric_cols.len());
    let mut it = fields.iter();
    for col in &schema.columns {
        if col.kind == ColumnKind::Label && !with_label {
            continue;
        }
        let raw = it.next().copied().unwrap_or_default();
        match col.kind {
            ColumnKind::Qname => qname = raw,
            ColumnKind::Numeric => numerics.push(parse_numeric(raw, &col.name)?),
            ColumnKind::Label => {}
        }
    }
    DnsEvent::new(qname, numerics, None)
}

/// Renders an event as one delimited row in schema column order.
pub fn format_row(
    event: &DnsEvent,
    schema: &FeatureSchema,
    labels: &LabelMap,
    delimiter: u8,
) -> Result<String> {
    let mut out = Vec::new();
    {
        let mut wtr = csv::WriterBuilder::new()
            .delimiter(delimiter)
            .has_headers(false)
            .from_writer(&mut out);
        wtr.write_record(row_fields(event, schema, labels)?)
            .map_err(|e| Error::Record(e.to_string()))?;
        wtr.flush().map_err(|e| Error::io("<buffer>", e))?;
    }
    let mut s = String::from_utf8(out).expect("csv output is utf-8");
    while s.ends_with(['\n', '\r']) {
        s.pop();
    }
    Ok(s)
}

fn row_fields(event: &DnsEvent, schema: &FeatureSchema, labels: &LabelMap) -> Result<Vec<String>> {
    if event.numerics.len() != schema.numeric_count() {
        return Err(Error::Shape(format!(
            "event has {} numerics, schema has {}",
            event.numerics.len(),
            schema.numeric_count()
        )));
    }
    let mut numerics = event.numerics.iter();
    schema
        .columns
        .iter()
        .map(|col| match col.kind {
            ColumnKind::Qname => Ok(event.qname.clone()),
            ColumnKind::Numeric => Ok(numerics.next().expect("count checked").to_string()),
            ColumnKind::Label => event
                .label
                .and_then(|l| labels.name(l))
                .map(str::to_string)
                .ok_or_else(|| Error::Record(format!("event `{}` has no valid label", event.qname))),
        })
        .collect()
}

/// Writes events as a header-first dataset that [`read_dataset`] accepts.
pub fn write_dataset<W: Write>(
    writer: W,
    events: &[DnsEvent],
    schema: &FeatureSchema,
    labels: &LabelMap,
    delimiter: u8,
) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_writer(writer);
    let csv_err = |e: csv::Error| Error::Record(e.to_string());
    wtr.write_record(schema.header()).map_err(csv_err)?;
    for ev in events {
        wtr.write_record(row_fields(ev, schema, labels)?)
            .map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| Error::io("<dataset>", e))
}

/// A three-way stratified partition.
#[derive(Debug, Clone, Default)]
pub struct Split {
    pub train: Vec<DnsEvent>,
    pub val: Vec<DnsEvent>,
    pub test: Vec<DnsEvent>,
    /// Classes with too few samples to stratify; all their events are in
    /// `train`.
    pub train_only_classes: Vec<usize>,
}

/// Per-class `(train, val, test)` counts for a class of `n` samples.
fn stratum_sizes(n: usize, train_ratio: f64, val_ratio: f64) -> (usize, usize, usize) {
    if n < 3 {
        return (n, 0, 0);
    }
    let mut train = ((n as f64 * train_ratio).round() as usize).max(1);
    let mut val = ((n as f64 * val_ratio).round() as usize).max(1);
    while train + val > n - 1 {
        if train >= val && train > 1 {
            train -= 1;
        } else {
            val -= 1;
        }
    }
    (train, val, n - train - val)
}

/// Deterministic stratified shuffle split. Every class with at least three
/// samples lands in all three partitions; smaller classes stay in training.
pub fn split_events(
    events: &[DnsEvent],
    train_ratio: f64,
    val_ratio: f64,
    seed: u64,
) -> Result<Split> {
    if !(train_ratio > 0.0 && val_ratio > 0.0 && train_ratio + val_ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "ratios must be positive with train + val < 1 (got {train_ratio} + {val_ratio})"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = Vec::new();
    for (i, ev) in events.iter().enumerate() {
        let label = ev
            .label
            .ok_or_else(|| Error::Record(format!("event `{}` is unlabeled", ev.qname)))?;
        if by_class.len() <= label {
            by_class.resize(label + 1, Vec::new());
        }
        by_class[label].push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split::default();
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let (n_train, n_val, _) = stratum_sizes(members.len(), train_ratio, val_ratio);
        if members.len() < 3 {
            log::warn!(
                "class {class} has {} samples; kept in the training split only",
                members.len()
            );
            split.train_only_classes.push(class);
        }
        for (pos, &i) in members.iter().enumerate() {
            let target = if pos < n_train {
                &mut split.train
            } else if pos < n_train + n_val {
                &mut split.val
            } else {
                &mut split.test
            };
            target.push(events[i].clone());
        }
    }
    split.train.shuffle(&mut rng);
    split.val.shuffle(&mut rng);
    split.test.shuffle(&mut rng);
    Ok(split)
}
