//! Graph-free DNS tunnel detection.
//!
//! DNS query records are encoded into a left-padded sequence of hashed label
//! tokens plus a standardized numeric vector, classified by a two-layer
//! recurrent network whose cells use exponential-decay forgetting, and served
//! through a streaming detector with confidence-threshold alerting.
//!
//! Pipeline: [`ingest`] parses records, [`encoder`] turns them into model
//! inputs, [`model`] holds the network built on [`nn`], [`trainer`] fits and
//! evaluates it, and [`stream`] runs online detection and benchmarks.
//! [`synth`] produces labeled synthetic traffic for desk-scale runs.

pub mod cli;
pub mod encoder;
pub mod error;
pub mod ingest;
pub mod model;
pub mod nn;
pub mod stream;
pub mod synth;
pub mod trainer;

pub use encoder::{bucketize, tokenize, FeatureScaler, TokenSeq, Tokenizer};
pub use error::{Error, ErrorKind, Result};
pub use ingest::{DnsEvent, FeatureSchema, LabelMap};
pub use model::{Checkpoint, HyxnetConfig, Model, ModelParams, Prediction};
pub use stream::{Alert, BenchReport, Detector};
pub use trainer::{EvalReport, TrainConfig};



