//! Mini-batch training, evaluation and the end-to-end experiment pipeline.

mod experiment;
mod metrics;

pub use experiment::{run_experiment, write_report, Experiment, ExperimentOutcome, CHECKPOINT_FILE, CONFUSION_FILE, LOG_FILE, REPORT_FILE, REPORT_JSON_FILE, TIMING_FILE};
pub use metrics::EvalReport;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{FeatureScaler, Tokenizer};
use crate::error::{Error, Result};
use crate::ingest::DnsEvent;
use crate::model::{Model, ModelParams};
use crate::nn::{
    clip_global_norm, cross_entropy, softmax_cross_entropy_backward, AdamW, AdamWConfig, EarlyStopping,
    PlateauScheduler,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub early_stop_patience: usize,
    pub plateau_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 512,
            max_epochs: 50,
            seed: 0,
            lr: 2e-3,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            train_ratio: 0.6,
            val_ratio: 0.2,
            early_stop_patience: 5,
            plateau_patience: 2,
        }
    }
}

impl TrainConfig {
    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.max_epochs == 0 {
            return bad("epoch budget must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.weight_decay > 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be positive, got {}", self.weight_decay));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip norm must be positive, got {}", self.clip_norm));
        }
        if !(self.train_ratio > 0.0 && self.val_ratio > 0.0 && self.train_ratio + self.val_ratio < 1.0) {
            return bad(format!(
                "ratios must be positive with train + val < 1 (got {} + {})",
                self.train_ratio, self.val_ratio
            ));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Events turned into model inputs: `N x T` token ids, `N x d_n`
/// standardized numerics and class indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EncodedSet {
    pub seq_len: usize,
    pub numeric_dim: usize,
    pub tokens: Vec<u32>,
    pub numerics: Vec<f32>,
    pub labels: Vec<usize>,
}

impl EncodedSet {
    /// Encodes labeled events; fails on an unlabeled one.
    pub fn encode(events: &[DnsEvent], tokenizer: &Tokenizer, scaler: &FeatureScaler) -> Result<Self> {
        let t = tokenizer.seq_len();
        let d = scaler.dim();
        let mut set = EncodedSet {
            seq_len: t,
            numeric_dim: d,
            tokens: vec![0; events.len() * t],
            numerics: vec![0.0; events.len() * d],
            labels: Vec::with_capacity(events.len()),
        };
        for (i, ev) in events.iter().enumerate() {
            tokenizer.tokenize_into(&ev.qname, &mut set.tokens[i * t..(i + 1) * t])?;
            scaler.transform_into(&ev.numerics, &mut set.numerics[i * d..(i + 1) * d])?;
            let label = ev
                .label
                .ok_or_else(|| Error::Record(format!("event `{}` is unlabeled", ev.qname)))?;
            set.labels.push(label);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies the rows in `idx` into contiguous batch buffers.
    pub fn gather(&self, idx: &[usize], tokens: &mut Vec<u32>, numerics: &mut Vec<f32>, labels: &mut Vec<usize>) {
        let (t, d) = (self.seq_len, self.numeric_dim);
        tokens.clear();
        numerics.clear();
        labels.clear();
        for &i in idx {
            tokens.extend_from_slice(&self.tokens[i * t..(i + 1) * t]);
            numerics.extend_from_slice(&self.numerics[i * d..(i + 1) * d]);
            labels.push(self.labels[i]);
        }
    }

    /// Row range `[start, end)` as borrowed slices.
    pub fn slice(&self, start: usize, end: usize) -> (&[u32], &[f32], &[usize]) {
        let (t, d) = (self.seq_len, self.numeric_dim);
        (
            &self.tokens[start * t..end * t],
            &self.numerics[start * d..end * d],
            &self.labels[start..end],
        )
    }
}

/// One line of the training log. Epoch 0 holds the losses before any update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Wall-clock seconds since training began, parallel to `epochs`.
    pub elapsed: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainLog {
    /// JSON lines, one per epoch. Timing is left out so reruns compare equal.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for rec in &self.epochs {
            s.push_str(&serde_json::to_string(rec).expect("plain struct serializes"));
            s.push('\n');
        }
        s
    }

    pub fn timing_jsonl(&self) -> String {
        let mut s = String::new();
        for (rec, secs) in self.epochs.iter().zip(&self.elapsed) {
            s.push_str(&serde_json::json!({ "epoch": rec.epoch, "elapsed_s": secs }).to_string());
            s.push('\n');
        }
        s
    }

    pub fn initial(&self) -> Option<&EpochRecord> {
        self.epochs.first()
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|r| r.epoch == self.best_epoch)
    }
}

/// Independent generator for `(seed, purpose, index)`.
pub(crate) fn derived_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
    rng
}

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

/// Mean cross-entropy over a set with dropout off, evaluated in chunks.
pub fn mean_loss(model: &Model<f32>, set: &EncodedSet, chunk: usize) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Empty("cannot compute a loss over an empty set".into()));
    }
    let chunk = chunk.max(1);
    let mut total = 0.0f64;
    let mut start = 0;
    while start < set.len() {
        let end = (start + chunk).min(set.len());
        let (tokens, numerics, labels) = set.slice(start, end);
        let probs = model.predict_probs(tokens, numerics)?;
        total += cross_entropy(&probs, labels)? as f64 * (end - start) as f64;
        start = end;
    }
    Ok(total / set.len() as f64)
}

/// Arg-max class per sample, dropout off.
pub fn predict_classes(model: &Model<f32>, set: &EncodedSet, chunk: usize) -> Result<Vec<usize>> {
    let chunk = chunk.max(1);
    let k = model.config.num_classes;
    let mut out = Vec::with_capacity(set.len());
    let mut start = 0;
    while start < set.len() {
        let end = (start + chunk).min(set.len());
        let (tokens, numerics, _) = set.slice(start, end);
        let probs = model.predict_probs(tokens, numerics)?;
        for row in probs.data().chunks_exact(k) {
            let mut best = 0;
            for (j, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
        start = end;
    }
    Ok(out)
}

pub fn evaluate(model: &Model<f32>, set: &EncodedSet, class_names: &[String]) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(Error::Empty("evaluation set is empty".into()));
    }
    let predicted = predict_classes(model, set, 512)?;
    EvalReport::from_predictions(&predicted, &set.labels, class_names)
}

fn check_set(model: &Model<f32>, set: &EncodedSet, what: &str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Empty(format!("{what} set is empty")));
    }
    let cfg = &model.config;
    if set.seq_len != cfg.seq_len || set.numeric_dim != cfg.numeric_dim {
        return Err(Error::Shape(format!(
            "{what} set has T={} d_n={}, model expects T={} d_n={}",
            set.seq_len, set.numeric_dim, cfg.seq_len, cfg.numeric_dim
        )));
    }
    if let Some(&bad) = set.labels.iter().find(|&&l| l >= cfg.num_classes) {
        return Err(Error::Shape(format!(
            "{what} set has class {bad}, model has {} classes",
            cfg.num_classes
        )));
    }
    Ok(())
}

/// Trains `model` in place and leaves it holding the parameters of the epoch
/// with the lowest validation loss.
pub fn train(model: &mut Model<f32>, train_set: &EncodedSet, val_set: &EncodedSet, config: &TrainConfig) -> Result<TrainLog> {
    config.validate()?;
    check_set(model, train_set, "training")?;
    check_set(model, val_set, "validation")?;
    let k = model.config.num_classes;
    let mut seen = vec![false; k];
    for &l in &train_set.labels {
        seen[l] = true;
    }
    for (class, _) in seen.iter().enumerate().filter(|(_, s)| !**s) {
        log::warn!("class {class} has no training samples");
    }

    let started = Instant::now();
    let mut log = TrainLog::default();
    let eval_chunk = config.batch_size.max(256);
    let initial_train = mean_loss(model, train_set, eval_chunk)?;
    let initial_val = mean_loss(model, val_set, eval_chunk)?;
    log.epochs.push(EpochRecord {
        epoch: 0,
        train_loss: initial_train,
        val_loss: initial_val,
        lr: config.lr,
    });
    log.elapsed.push(started.elapsed().as_secs_f64());

    let mut optimizer = AdamW::<f32>::new(config.optimizer());
    let mut scheduler = PlateauScheduler::with_patience(config.plateau_patience);
    let mut stopper = EarlyStopping::with_patience(config.early_stop_patience);
    let mut grads = ModelParams::<f32>::zeros(&model.config);
    let mut best = model.params.clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let (mut tokens, mut numerics, mut labels) = (Vec::new(), Vec::new(), Vec::new());

    for epoch in 1..=config.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut derived_rng(config.seed, SHUFFLE_STREAM, epoch as u64));
        let mut loss_sum = 0.0f64;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            train_set.gather(idx, &mut tokens, &mut numerics, &mut labels);
            let mut dropout_rng = derived_rng(config.seed, DROPOUT_STREAM, ((epoch as u64) << 32) | b as u64);
            let (probs, cache) = model.forward(&tokens, &numerics, Some(&mut dropout_rng))?;
            let loss = cross_entropy(&probs, &labels)? as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "epoch {epoch} batch {b}: loss {loss}, lr {}, {} optimizer steps",
                    optimizer.lr,
                    optimizer.step_count()
                )));
            }
            loss_sum += loss * idx.len() as f64;
            let grad_logits = softmax_cross_entropy_backward(&probs, &labels, idx.len())?;
            grads.fill_zero();
            model.backward(&cache, &grad_logits, &mut grads)?;
            let norm = clip_global_norm(&mut grads.tensors_mut(), config.clip_norm);
            if !norm.is_finite() {
                return Err(Error::Diverged(format!(
                    "epoch {epoch} batch {b}: gradient norm {norm}, loss {loss}"
                )));
            }
            optimizer.step(&mut model.params.tensors_mut(), &grads.tensors())?;
        }
        if !model.params.all_finite() {
            return Err(Error::Diverged(format!("epoch {epoch}: parameters became non-finite")));
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let val_loss = mean_loss(model, val_set, eval_chunk)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!("epoch {epoch}: validation loss {val_loss}")));
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: optimizer.lr,
        });
        log.elapsed.push(started.elapsed().as_secs_f64());
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6} lr {:.3e}", optimizer.lr);

        let decision = stopper.observe(val_loss);
        if decision.improved {
            best.clone_from(&model.params);
            log.best_epoch = epoch;
        }
        optimizer.lr = scheduler.observe(val_loss, optimizer.lr);
        if decision.stop {
            log.stopped_early = true;
            break;
        }
    }
    if log.best_epoch > 0 {
        model.params = best;
    }
    Ok(log)
}
