//! Model input encoding: hashed label tokens and numeric standardization.
//!
//! Each dot-separated label of a query name is hashed into one of `B - 1`
//! buckets (ids `1..B`); id 0 is reserved for padding. The token sequence is
//! left-padded to a fixed length so the registrable suffix (SLD.TLD) always
//! lands in the same trailing positions. No state grows with the number of
//! distinct names seen.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SEQ_LEN: usize = 15;
pub const DEFAULT_BUCKETS: usize = 1 << 15;
pub const PAD: u32 = 0;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over `bytes`, ASCII-lowercased on the fly.
pub fn fnv1a64_lower(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b.to_ascii_lowercase())).wrapping_mul(FNV_PRIME)
    })
}

/// Fixed-length token ids for one query name.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn pad_len(&self) -> usize {
        self.0.iter().take_while(|&&t| t == PAD).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tokenizer {
    seq_len: usize,
    buckets: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer {
            seq_len: DEFAULT_SEQ_LEN,
            buckets: DEFAULT_BUCKETS,
        }
    }
}

impl Tokenizer {
    pub fn new(seq_len: usize, buckets: usize) -> Result<Self> {
        if seq_len == 0 || buckets < 2 || buckets > u32::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "tokenizer needs seq_len >= 1 and 2 <= buckets < 2^32 (got {seq_len}, {buckets})"
            )));
        }
        Ok(Tokenizer { seq_len, buckets })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    /// Bucket id in `[1, B-1]` for one label.
    pub fn bucketize(&self, label: &str) -> Result<u32> {
        if label.is_empty() {
            return Err(Error::Record("empty domain label".into()));
        }
        Ok(self.bucket_of(label.as_bytes()))
    }

    fn bucket_of(&self, label: &[u8]) -> u32 {
        (fnv1a64_lower(label) % (self.buckets as u64 - 1)) as u32 + 1
    }

    pub fn tokenize(&self, qname: &str) -> Result<TokenSeq> {
        let mut tokens = vec![PAD; self.seq_len];
        self.tokenize_into(qname, &mut tokens)?;
        Ok(TokenSeq(tokens))
    }

    /// Writes the token sequence into `out` (length must be the sequence
    /// length). Over-long names keep their right-most labels.
    pub fn tokenize_into(&self, qname: &str, out: &mut [u32]) -> Result<()> {
        if out.len() != self.seq_len {
            return Err(Error::Shape(format!(
                "token buffer has length {}, expected {}",
                out.len(),
                self.seq_len
            )));
        }
        out.fill(PAD);
        let mut slot = self.seq_len;
        for label in qname.rsplit('.').filter(|l| !l.is_empty()) {
            if slot == 0 {
                break;
            }
            slot -= 1;
            out[slot] = self.bucket_of(label.as_bytes());
        }
        if slot == self.seq_len {
            return Err(Error::Record(format!("query name `{qname}` has no labels")));
        }
        Ok(())
    }
}

/// [`Tokenizer::bucketize`] with the default bucket count.
pub fn bucketize(label: &str) -> Result<u32> {
    Tokenizer::default().bucketize(label)
}

/// [`Tokenizer::tokenize`] with the default length and bucket count.
pub fn tokenize(qname: &str) -> Result<TokenSeq> {
    Tokenizer::default().tokenize(qname)
}

/// Per-feature standardization statistics fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Columns whose variance fell below the guard and got `std = 1`.
    pub zero_variance: Vec<bool>,
}

const STD_GUARD: f64 = 1e-8;

impl FeatureScaler {
    /// Column means and population standard deviations (Welford update).
    pub fn fit<'a, I>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut n = 0usize;
        let mut mean: Vec<f64> = Vec::new();
        let mut m2: Vec<f64> = Vec::new();
        for row in rows {
            if n == 0 {
                mean = vec![0.0; row.len()];
                m2 = vec![0.0; row.len()];
            } else if row.len() != mean.len() {
                return Err(Error::Shape(format!(
                    "row {n} has {} features, expected {}",
                    row.len(),
                    mean.len()
                )));
            }
            n += 1;
            for (j, &x) in row.iter().enumerate() {
                if !x.is_finite() {
                    return Err(Error::NonFinite(format!("scaler input row {}, column {j}", n - 1)));
                }
                let delta = x - mean[j];
                mean[j] += delta / n as f64;
                m2[j] += delta * (x - mean[j]);
            }
        }
        if n < 2 {
            return Err(Error::Empty(format!("scaler needs at least 2 rows, got {n}")));
        }
        let mut zero_variance = Vec::with_capacity(mean.len());
        let std = m2
            .iter()
            .map(|&s| {
                let sd = (s / n as f64).sqrt();
                zero_variance.push(sd < STD_GUARD);
                if sd < STD_GUARD {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(FeatureScaler {
            mean,
            std,
            zero_variance,
        })
    }

    pub fn identity(dim: usize) -> Self {
        FeatureScaler {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
            zero_variance: vec![false; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        Ok(x
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| (v - m) / s)
            .collect())
    }

    /// Standardizes into an `f32` buffer of the same length.
    pub fn transform_into(&self, x: &[f64], out: &mut [f32]) -> Result<()> {
        self.check_dim(x.len())?;
        self.check_dim(out.len())?;
        for (o, (&v, (&m, &s))) in out.iter_mut().zip(x.iter().zip(self.mean.iter().zip(&self.std))) {
            *o = ((v - m) / s) as f32;
        }
        Ok(())
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(Error::Shape(format!(
                "numeric vector has {got} features, scaler expects {}",
                self.dim()
            )));
        }
        Ok(())
    }

    /// Writes a JSON listing of `(name, mean, std, zero_variance)` per feature.
    pub fn write_named<W: Write>(&self, names: &[&str], mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Entry<'a> {
            name: &'a str,
            mean: f64,
            std: f64,
            zero_variance: bool,
        }
        if names.len() != self.dim() {
            return Err(Error::Shape(format!(
                "{} feature names for {} scaler columns",
                names.len(),
                self.dim()
            )));
        }
        let entries: Vec<Entry> = names
            .iter()
            .enumerate()
            .map(|(i, name)| Entry {
                name,
                mean: self.mean[i],
                std: self.std[i],
                zero_variance: self.zero_variance[i],
            })
            .collect();
        serde_json::to_writer_pretty(&mut out, &entries)
            .map_err(|e| Error::Record(e.to_string()))?;
        writeln!(out).map_err(|e| Error::io("<scaler>", e))
    }

    pub fn save_named(&self, names: &[&str], path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_named(names, std::io::BufWriter::new(file))
    }
}
