//! Binary checkpoint container.
//!
//! Every integer and float is little-endian. Layout:
//!
//! ```text
//! magic        4 bytes  "HYXN"
//! version      u32      1
//! config       u32 x 10 seq_len, buckets, emb_dim, hidden, layers,
//!                       numeric_dim, num_classes, head.0, head.1,
//!                       numeric_per_step (0/1)
//!              f64      dropout
//! schema       u32      column count, then per column:
//!                       u8 kind (0 numeric, 1 qname, 2 label), u32 length, UTF-8 name
//! labels       u32      class count, then per class: u32 length, UTF-8 name
//! scaler       f64 x d_n means, f64 x d_n stds, u8 x d_n zero-variance flags
//! tensors      u32      tensor count, then per tensor:
//!                       u32 rows, u32 cols, f32 x rows*cols (row-major)
//! checksum     u64      FNV-1a of every preceding byte
//! ```
//!
//! Tensor order is the embedding table, each recurrent layer's
//! `(w_x, w_h, b)`, then each head layer's `(w, b)`.

use std::fs;
use std::path::Path;

use super::{HyxnetConfig, Model, ModelParams};
use crate::encoder::{FeatureScaler, Tokenizer};
use crate::error::{Error, Result};
use crate::ingest::{Column, ColumnKind, FeatureSchema, LabelMap};
use crate::nn::Tensor2;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HYXN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained model with everything inference needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub schema: FeatureSchema,
    pub labels: LabelMap,
    pub scaler: FeatureScaler,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn as_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} does not fit in u32")))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) -> Result<()> {
        self.u32(as_u32(s.len(), "string length")?);
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

impl Checkpoint {
    /// Validates that all parts agree on dimensions.
    pub fn new(model: Model<f32>, schema: FeatureSchema, labels: LabelMap, scaler: FeatureScaler) -> Result<Self> {
        let cfg = &model.config;
        if schema.numeric_count() != cfg.numeric_dim || scaler.dim() != cfg.numeric_dim {
            return Err(Error::Checkpoint(format!(
                "numeric dimension mismatch: model {}, schema {}, scaler {}",
                cfg.numeric_dim,
                schema.numeric_count(),
                scaler.dim()
            )));
        }
        if labels.len() != cfg.num_classes {
            return Err(Error::Checkpoint(format!(
                "model has {} classes, label map has {}",
                cfg.num_classes,
                labels.len()
            )));
        }
        model.params.check_shapes(cfg)?;
        Ok(Checkpoint {
            model,
            schema,
            labels,
            scaler,
        })
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.model.config.seq_len, self.model.config.buckets)
            .expect("validated config gives a valid tokenizer")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = &self.model.config;
        let mut w = Writer(Vec::with_capacity(4 * cfg.count_params() + 4096));
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        for v in [
            cfg.seq_len,
            cfg.buckets,
            cfg.emb_dim,
            cfg.hidden,
            cfg.layers,
            cfg.numeric_dim,
            cfg.num_classes,
            cfg.head.0,
            cfg.head.1,
            usize::from(cfg.numeric_per_step),
        ] {
            w.u32(as_u32(v, "config value")?);
        }
        w.f64(cfg.dropout);

        w.u32(as_u32(self.schema.columns().len(), "column count")?);
        for col in self.schema.columns() {
            w.0.push(match col.kind {
                ColumnKind::Numeric => 0,
                ColumnKind::Qname => 1,
                ColumnKind::Label => 2,
            });
            w.str(&col.name)?;
        }

        w.u32(as_u32(self.labels.len(), "class count")?);
        for name in self.labels.names() {
            w.str(name)?;
        }

        for &m in &self.scaler.mean {
            w.f64(m);
        }
        for &s in &self.scaler.std {
            w.f64(s);
        }
        w.0.extend(self.scaler.zero_variance.iter().map(|&z| u8::from(z)));

        let tensors = self.model.params.tensors();
        w.u32(as_u32(tensors.len(), "tensor count")?);
        for t in tensors {
            w.u32(as_u32(t.rows(), "rows")?);
            w.u32(as_u32(t.cols(), "cols")?);
            for v in t.data() {
                w.0.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&w.0);
        w.0.extend_from_slice(&sum.to_le_bytes());
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic; not a model checkpoint".into()));
        }
        let mut r = Reader { buf: bytes, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        if bytes.len() < 16 {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if fnv1a(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch (truncated or corrupted file)".into()));
        }
        let mut r = Reader { buf: body, pos: r.pos };

        let mut v = [0usize; 10];
        for slot in &mut v {
            *slot = r.usize()?;
        }
        let config = HyxnetConfig {
            seq_len: v[0],
            buckets: v[1],
            emb_dim: v[2],
            hidden: v[3],
            layers: v[4],
            numeric_dim: v[5],
            num_classes: v[6],
            head: (v[7], v[8]),
            numeric_per_step: v[9] != 0,
            dropout: r.f64()?,
        };
        config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("invalid stored config: {e}")))?;

        let n_cols = r.usize()?;
        let mut columns = Vec::with_capacity(n_cols.min(1024));
        for _ in 0..n_cols {
            let kind = match r.u8()? {
                0 => ColumnKind::Numeric,
                1 => ColumnKind::Qname,
                2 => ColumnKind::Label,
                k => return Err(Error::Checkpoint(format!("unknown column kind {k}"))),
            };
            columns.push(Column { name: r.str()?, kind });
        }
        let schema = FeatureSchema::new(columns)?;

        let n_labels = r.usize()?;
        let mut names = Vec::with_capacity(n_labels.min(1024));
        for _ in 0..n_labels {
            names.push(r.str()?);
        }
        let labels = LabelMap::new(&names)?;

        let d_n = config.numeric_dim;
        let mut mean = Vec::with_capacity(d_n);
        let mut std = Vec::with_capacity(d_n);
        for _ in 0..d_n {
            mean.push(r.f64()?);
        }
        for _ in 0..d_n {
            std.push(r.f64()?);
        }
        let zero_variance = r.take(d_n)?.iter().map(|&b| b != 0).collect();
        let scaler = FeatureScaler {
            mean,
            std,
            zero_variance,
        };

        let mut params = ModelParams::<f32>::zeros(&config);
        let n_tensors = r.usize()?;
        if n_tensors != params.tensors().len() {
            return Err(Error::Checkpoint(format!(
                "{n_tensors} tensors stored, config requires {}",
                params.tensors().len()
            )));
        }
        for (i, t) in params.tensors_mut().into_iter().enumerate() {
            let (rows, cols) = (r.usize()?, r.usize()?);
            if (rows, cols) != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {i} stored as {rows}x{cols}, config requires {:?}",
                    t.shape()
                )));
            }
            let raw = r.take(rows * cols * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            *t = Tensor2::from_vec(rows, cols, data)?;
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!(
                "{} unexpected trailing bytes",
                body.len() - r.pos
            )));
        }
        if !params.all_finite() {
            return Err(Error::Checkpoint("non-finite weight".into()));
        }
        Self::new(Model { config, params }, schema, labels, scaler)
    }

    /// Writes via a temporary sibling file and rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        let cfg = HyxnetConfig {
            buckets: 64,
            emb_dim: 4,
            hidden: 6,
            head: (8, 5),
            seq_len: 5,
            numeric_dim: 2,
            num_classes: 3,
            ..Default::default()
        };
        let schema = FeatureSchema::parse("q:qname\na:numeric\nb:numeric\nlabel:label\n").unwrap();
        let labels = LabelMap::new(&["normal", "iodine", "tuns"]).unwrap();
        let scaler = FeatureScaler {
            mean: vec![1.5, -2.0],
            std: vec![0.5, 1.0],
            zero_variance: vec![false, true],
        };
        Checkpoint::new(Model::new(cfg, 3).unwrap(), schema, labels, scaler).unwrap()
    }

    #[test]
    fn byte_round_trip() {
        let ck = small();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_magic_version_truncation_and_corruption() {
        let bytes = small().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(m)) if m.contains("magic")));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(m)) if m.contains("version")));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
        let mut bad = bytes.clone();
        let mid = bytes.len() - 40;
        bad[mid] ^= 0x40;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(b"HY").is_err());
    }

    #[test]
    fn dimension_disagreement_is_refused() {
        let ck = small();
        let wrong = LabelMap::new(&["a", "b"]).unwrap();
        assert!(Checkpoint::new(ck.model.clone(), ck.schema.clone(), wrong, ck.scaler.clone()).is_err());
        let scaler = FeatureScaler::identity(3);
        assert!(Checkpoint::new(ck.model, ck.schema, ck.labels, scaler).is_err());
    }
}
