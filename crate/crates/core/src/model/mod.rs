//! The assembled classifier: token embedding, stacked recurrent layers, fusion
//! of the top layer's final hidden state with the standardized numerics, and
//! a three-layer MLP head with softmax output.

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    dropout_backward_inplace, dropout_inplace, layer_backward, layer_forward, relu_backward_inplace,
    relu_inplace, softmax_rows, Dense, Embedding, Real, Tensor2, XlstmCellParams,
};
use crate::nn::xlstm::LayerCache;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyxnetConfig {
    /// Token sequence length `T`.
    pub seq_len: usize,
    /// Hash bucket count `B` (embedding rows).
    pub buckets: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Numeric feature count `d_n`.
    pub numeric_dim: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub head: (usize, usize),
    /// Also append the numeric vector to every step's embedding (off by
    /// default; numerics always enter the head).
    pub numeric_per_step: bool,
}

impl Default for HyxnetConfig {
    fn default() -> Self {
        HyxnetConfig {
            seq_len: 15,
            buckets: 1 << 15,
            emb_dim: 64,
            hidden: 128,
            layers: 2,
            numeric_dim: 8,
            num_classes: 12,
            dropout: 0.2,
            head: (256, 128),
            numeric_per_step: false,
        }
    }
}

impl HyxnetConfig {
    pub fn with_io(numeric_dim: usize, num_classes: usize) -> Self {
        HyxnetConfig {
            numeric_dim,
            num_classes,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("seq_len", self.seq_len),
            ("emb_dim", self.emb_dim),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("num_classes", self.num_classes),
            ("head.0", self.head.0),
            ("head.1", self.head.1),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("model config: {name} must be positive")));
        }
        if self.buckets < 2 {
            return Err(Error::InvalidArgument("model config: buckets must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "model config: dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    fn first_layer_input(&self) -> usize {
        self.emb_dim + if self.numeric_per_step { self.numeric_dim } else { 0 }
    }

    /// Closed-form learnable parameter count.
    pub fn count_params(&self) -> usize {
        let h4 = 4 * self.hidden;
        let embedding = self.buckets * self.emb_dim;
        let first = self.first_layer_input() * h4 + self.hidden * h4 + h4;
        let rest = (self.layers - 1) * (2 * self.hidden * h4 + h4);
        let (u, v) = self.head;
        let head = (self.numeric_dim + self.hidden) * u + u + u * v + v + v * self.num_classes + self.num_classes;
        embedding + first + rest + head
    }
}

/// Free-function form of [`HyxnetConfig::count_params`].
pub fn count_params(config: &HyxnetConfig) -> usize {
    config.count_params()
}

/// All learnable weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub embedding: Embedding<F>,
    pub layers: Vec<XlstmCellParams<F>>,
    pub head: [Dense<F>; 3],
}

impl<F: Real> ModelParams<F> {
    pub fn zeros(config: &HyxnetConfig) -> Self {
        let mut layers = Vec::with_capacity(config.layers);
        layers.push(XlstmCellParams::zeros(config.first_layer_input(), config.hidden));
        for _ in 1..config.layers {
            layers.push(XlstmCellParams::zeros(config.hidden, config.hidden));
        }
        let (u, v) = config.head;
        ModelParams {
            embedding: Embedding::zeros(config.buckets, config.emb_dim),
            layers,
            head: [
                Dense::zeros(config.numeric_dim + config.hidden, u),
                Dense::zeros(u, v),
                Dense::zeros(v, config.num_classes),
            ],
        }
    }

    pub fn init(config: &HyxnetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = Embedding::init(config.buckets, config.emb_dim, &mut rng);
        let mut layers = Vec::with_capacity(config.layers);
        layers.push(XlstmCellParams::init(config.first_layer_input(), config.hidden, &mut rng));
        for _ in 1..config.layers {
            layers.push(XlstmCellParams::init(config.hidden, config.hidden, &mut rng));
        }
        let (u, v) = config.head;
        let head = [
            Dense::init(config.numeric_dim + config.hidden, u, &mut rng),
            Dense::init(u, v, &mut rng),
            Dense::init(v, config.num_classes, &mut rng),
        ];
        ModelParams {
            embedding,
            layers,
            head,
        }
    }

    /// Every tensor in fixed order: embedding table, each layer's
    /// `(w_x, w_h, b)`, then each head layer's `(w, b)`.
    pub fn tensors(&self) -> Vec<&Tensor2<F>> {
        let mut out = vec![&self.embedding.table];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        for d in &self.head {
            out.extend(d.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2<F>> {
        let mut out = vec![&mut self.embedding.table];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        for d in &mut self.head {
            out.extend(d.tensors_mut());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(F::zero());
        }
    }

    /// Checks every tensor shape against `config`.
    pub fn check_shapes(&self, config: &HyxnetConfig) -> Result<()> {
        let want = ModelParams::<F>::zeros(config);
        for (i, (a, b)) in self.tensors().iter().zip(want.tensors()).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "parameter tensor {i} is {:?}, config requires {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        if self.tensors().len() != want.tensors().len() {
            return Err(Error::Shape("parameter tensor count differs from config".into()));
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        let mut out = ModelParams::<G> {
            embedding: Embedding {
                table: self.embedding.table.cast(),
            },
            layers: self
                .layers
                .iter()
                .map(|l| XlstmCellParams {
                    w_x: l.w_x.cast(),
                    w_h: l.w_h.cast(),
                    b: l.b.cast(),
                })
                .collect(),
            head: [Dense::zeros(0, 0), Dense::zeros(0, 0), Dense::zeros(0, 0)],
        };
        for (dst, src) in out.head.iter_mut().zip(&self.head) {
            dst.w = src.w.cast();
            dst.b = src.b.cast();
        }
        out
    }
}

/// Softmax output for one sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub probs: Vec<f32>,
    pub label: usize,
    pub confidence: f32,
}

impl Prediction {
    pub fn from_probs(probs: Vec<f32>) -> Self {
        let (label, confidence) = probs
            .iter()
            .copied()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |best, (i, p)| if p > best.1 { (i, p) } else { best });
        Prediction {
            probs,
            label,
            confidence,
        }
    }
}

/// Activations kept by [`Model::forward`] for [`Model::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    batch: usize,
    tokens: Vec<u32>,
    layer_caches: Vec<LayerCache<F>>,
    z: Tensor2<F>,
    u_relu: Tensor2<F>,
    u: Tensor2<F>,
    u_mask: Option<Vec<F>>,
    v_relu: Tensor2<F>,
    v: Tensor2<F>,
    v_mask: Option<Vec<F>>,
    /// Top-layer final hidden state, `N x h`.
    pub h_last: Tensor2<F>,
    pub logits: Tensor2<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub config: HyxnetConfig,
    pub params: ModelParams<F>,
}

impl<F: Real> Model<F> {
    pub fn new(config: HyxnetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Model {
            params: ModelParams::init(&config, seed),
            config,
        })
    }

    pub fn from_params(config: HyxnetConfig, params: ModelParams<F>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Model { config, params })
    }

    /// Builds the stacked first-layer input, `(T * N) x d_in`.
    fn first_input(&self, tokens: &[u32], numerics: &[F], batch: usize) -> Result<Tensor2<F>> {
        let cfg = &self.config;
        let emb = self.params.embedding.forward(tokens, cfg.seq_len)?;
        if !cfg.numeric_per_step {
            return Ok(emb);
        }
        let (d_n, d_e) = (cfg.numeric_dim, cfg.emb_dim);
        let mut out = Tensor2::zeros(cfg.seq_len * batch, d_n + d_e);
        for t in 0..cfg.seq_len {
            for n in 0..batch {
                let row = out.row_mut(t * batch + n);
                row[..d_n].copy_from_slice(&numerics[n * d_n..(n + 1) * d_n]);
                row[d_n..].copy_from_slice(emb.row(t * batch + n));
            }
        }
        Ok(out)
    }

    /// Batched forward pass. `tokens` is `N x T` and `numerics` `N x d_n`,
    /// both row-major. Dropout is applied only when `rng` is given.
    pub fn forward<R: Rng>(
        &self,
        tokens: &[u32],
        numerics: &[F],
        rng: Option<&mut R>,
    ) -> Result<(Tensor2<F>, ForwardCache<F>)> {
        let cfg = &self.config;
        if tokens.is_empty() || !tokens.len().is_multiple_of(cfg.seq_len) {
            return Err(Error::Shape(format!(
                "{} tokens do not form sequences of length {}",
                tokens.len(),
                cfg.seq_len
            )));
        }
        let batch = tokens.len() / cfg.seq_len;
        if numerics.len() != batch * cfg.numeric_dim {
            return Err(Error::Shape(format!(
                "{} numeric values for {batch} samples of {} features",
                numerics.len(),
                cfg.numeric_dim
            )));
        }

        let mut input = self.first_input(tokens, numerics, batch)?;
        let mut layer_caches = Vec::with_capacity(cfg.layers);
        let mut h_last = Tensor2::zeros(batch, cfg.hidden);
        for layer in &self.params.layers {
            let (hidden_seq, last, cache) = layer_forward(&input, cfg.seq_len, layer)?;
            layer_caches.push(cache);
            h_last = last.h;
            input = hidden_seq;
        }

        let d_n = cfg.numeric_dim;
        let mut z = Tensor2::zeros(batch, d_n + cfg.hidden);
        for n in 0..batch {
            let row = z.row_mut(n);
            row[..d_n].copy_from_slice(&numerics[n * d_n..(n + 1) * d_n]);
            row[d_n..].copy_from_slice(h_last.row(n));
        }

        let [d1, d2, d3] = &self.params.head;
        let mut rng = rng;
        let mut u_relu = d1.forward(&z)?;
        relu_inplace(&mut u_relu);
        let mut u = u_relu.clone();
        let u_mask = match rng.as_deref_mut() {
            Some(r) => dropout_inplace(&mut u, cfg.dropout, true, r),
            None => None,
        };
        let mut v_relu = d2.forward(&u)?;
        relu_inplace(&mut v_relu);
        let mut v = v_relu.clone();
        let v_mask = match rng {
            Some(r) => dropout_inplace(&mut v, cfg.dropout, true, r),
            None => None,
        };
        let logits = d3.forward(&v)?;
        logits.ensure_finite("logits")?;
        let probs = softmax_rows(&logits);
        Ok((
            probs,
            ForwardCache {
                batch,
                tokens: tokens.to_vec(),
                layer_caches,
                z,
                u_relu,
                u,
                u_mask,
                v_relu,
                v,
                v_mask,
                h_last,
                logits,
            },
        ))
    }

    /// Reverse pass from the logit gradient; adds into `grads`.
    pub fn backward(&self, cache: &ForwardCache<F>, grad_logits: &Tensor2<F>, grads: &mut ModelParams<F>) -> Result<()> {
        let cfg = &self.config;
        let batch = cache.batch;
        let [d1, d2, d3] = &self.params.head;
        let [g1, g2, g3] = &mut grads.head;

        let mut gv = d3.backward(&cache.v, grad_logits, g3)?;
        dropout_backward_inplace(&mut gv, cache.v_mask.as_deref());
        relu_backward_inplace(&cache.v_relu, &mut gv);
        let mut gu = d2.backward(&cache.u, &gv, g2)?;
        dropout_backward_inplace(&mut gu, cache.u_mask.as_deref());
        relu_backward_inplace(&cache.u_relu, &mut gu);
        let gz = d1.backward(&cache.z, &gu, g1)?;

        let d_n = cfg.numeric_dim;
        let steps = cfg.seq_len;
        let mut grad_hidden = Tensor2::zeros(steps * batch, cfg.hidden);
        for n in 0..batch {
            grad_hidden
                .row_mut((steps - 1) * batch + n)
                .copy_from_slice(&gz.row(n)[d_n..]);
        }
        for (l, layer) in self.params.layers.iter().enumerate().rev() {
            grad_hidden = layer_backward(&grad_hidden, &cache.layer_caches[l], layer, &mut grads.layers[l])?;
        }
        let grad_emb = if cfg.numeric_per_step {
            let mut g = Tensor2::zeros(steps * batch, cfg.emb_dim);
            for r in 0..steps * batch {
                g.row_mut(r).copy_from_slice(&grad_hidden.row(r)[d_n..]);
            }
            g
        } else {
            grad_hidden
        };
        self.params
            .embedding
            .backward(&grad_emb, &cache.tokens, steps, &mut grads.embedding.table)
    }

    /// Probabilities for a batch with dropout off.
    pub fn predict_probs(&self, tokens: &[u32], numerics: &[F]) -> Result<Tensor2<F>> {
        Ok(self.forward::<ChaCha8Rng>(tokens, numerics, None)?.0)
    }

    /// Single-sample inference.
    pub fn predict(&self, tokens: &[u32], numerics: &[F]) -> Result<Prediction> {
        if tokens.len() != self.config.seq_len {
            return Err(Error::Shape(format!(
                "expected {} tokens, got {}",
                self.config.seq_len,
                tokens.len()
            )));
        }
        let probs = self.predict_probs(tokens, numerics)?;
        Ok(Prediction::from_probs(
            probs.data().iter().map(|p| p.to_f32().unwrap_or(f32::NAN)).collect(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_param_count() {
        let cfg = HyxnetConfig::default();
        assert_eq!(cfg.count_params(), 2_397_068);
        assert_eq!(count_params(&cfg), 2_397_068);
        assert_eq!(cfg.buckets * cfg.emb_dim, 2_097_152);
        let two = HyxnetConfig::with_io(8, 2);
        assert_eq!(cfg.count_params() - two.count_params(), 10 * 128 + 10);
    }

    #[test]
    fn count_matches_allocated_tensors() {
        for cfg in [
            HyxnetConfig {
                buckets: 64,
                ..Default::default()
            },
            HyxnetConfig {
                buckets: 32,
                numeric_per_step: true,
                layers: 3,
                numeric_dim: 5,
                num_classes: 2,
                ..Default::default()
            },
        ] {
            assert_eq!(ModelParams::<f32>::zeros(&cfg).param_count(), cfg.count_params());
        }
    }

    #[test]
    fn config_validation() {
        assert!(HyxnetConfig::default().validate().is_ok());
        assert!(HyxnetConfig { hidden: 0, ..Default::default() }.validate().is_err());
        assert!(HyxnetConfig { dropout: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn zero_params_predict_uniform() {
        let cfg = HyxnetConfig {
            buckets: 128,
            ..Default::default()
        };
        let model = Model::from_params(cfg, ModelParams::<f32>::zeros(&cfg)).unwrap();
        let tokens: Vec<u32> = (0..15).map(|i| (i * 7 % 128) as u32).collect();
        let p = model.predict(&tokens, &[3.0, -1.0, 0.5, 2.0, 9.0, -4.0, 0.0, 1.0]).unwrap();
        for &v in &p.probs {
            assert!((v - 1.0 / 12.0).abs() < 1e-7);
        }
    }

    #[test]
    fn prediction_argmax() {
        let p = Prediction::from_probs(vec![0.1, 0.7, 0.2]);
        assert_eq!((p.label, p.confidence), (1, 0.7));
    }

    #[test]
    fn input_shape_errors() {
        let cfg = HyxnetConfig {
            buckets: 16,
            seq_len: 3,
            numeric_dim: 2,
            ..Default::default()
        };
        let model = Model::<f32>::new(cfg, 1).unwrap();
        assert!(model.predict(&[1, 2], &[0.0, 0.0]).is_err());
        assert!(model.predict(&[1, 2, 3], &[0.0]).is_err());
        assert!(model.predict(&[1, 2, 16], &[0.0, 0.0]).is_err());
        assert!(model.predict(&[1, 2, 3], &[0.0, 0.0]).is_ok());
    }
}
