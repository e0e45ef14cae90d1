//! AdamW with decoupled weight decay, global-norm clipping, plateau learning
//! rate reduction and early stopping.

use super::tensor::{Real, Tensor2};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: per-parameter moments, step count and current rate.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    pub lr: f64,
    step: u64,
    m: Vec<Tensor2<F>>,
    v: Vec<Tensor2<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            lr: config.lr,
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. `params` and `grads` are parallel lists of tensors; the
    /// moment buffers are allocated on the first call and shape-checked after.
    pub fn step(&mut self, params: &mut [&mut Tensor2<F>], grads: &[&Tensor2<F>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors, {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor2::zeros(p.rows(), p.cols())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Shape("parameter list changed between steps".into()));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            p.same_shape(g, "adamw gradient")?;
            p.same_shape(m, "adamw moment")?;
        }

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2_sqrt = (1.0 - c.beta2.powi(t)).sqrt();
        let decay = F::lit(1.0 - self.lr * c.weight_decay);
        let step_size = F::lit(self.lr / bc1);
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let (one_b1, one_b2) = (F::lit(1.0 - c.beta1), F::lit(1.0 - c.beta2));
        let bc2_sqrt = F::lit(bc2_sqrt);
        let eps = F::lit(c.eps);

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w *= decay;
                *mi = b1 * *mi + one_b1 * gr;
                *vi = b2 * *vi + one_b2 * gr * gr;
                *w -= step_size * *mi / (vi.sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients by `max_norm / norm` when their joint L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut [&mut Tensor2<F>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sum_squares()).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = F::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.map_inplace(|v| v * scale);
        }
    }
    norm
}

/// Halves the learning rate after `patience` epochs without an improvement of
/// at least `min_delta`, down to `min_lr`.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub min_lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl Default for PlateauScheduler {
    fn default() -> Self {
        PlateauScheduler {
            factor: 0.5,
            patience: 2,
            min_delta: 1e-4,
            min_lr: 1e-5,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }
}

impl PlateauScheduler {
    pub fn with_patience(patience: usize) -> Self {
        PlateauScheduler {
            patience,
            ..Self::default()
        }
    }

    /// Feeds one validation loss; returns the (possibly reduced) rate.
    pub fn observe(&mut self, val_loss: f64, lr: f64) -> f64 {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EarlyStopDecision {
    /// This epoch is the best so far; its parameters should be kept.
    pub improved: bool,
    pub stop: bool,
}

#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    bad_epochs: usize,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        EarlyStopping {
            patience: 5,
            min_delta: 1e-4,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }
}

impl EarlyStopping {
    pub fn with_patience(patience: usize) -> Self {
        EarlyStopping {
            patience,
            ..Self::default()
        }
    }

    pub fn observe(&mut self, val_loss: f64) -> EarlyStopDecision {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.bad_epochs = 0;
            return EarlyStopDecision {
                improved: true,
                stop: false,
            };
        }
        self.bad_epochs += 1;
        EarlyStopDecision {
            improved: false,
            stop: self.bad_epochs >= self.patience,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradient_is_pure_decay() {
        let cfg = AdamWConfig::default();
        let mut opt = AdamW::<f32>::new(cfg);
        let init = vec![1.0f32, -2.5, 0.125, 3.0];
        let mut w = Tensor2::from_vec(1, 4, init.clone()).unwrap();
        let g = Tensor2::zeros(1, 4);
        opt.step(&mut [&mut w], &[&g]).unwrap();
        let factor = (1.0 - cfg.lr * cfg.weight_decay) as f32;
        for (a, b) in w.data().iter().zip(&init) {
            assert_eq!(*a, b * factor);
        }
        assert_eq!(opt.step_count(), 1);
        opt.step(&mut [&mut w], &[&g]).unwrap();
        assert_eq!(opt.step_count(), 2);
    }

    /// Straight-line scalar AdamW in the textbook form (bias-corrected
    /// moments, decay applied before the adaptive step).
    fn reference_adamw(w0: f64, grad: f64, steps: usize, lr: f64, wd: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            w -= lr * wd * w;
            m = b1 * m + (1.0 - b1) * grad;
            v = b2 * v + (1.0 - b2) * grad * grad;
            let m_hat = m / (1.0 - b1.powi(t as i32));
            let v_hat = v / (1.0 - b2.powi(t as i32));
            w -= lr * m_hat / (v_hat.sqrt() + eps);
            out.push(w);
        }
        out
    }

    #[test]
    fn constant_gradient_tracks_reference_and_saturates_at_lr() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::<f64>::new(cfg);
        let mut w = Tensor2::from_vec(1, 1, vec![0.5]).unwrap();
        let g = Tensor2::from_vec(1, 1, vec![0.3]).unwrap();
        let want = reference_adamw(0.5, 0.3, 1000, cfg.lr, 0.0);
        let mut prev = 0.5;
        for (i, &expect) in want.iter().enumerate() {
            opt.step(&mut [&mut w], &[&g]).unwrap();
            let now = w.get(0, 0);
            assert!((now - expect).abs() < 1e-12, "step {i}");
            if i == 999 {
                assert!(((prev - now) - cfg.lr).abs() < 1e-6 * cfg.lr * 10.0);
            }
            prev = now;
        }

        // with decay, still agrees with the reference
        let cfg = AdamWConfig::default();
        let mut opt = AdamW::<f64>::new(cfg);
        let mut w = Tensor2::from_vec(1, 1, vec![0.5]).unwrap();
        let want = reference_adamw(0.5, -0.7, 200, cfg.lr, cfg.weight_decay);
        for expect in want {
            opt.step(&mut [&mut w], &[&Tensor2::from_vec(1, 1, vec![-0.7]).unwrap()]).unwrap();
            assert!((w.get(0, 0) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn adamw_shape_errors() {
        let mut opt = AdamW::<f32>::new(AdamWConfig::default());
        let mut w = Tensor2::zeros(2, 2);
        assert!(opt.step(&mut [&mut w], &[&Tensor2::zeros(1, 2)]).is_err());
        assert!(opt.step(&mut [&mut w], &[]).is_err());
    }

    #[test]
    fn clipping() {
        let mut a = Tensor2::from_vec(1, 2, vec![0.3f32, 0.4]).unwrap();
        assert!((clip_global_norm(&mut [&mut a], 1.0) - 0.5).abs() < 1e-7);
        assert_eq!(a.data(), &[0.3, 0.4]);
        let mut b = Tensor2::from_vec(1, 2, vec![3.0f32, 4.0]).unwrap();
        clip_global_norm(&mut [&mut b], 1.0);
        assert!((b.get(0, 0) - 0.6).abs() < 1e-7 && (b.get(0, 1) - 0.8).abs() < 1e-7);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mut ts: Vec<Tensor2<f32>> = (0..3)
                .map(|i| Tensor2::from_fn(i + 1, 7, |_, _| rng.random_range(-3.0..3.0)))
                .collect();
            let mut refs: Vec<&mut Tensor2<f32>> = ts.iter_mut().collect();
            clip_global_norm(&mut refs, 1.0);
            let after = ts.iter().map(|t| t.sum_squares()).sum::<f64>().sqrt();
            assert!(after <= 1.0 + 1e-6, "{after}");
        }
    }

    #[test]
    fn plateau_and_early_stop() {
        let mut sched = PlateauScheduler::default();
        let mut stop = EarlyStopping::default();
        let mut lr = 2e-3;
        for loss in [1.0, 0.9, 0.8] {
            lr = sched.observe(loss, lr);
            assert!(!stop.observe(loss).stop);
        }
        assert_eq!(lr, 2e-3);

        let mut sched = PlateauScheduler::default();
        let mut stop = EarlyStopping::default();
        let mut lr = 2e-3;
        let mut reduced_at = Vec::new();
        let mut stop_at = None;
        for epoch in 1..=8 {
            let new_lr = sched.observe(1.0, lr);
            if new_lr < lr {
                reduced_at.push(epoch);
            }
            lr = new_lr;
            if stop.observe(1.0).stop && stop_at.is_none() {
                stop_at = Some(epoch);
            }
        }
        assert_eq!(reduced_at.first(), Some(&3));
        assert_eq!(stop_at, Some(6));

        // below min-delta counts as no improvement
        let mut stop = EarlyStopping::default();
        assert!(stop.observe(1.0).improved);
        assert!(!stop.observe(1.0 - 5e-5).improved);
        let mut sched = PlateauScheduler { min_lr: 1e-5, ..Default::default() };
        let mut lr = 1.5e-5;
        for _ in 0..10 {
            lr = sched.observe(1.0, lr);
        }
        assert_eq!(lr, 1e-5);
    }
}
