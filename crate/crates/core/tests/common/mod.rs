#![allow(dead_code)]

use hyxnet::model::{HyxnetConfig, Model, ModelParams};
use hyxnet::nn::gradcheck::{central_difference, relative_error};
use hyxnet::nn::{
    cell_backward, cell_forward, cross_entropy, layer_backward, layer_forward, softmax_cross_entropy_backward,
    softmax_rows, CellState, Dense, Embedding, Real, Tensor2, XlstmCellParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Finite-difference step for each precision.
pub fn fd_step<F: Real>() -> f64 {
    if std::mem::size_of::<F>() == 4 {
        1e-2
    } else {
        1e-6
    }
}

fn to_f64<F: Real>(t: &Tensor2<F>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64().unwrap()).collect()
}

fn from_f64<F: Real>(rows: usize, cols: usize, x: &[f64]) -> Tensor2<F> {
    Tensor2::from_vec(rows, cols, x.iter().map(|&v| F::lit(v)).collect()).unwrap()
}

fn random<F: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor2<F> {
    Tensor2::from_fn(rows, cols, |_, _| F::lit(rng.random_range(-scale..scale)))
}

/// `sum(weights * out)` accumulated in f64.
fn weighted<F: Real>(out: &Tensor2<F>, weights: &Tensor2<F>) -> f64 {
    out.data()
        .iter()
        .zip(weights.data())
        .map(|(a, b)| a.to_f64().unwrap() * b.to_f64().unwrap())
        .sum()
}

/// Compares `analytic` against central differences of `loss` with respect to
/// `target`, which `loss` receives in perturbed form.
fn compare<F: Real>(target: &Tensor2<F>, analytic: &Tensor2<F>, mut loss: impl FnMut(&Tensor2<F>) -> f64) -> f64 {
    let (rows, cols) = target.shape();
    let mut flat = to_f64(target);
    let numeric = central_difference(&mut flat, fd_step::<F>(), |x| loss(&from_f64(rows, cols, x)));
    relative_error(&to_f64(analytic), &numeric)
}

/// Cell on a 3-input, 2-hidden instance with a batch of 2.
pub fn cell_gradient_error<F: Real>(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d_in, hid, n) = (3, 2, 2);
    let mut params = XlstmCellParams::<F>::init(d_in, hid, &mut rng);
    params.b = random(&mut rng, 1, 4 * hid, 0.5);
    let x = random::<F>(&mut rng, n, d_in, 1.0);
    let state = CellState {
        h: random(&mut rng, n, hid, 0.8),
        c: random(&mut rng, n, hid, 1.5),
    };
    let rh = random::<F>(&mut rng, n, hid, 1.0);
    let rc = random::<F>(&mut rng, n, hid, 1.0);
    let loss = |x: &Tensor2<F>, s: &CellState<F>, p: &XlstmCellParams<F>| {
        let (next, _) = cell_forward(x, s, p).unwrap();
        weighted(&next.h, &rh) + weighted(&next.c, &rc)
    };
    let (_, cache) = cell_forward(&x, &state, &params).unwrap();
    let mut grads = XlstmCellParams::zeros(d_in, hid);
    let (dx, dprev) = cell_backward(&rh, &rc, &cache, &params, &mut grads).unwrap();

    let mut worst = 0.0f64;
    worst = worst.max(compare(&x, &dx, |t| loss(t, &state, &params)));
    worst = worst.max(compare(&state.h, &dprev.h, |t| {
        loss(&x, &CellState { h: t.clone(), c: state.c.clone() }, &params)
    }));
    worst = worst.max(compare(&state.c, &dprev.c, |t| {
        loss(&x, &CellState { h: state.h.clone(), c: t.clone() }, &params)
    }));
    for k in 0..3 {
        let target = params.tensors()[k].clone();
        let analytic = grads.tensors()[k].clone();
        worst = worst.max(compare(&target, &analytic, |t| {
            let mut p = params.clone();
            *p.tensors_mut()[k] = t.clone();
            loss(&x, &state, &p)
        }));
    }
    worst
}

/// Layer over T=4 steps, batch 2, 3 inputs, 3 hidden; loss on every step.
pub fn layer_gradient_error<F: Real>(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (steps, n, d_in, hid) = (4, 2, 3, 3);
    let mut params = XlstmCellParams::<F>::init(d_in, hid, &mut rng);
    params.b = random(&mut rng, 1, 4 * hid, 0.5);
    let seq = random::<F>(&mut rng, steps * n, d_in, 1.0);
    let r = random::<F>(&mut rng, steps * n, hid, 1.0);
    let loss = |s: &Tensor2<F>, p: &XlstmCellParams<F>| weighted(&layer_forward(s, steps, p).unwrap().0, &r);
    let (_, _, cache) = layer_forward(&seq, steps, &params).unwrap();
    let mut grads = XlstmCellParams::zeros(d_in, hid);
    let dseq = layer_backward(&r, &cache, &params, &mut grads).unwrap();

    let mut worst = compare(&seq, &dseq, |t| loss(t, &params));
    for k in 0..3 {
        let target = params.tensors()[k].clone();
        let analytic = grads.tensors()[k].clone();
        worst = worst.max(compare(&target, &analytic, |t| {
            let mut p = params.clone();
            *p.tensors_mut()[k] = t.clone();
            loss(&seq, &p)
        }));
    }
    worst
}

/// Embedding with repeated token ids.
pub fn embedding_gradient_error<F: Real>(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (vocab, dim, steps) = (5, 3, 4);
    let emb = Embedding::<F>::init(vocab, dim, &mut rng);
    let tokens = [0u32, 3, 3, 1, 4, 3, 0, 2];
    let r = random::<F>(&mut rng, tokens.len(), dim, 1.0);
    let mut grad = Tensor2::zeros(vocab, dim);
    emb.backward(&r, &tokens, steps, &mut grad).unwrap();
    compare(&emb.table, &grad, |t| {
        let e = Embedding { table: t.clone() };
        weighted(&e.forward(&tokens, steps).unwrap(), &r)
    })
}

/// Dense 4 -> 3 on a batch of 5.
pub fn dense_gradient_error<F: Real>(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Dense::<F>::init(4, 3, &mut rng);
    d.b = random(&mut rng, 1, 3, 0.5);
    let x = random::<F>(&mut rng, 5, 4, 1.0);
    let r = random::<F>(&mut rng, 5, 3, 1.0);
    let mut grads = Dense::zeros(4, 3);
    let dx = d.backward(&x, &r, &mut grads).unwrap();
    let loss = |x: &Tensor2<F>, d: &Dense<F>| weighted(&d.forward(x).unwrap(), &r);
    let mut worst = compare(&x, &dx, |t| loss(t, &d));
    worst = worst.max(compare(&d.w, &grads.w, |t| loss(&x, &Dense { w: t.clone(), b: d.b.clone() })));
    worst.max(compare(&d.b, &grads.b, |t| loss(&x, &Dense { w: d.w.clone(), b: t.clone() })))
}

/// Fused softmax + mean cross-entropy on `rows x classes` logits.
pub fn softmax_ce_gradient_error<F: Real>(seed: u64, rows: usize, classes: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = random::<F>(&mut rng, rows, classes, 2.0);
    let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    let grad = softmax_cross_entropy_backward(&softmax_rows(&logits), &labels, rows).unwrap();
    compare(&logits, &grad, |t| {
        cross_entropy(&softmax_rows(t), &labels).unwrap().to_f64().unwrap()
    })
}

/// Two-class toy configuration.
pub fn toy_config(numeric_per_step: bool) -> HyxnetConfig {
    HyxnetConfig {
        seq_len: 3,
        buckets: 8,
        emb_dim: 2,
        hidden: 2,
        layers: 2,
        numeric_dim: 1,
        num_classes: 2,
        dropout: 0.2,
        head: (4, 3),
        numeric_per_step,
    }
}

/// End-to-end check of the assembled model, dropout on with a fixed mask
/// stream so every evaluation sees the same mask.
pub fn model_gradient_error<F: Real>(seed: u64, numeric_per_step: bool) -> f64 {
    let cfg = toy_config(numeric_per_step);
    let mut model = Model::<F>::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
    for t in model.params.tensors_mut() {
        for v in t.data_mut() {
            *v = F::lit(rng.random_range(-0.9..0.9));
        }
    }
    let tokens = [0u32, 5, 2, 0, 0, 7, 3, 3, 1];
    let numerics: Vec<F> = [0.4, -1.3, 0.9].iter().map(|&v| F::lit(v)).collect();
    let labels = [1usize, 0, 1];
    let mask_seed = seed + 1;

    let loss = |m: &Model<F>| {
        let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
        let (probs, _) = m.forward(&tokens, &numerics, Some(&mut r)).unwrap();
        cross_entropy(&probs, &labels).unwrap().to_f64().unwrap()
    };
    let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
    let (probs, cache) = model.forward(&tokens, &numerics, Some(&mut r)).unwrap();
    let dlogits = softmax_cross_entropy_backward(&probs, &labels, 3).unwrap();
    let mut grads = ModelParams::<F>::zeros(&cfg);
    model.backward(&cache, &dlogits, &mut grads).unwrap();

    let mut analytic_all = Vec::new();
    let mut numeric_all = Vec::new();
    let n = model.params.tensors().len();
    for k in 0..n {
        let target = model.params.tensors()[k].clone();
        let (rows, cols) = target.shape();
        let mut flat = to_f64(&target);
        let numeric = central_difference(&mut flat, fd_step::<F>(), |x| {
            let mut m = model.clone();
            *m.params.tensors_mut()[k] = from_f64(rows, cols, x);
            loss(&m)
        });
        analytic_all.extend(to_f64(grads.tensors()[k]));
        numeric_all.extend(numeric);
    }
    relative_error(&analytic_all, &numeric_all)
}
