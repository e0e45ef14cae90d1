//! Recurrent cell with exponential-decay forgetting.
//!
//! Gate pre-activations are `[i, f, o, g] = x W_x + h W_h + b` (blocks of
//! width `h`, in that order). The forget block is turned into a decay
//! `alpha = exp(-softplus(f))`, which lies in `(0, 1]`, and the state update
//! is `c' = alpha * c + sigmoid(i) * tanh(g)`, `h' = sigmoid(o) * tanh(c')`.
//!
//! All tensors carry a batch of `N` rows. A sequence of `T` steps is stored
//! stacked as a `(T * N) x d` tensor whose row `t * N + n` is step `t` of
//! sample `n`.

use rand::Rng;

use super::tensor::{gemm, Real, Tensor2};
use crate::error::{Error, Result};

/// Bias given to the forget pre-activation at initialization; the initial
/// decay is `exp(-softplus(-1)) ~= 0.73`.
pub const FORGET_BIAS_INIT: f64 = -1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct XlstmCellParams<F> {
    /// `d_in x 4h`
    pub w_x: Tensor2<F>,
    /// `h x 4h`
    pub w_h: Tensor2<F>,
    /// `1 x 4h`
    pub b: Tensor2<F>,
}

impl<F: Real> XlstmCellParams<F> {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        XlstmCellParams {
            w_x: Tensor2::zeros(input_dim, 4 * hidden),
            w_h: Tensor2::zeros(hidden, 4 * hidden),
            b: Tensor2::zeros(1, 4 * hidden),
        }
    }

    /// Uniform `+-1/sqrt(fan_in)` weights, zero biases except the forget
    /// block.
    pub fn init<R: Rng>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input_dim, hidden);
        let bx = 1.0 / (input_dim as f64).sqrt();
        let bh = 1.0 / (hidden as f64).sqrt();
        p.w_x
            .map_inplace(|_| F::lit(rng.random_range(-bx..bx)));
        p.w_h
            .map_inplace(|_| F::lit(rng.random_range(-bh..bh)));
        for v in &mut p.b.data_mut()[hidden..2 * hidden] {
            *v = F::lit(FORGET_BIAS_INIT);
        }
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w_h.rows()
    }

    pub fn tensors(&self) -> [&Tensor2<F>; 3] {
        [&self.w_x, &self.w_h, &self.b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor2<F>; 3] {
        [&mut self.w_x, &mut self.w_h, &mut self.b]
    }

    fn check(&self) -> Result<()> {
        let h = self.hidden();
        if self.w_x.cols() != 4 * h || self.w_h.cols() != 4 * h || self.b.shape() != (1, 4 * h) {
            return Err(Error::Shape(format!(
                "cell params w_x {:?}, w_h {:?}, b {:?}",
                self.w_x.shape(),
                self.w_h.shape(),
                self.b.shape()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellState<F> {
    /// `N x h`
    pub h: Tensor2<F>,
    /// `N x h`
    pub c: Tensor2<F>,
}

impl<F: Real> CellState<F> {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        CellState {
            h: Tensor2::zeros(batch, hidden),
            c: Tensor2::zeros(batch, hidden),
        }
    }
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    let e = (-x.abs()).exp_act();
    let r = F::one() / (F::one() + e);
    if x >= F::zero() {
        r
    } else {
        e * r
    }
}

#[inline]
pub fn softplus<F: Real>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

/// `(exp(-softplus(f)), sigmoid(f))` from a single exponential, using
/// `exp(-softplus(f)) = 1 - sigmoid(f)`.
#[inline]
pub fn decay_and_sigmoid<F: Real>(f: F) -> (F, F) {
    let e = (-f.abs()).exp_act();
    let r = F::one() / (F::one() + e);
    if f >= F::zero() {
        (e * r, r)
    } else {
        (r, e * r)
    }
}

/// Activated gate values of one step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GateCache<F> {
    i: Vec<F>,
    alpha: Vec<F>,
    sig_f: Vec<F>,
    o: Vec<F>,
    g: Vec<F>,
    c_prev: Vec<F>,
    tanh_c: Vec<F>,
}

impl<F: Real> GateCache<F> {
    pub fn alpha(&self) -> &[F] {
        &self.alpha
    }
}

/// Applies the gate nonlinearities to `pre` (`N x 4h`) and advances the
/// state, writing `c'` and `h'` into the output slices.
fn gates_forward<F: Real>(
    pre: &[F],
    c_prev: &[F],
    hidden: usize,
    c_out: &mut [F],
    h_out: &mut [F],
) -> GateCache<F> {
    let len = c_prev.len();
    let mut cache = GateCache {
        i: vec![F::zero(); len],
        alpha: vec![F::zero(); len],
        sig_f: vec![F::zero(); len],
        o: vec![F::zero(); len],
        g: vec![F::zero(); len],
        c_prev: c_prev.to_vec(),
        tanh_c: vec![F::zero(); len],
    };
    for (r, row) in pre.chunks_exact(4 * hidden).enumerate() {
        let (pi, rest) = row.split_at(hidden);
        let (pf, rest) = rest.split_at(hidden);
        let (po, pg) = rest.split_at(hidden);
        let span = r * hidden..(r + 1) * hidden;
        let ci = &mut cache.i[span.clone()];
        let ca = &mut cache.alpha[span.clone()];
        let cs = &mut cache.sig_f[span.clone()];
        let co = &mut cache.o[span.clone()];
        let cg = &mut cache.g[span.clone()];
        let ct = &mut cache.tanh_c[span.clone()];
        for (out, &x) in ci.iter_mut().zip(pi) {
            *out = sigmoid(x);
        }
        for ((a, s), &x) in ca.iter_mut().zip(cs.iter_mut()).zip(pf) {
            (*a, *s) = decay_and_sigmoid(x);
        }
        for (out, &x) in co.iter_mut().zip(po) {
            *out = sigmoid(x);
        }
        for (out, &x) in cg.iter_mut().zip(pg) {
            *out = x.tanh_act();
        }
        let cp = &c_prev[span.clone()];
        let c_row = &mut c_out[span.clone()];
        let h_row = &mut h_out[span];
        for j in 0..hidden {
            let c = ca[j] * cp[j] + ci[j] * cg[j];
            c_row[j] = c;
            ct[j] = c.tanh_act();
            h_row[j] = co[j] * ct[j];
        }
    }
    cache
}

/// Reverse of [`gates_forward`]: from upstream `dh`, `dc` of the new state to
/// the pre-activation gradient (`N x 4h`, overwritten) and `dc_prev`.
fn gates_backward<F: Real>(
    dh: &[F],
    dc: &[F],
    cache: &GateCache<F>,
    hidden: usize,
    dpre: &mut [F],
    dc_prev: &mut [F],
) {
    let one = F::one();
    for (r, row) in dpre.chunks_exact_mut(4 * hidden).enumerate() {
        let (di, rest) = row.split_at_mut(hidden);
        let (df, rest) = rest.split_at_mut(hidden);
        let (d_o, dg) = rest.split_at_mut(hidden);
        for j in 0..hidden {
            let idx = r * hidden + j;
            let (i, alpha, o, g, tc) = (
                cache.i[idx],
                cache.alpha[idx],
                cache.o[idx],
                cache.g[idx],
                cache.tanh_c[idx],
            );
            let dct = dc[idx] + dh[idx] * o * (one - tc * tc);
            di[j] = dct * g * i * (one - i);
            df[j] = -(dct * cache.c_prev[idx] * alpha * cache.sig_f[idx]);
            d_o[j] = dh[idx] * tc * o * (one - o);
            dg[j] = dct * i * (one - g * g);
            dc_prev[idx] = dct * alpha;
        }
    }
}

fn check_state<F: Real>(x_rows: usize, state: &CellState<F>, hidden: usize) -> Result<()> {
    if state.h.shape() != (x_rows, hidden) || state.c.shape() != (x_rows, hidden) {
        return Err(Error::Shape(format!(
            "state h {:?}, c {:?} for batch {x_rows} and hidden {hidden}",
            state.h.shape(),
            state.c.shape()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CellCache<F> {
    x: Tensor2<F>,
    h_prev: Tensor2<F>,
    gates: GateCache<F>,
}

impl<F: Real> CellCache<F> {
    pub fn gates(&self) -> &GateCache<F> {
        &self.gates
    }
}

/// One step of the cell for a batch `x` (`N x d_in`).
pub fn cell_forward<F: Real>(
    x: &Tensor2<F>,
    state: &CellState<F>,
    params: &XlstmCellParams<F>,
) -> Result<(CellState<F>, CellCache<F>)> {
    params.check()?;
    let hidden = params.hidden();
    let n = x.rows();
    if x.cols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "cell input has {} columns, expected {}",
            x.cols(),
            params.input_dim()
        )));
    }
    check_state(n, state, hidden)?;
    let mut pre = Tensor2::matmul(x, false, &params.w_x, false)?;
    gemm(
        state.h.data(),
        n,
        hidden,
        false,
        params.w_h.data(),
        hidden,
        4 * hidden,
        false,
        F::one(),
        pre.data_mut(),
        n,
        4 * hidden,
    )?;
    pre.add_row_broadcast(&params.b)?;
    let mut next = CellState::zeros(n, hidden);
    let gates = gates_forward(
        pre.data(),
        state.c.data(),
        hidden,
        next.c.data_mut(),
        next.h.data_mut(),
    );
    next.h.ensure_finite("cell hidden state")?;
    next.c.ensure_finite("cell state")?;
    Ok((
        next,
        CellCache {
            x: x.clone(),
            h_prev: state.h.clone(),
            gates,
        },
    ))
}

/// Reverse-mode pass of [`cell_forward`]. Parameter gradients are added into
/// `grads`; returns the input gradient and the gradient of the previous state.
pub fn cell_backward<F: Real>(
    grad_h: &Tensor2<F>,
    grad_c: &Tensor2<F>,
    cache: &CellCache<F>,
    params: &XlstmCellParams<F>,
    grads: &mut XlstmCellParams<F>,
) -> Result<(Tensor2<F>, CellState<F>)> {
    params.check()?;
    let hidden = params.hidden();
    let n = cache.x.rows();
    if grad_h.shape() != (n, hidden) || grad_c.shape() != (n, hidden) {
        return Err(Error::Shape(format!(
            "upstream gradients {:?}/{:?} for batch {n} and hidden {hidden}",
            grad_h.shape(),
            grad_c.shape()
        )));
    }
    if grads.w_x.shape() != params.w_x.shape() || grads.w_h.shape() != params.w_h.shape() {
        return Err(Error::Shape("gradient accumulator does not match params".into()));
    }
    let mut dpre = Tensor2::zeros(n, 4 * hidden);
    let mut prev = CellState::zeros(n, hidden);
    gates_backward(
        grad_h.data(),
        grad_c.data(),
        &cache.gates,
        hidden,
        dpre.data_mut(),
        prev.c.data_mut(),
    );
    let (d_in, h4) = (params.input_dim(), 4 * hidden);
    gemm(cache.x.data(), n, d_in, true, dpre.data(), n, h4, false, F::one(), grads.w_x.data_mut(), d_in, h4)?;
    gemm(cache.h_prev.data(), n, hidden, true, dpre.data(), n, h4, false, F::one(), grads.w_h.data_mut(), hidden, h4)?;
    dpre.col_sums_into(&mut grads.b)?;
    let dx = Tensor2::matmul(&dpre, false, &params.w_x, true)?;
    prev.h = Tensor2::matmul(&dpre, false, &params.w_h, true)?;
    Ok((dx, prev))
}

#[derive(Debug, Clone)]
pub struct LayerCache<F> {
    steps: usize,
    batch: usize,
    input: Tensor2<F>,
    hidden_seq: Tensor2<F>,
    gates: Vec<GateCache<F>>,
}

impl<F: Real> LayerCache<F> {
    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// Runs the cell over a stacked `(T * N) x d_in` sequence from a zero state.
/// Returns the stacked hidden states `(T * N) x h` and the final state.
pub fn layer_forward<F: Real>(
    seq: &Tensor2<F>,
    steps: usize,
    params: &XlstmCellParams<F>,
) -> Result<(Tensor2<F>, CellState<F>, LayerCache<F>)> {
    params.check()?;
    if steps == 0 || !seq.rows().is_multiple_of(steps) {
        return Err(Error::Shape(format!(
            "{} sequence rows are not a multiple of {steps} steps",
            seq.rows()
        )));
    }
    if seq.cols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "layer input has {} columns, expected {}",
            seq.cols(),
            params.input_dim()
        )));
    }
    let hidden = params.hidden();
    let h4 = 4 * hidden;
    let batch = seq.rows() / steps;

    // Input projections for every step at once.
    let mut pre_all = Tensor2::matmul(seq, false, &params.w_x, false)?;
    pre_all.add_row_broadcast(&params.b)?;

    let mut hidden_seq = Tensor2::zeros(steps * batch, hidden);
    let mut c = vec![F::zero(); batch * hidden];
    let mut c_next = vec![F::zero(); batch * hidden];
    let mut gates = Vec::with_capacity(steps);
    for t in 0..steps {
        if t > 0 {
            let (done, _) = hidden_seq.data_mut().split_at_mut(t * batch * hidden);
            let h_prev = &done[(t - 1) * batch * hidden..];
            gemm(
                h_prev,
                batch,
                hidden,
                false,
                params.w_h.data(),
                hidden,
                h4,
                false,
                F::one(),
                pre_all.rows_slice_mut(t * batch, (t + 1) * batch),
                batch,
                h4,
            )?;
        }
        let h_out = hidden_seq.rows_slice_mut(t * batch, (t + 1) * batch);
        let cache = gates_forward(
            pre_all.rows_slice(t * batch, (t + 1) * batch),
            &c,
            hidden,
            &mut c_next,
            h_out,
        );
        gates.push(cache);
        std::mem::swap(&mut c, &mut c_next);
    }
    hidden_seq.ensure_finite("recurrent layer output")?;
    let final_state = CellState {
        h: Tensor2::from_vec(
            batch,
            hidden,
            hidden_seq.rows_slice((steps - 1) * batch, steps * batch).to_vec(),
        )?,
        c: Tensor2::from_vec(batch, hidden, c)?,
    };
    Ok((
        hidden_seq.clone(),
        final_state,
        LayerCache {
            steps,
            batch,
            input: seq.clone(),
            hidden_seq,
            gates,
        },
    ))
}

/// Backpropagation through time for [`layer_forward`]. `grad_hidden` is the
/// gradient of the loss with respect to every stacked hidden state. Parameter
/// gradients are added into `grads`; returns the stacked input gradient.
pub fn layer_backward<F: Real>(
    grad_hidden: &Tensor2<F>,
    cache: &LayerCache<F>,
    params: &XlstmCellParams<F>,
    grads: &mut XlstmCellParams<F>,
) -> Result<Tensor2<F>> {
    params.check()?;
    let hidden = params.hidden();
    let h4 = 4 * hidden;
    let (steps, batch) = (cache.steps, cache.batch);
    if grad_hidden.shape() != (steps * batch, hidden) {
        return Err(Error::Shape(format!(
            "hidden gradient {:?}, expected {:?}",
            grad_hidden.shape(),
            (steps * batch, hidden)
        )));
    }
    let mut dpre_all = Tensor2::zeros(steps * batch, h4);
    let mut dh_carry = vec![F::zero(); batch * hidden];
    let mut dc_carry = vec![F::zero(); batch * hidden];
    let mut dc_prev = vec![F::zero(); batch * hidden];
    let mut dh = vec![F::zero(); batch * hidden];
    for t in (0..steps).rev() {
        for ((d, &g), &carry) in dh
            .iter_mut()
            .zip(grad_hidden.rows_slice(t * batch, (t + 1) * batch))
            .zip(&dh_carry)
        {
            *d = g + carry;
        }
        let dpre = dpre_all.rows_slice_mut(t * batch, (t + 1) * batch);
        gates_backward(&dh, &dc_carry, &cache.gates[t], hidden, dpre, &mut dc_prev);
        std::mem::swap(&mut dc_carry, &mut dc_prev);
        if t > 0 {
            let h_prev = cache.hidden_seq.rows_slice((t - 1) * batch, t * batch);
            let dpre = dpre_all.rows_slice(t * batch, (t + 1) * batch);
            gemm(h_prev, batch, hidden, true, dpre, batch, h4, false, F::one(), grads.w_h.data_mut(), hidden, h4)?;
            gemm(dpre, batch, h4, false, params.w_h.data(), hidden, h4, true, F::zero(), &mut dh_carry, batch, hidden)?;
        }
    }
    let d_in = params.input_dim();
    gemm(
        cache.input.data(),
        steps * batch,
        d_in,
        true,
        dpre_all.data(),
        steps * batch,
        h4,
        false,
        F::one(),
        grads.w_x.data_mut(),
        d_in,
        h4,
    )?;
    dpre_all.col_sums_into(&mut grads.b)?;
    Tensor2::matmul(&dpre_all, false, &params.w_x, true)
}
