use rand::Rng;

use super::tensor::{gemm, Real, Tensor2};
use crate::error::{Error, Result};

/// Affine layer `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    pub w: Tensor2<F>,
    pub b: Tensor2<F>,
}

impl<F: Real> Dense<F> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            w: Tensor2::zeros(input, output),
            b: Tensor2::zeros(1, output),
        }
    }

    /// Uniform `+-1/sqrt(in)` weights, zero bias.
    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut d = Self::zeros(input, output);
        d.w.map_inplace(|_| F::lit(rng.random_range(-bound..bound)));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn forward(&self, x: &Tensor2<F>) -> Result<Tensor2<F>> {
        let mut y = Tensor2::matmul(x, false, &self.w, false)?;
        y.add_row_broadcast(&self.b)?;
        Ok(y)
    }

    /// Adds parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, x: &Tensor2<F>, grad_y: &Tensor2<F>, grads: &mut Dense<F>) -> Result<Tensor2<F>> {
        let (n, input, output) = (x.rows(), self.input_dim(), self.output_dim());
        if grad_y.shape() != (n, output) || grads.w.shape() != self.w.shape() {
            return Err(Error::Shape(format!(
                "dense backward: x {:?}, grad {:?}, w {:?}",
                x.shape(),
                grad_y.shape(),
                self.w.shape()
            )));
        }
        gemm(x.data(), n, input, true, grad_y.data(), n, output, false, F::one(), grads.w.data_mut(), input, output)?;
        grad_y.col_sums_into(&mut grads.b)?;
        Tensor2::matmul(grad_y, false, &self.w, true)
    }

    pub fn tensors(&self) -> [&Tensor2<F>; 2] {
        [&self.w, &self.b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor2<F>; 2] {
        [&mut self.w, &mut self.b]
    }
}

pub fn relu_inplace<F: Real>(x: &mut Tensor2<F>) {
    x.map_inplace(|v| v.max(F::zero()));
}

/// Masks `grad` where the post-activation output was not positive.
pub fn relu_backward_inplace<F: Real>(activated: &Tensor2<F>, grad: &mut Tensor2<F>) {
    for (g, &a) in grad.data_mut().iter_mut().zip(activated.data()) {
        if a <= F::zero() {
            *g = F::zero();
        }
    }
}

/// Inverted dropout: kept units are scaled by `1 / (1 - p)`. Returns the
/// applied mask (`0` or `1 / (1 - p)` per element), or `None` when inactive.
pub fn dropout_inplace<F: Real, R: Rng>(x: &mut Tensor2<F>, p: f64, train: bool, rng: &mut R) -> Option<Vec<F>> {
    if !train || p <= 0.0 {
        return None;
    }
    let keep = F::lit(1.0 / (1.0 - p));
    let mask: Vec<F> = (0..x.len())
        .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
        .collect();
    for (v, &m) in x.data_mut().iter_mut().zip(&mask) {
        *v *= m;
    }
    Some(mask)
}

pub fn dropout_backward_inplace<F: Real>(grad: &mut Tensor2<F>, mask: Option<&[F]>) {
    if let Some(mask) = mask {
        for (g, &m) in grad.data_mut().iter_mut().zip(mask) {
            *g *= m;
        }
    }
}

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax_rows<F: Real>(logits: &Tensor2<F>) -> Tensor2<F> {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_inplace(out.row_mut(r));
    }
    out
}

pub fn softmax_inplace<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
