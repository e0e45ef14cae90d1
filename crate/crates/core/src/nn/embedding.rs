use rand::Rng;

use super::tensor::{Real, Tensor2};
use crate::error::{Error, Result};

/// Token lookup table, `B x d_emb`. Row 0 is the pad row and is trained like
/// any other.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<F> {
    pub table: Tensor2<F>,
}

impl<F: Real> Embedding<F> {
    pub fn zeros(vocab: usize, dim: usize) -> Self {
        Embedding {
            table: Tensor2::zeros(vocab, dim),
        }
    }

    /// Rows drawn from `U(-0.05, 0.05)`.
    pub fn init<R: Rng>(vocab: usize, dim: usize, rng: &mut R) -> Self {
        let mut e = Self::zeros(vocab, dim);
        e.table.map_inplace(|_| F::lit(rng.random_range(-0.05..0.05)));
        e
    }

    pub fn vocab(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    /// Gathers rows for a batch of token sequences. `tokens` is `N x T`
    /// row-major; the result is stacked time-major, `(T * N) x d_emb`.
    pub fn forward(&self, tokens: &[u32], steps: usize) -> Result<Tensor2<F>> {
        let batch = batch_of(tokens.len(), steps)?;
        let dim = self.dim();
        let mut out = Tensor2::zeros(steps * batch, dim);
        for n in 0..batch {
            for t in 0..steps {
                let id = tokens[n * steps + t] as usize;
                if id >= self.vocab() {
                    return Err(Error::Shape(format!(
                        "token id {id} outside vocabulary of {}",
                        self.vocab()
                    )));
                }
                out.row_mut(t * batch + n).copy_from_slice(self.table.row(id));
            }
        }
        Ok(out)
    }

    /// Scatter-adds stacked output gradients into `grad_table`. Repeated ids
    /// accumulate.
    pub fn backward(&self, grad_out: &Tensor2<F>, tokens: &[u32], steps: usize, grad_table: &mut Tensor2<F>) -> Result<()> {
        let batch = batch_of(tokens.len(), steps)?;
        if grad_out.shape() != (steps * batch, self.dim()) || grad_table.shape() != self.table.shape() {
            return Err(Error::Shape(format!(
                "embedding backward: grad {:?}, table grad {:?}",
                grad_out.shape(),
                grad_table.shape()
            )));
        }
        for n in 0..batch {
            for t in 0..steps {
                let id = tokens[n * steps + t] as usize;
                if id >= self.vocab() {
                    return Err(Error::Shape(format!("token id {id} outside vocabulary")));
                }
                let src = grad_out.row(t * batch + n);
                for (g, &s) in grad_table.row_mut(id).iter_mut().zip(src) {
                    *g += s;
                }
            }
        }
        Ok(())
    }
}

fn batch_of(len: usize, steps: usize) -> Result<usize> {
    if steps == 0 || !len.is_multiple_of(steps) {
        return Err(Error::Shape(format!("{len} tokens do not form sequences of {steps}")));
    }
    Ok(len / steps)
}
