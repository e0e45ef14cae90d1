//! Minimal neural-network kernel with hand-written forward and backward
//! passes, generic over `f32` / `f64`.

pub mod dense;
pub mod embedding;
pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod tensor;
pub mod xlstm;

pub use dense::{dropout_backward_inplace, dropout_inplace, relu_backward_inplace, relu_inplace, softmax_inplace, softmax_rows, Dense};
pub use embedding::Embedding;
pub use loss::{cross_entropy, softmax_cross_entropy_backward};
pub use optim::{clip_global_norm, AdamW, AdamWConfig, EarlyStopping, PlateauScheduler};
pub use tensor::{Real, Tensor2};
pub use xlstm::{cell_backward, cell_forward, layer_backward, layer_forward, CellState, XlstmCellParams};
