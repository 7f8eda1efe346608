//! Dense tensors, resize matrices, the 2-D DFT and reverse-mode gradients.

pub mod autograd;
pub mod dft;
pub mod resize;
mod tensor;

pub use autograd::{numerical_grad, relative_error, Graph, Var};
pub use dft::{dft2, dft2_l1, Spectrum};
pub use resize::{build_resize_matrix, pi_resize_embed_weights, resize_decoder_weights, ResizePlan};
pub use tensor::Tensor;
