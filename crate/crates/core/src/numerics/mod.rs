//! Tensors, FFTs, and reverse-mode differentiation.

pub mod fft;
mod gradcheck;
mod graph;
mod tensor;

pub use fft::{fft, fft_axis, ifft, Direction, FftPlan};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{soft_threshold, Gradients, Graph, Var, EMPTY_REGION_SCORE};
pub use tensor::Tensor;
