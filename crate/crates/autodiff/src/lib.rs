//! Tape-based reverse-mode differentiation over a small op set: real and
//! complex dense tensors, FFTs along chosen axes, frequency truncation,
//! complex mode/region/channel mixing, channel linear maps and GELU.

pub mod error;
pub mod fft;
pub mod ops;
pub mod optim;
pub mod spectral;
pub mod tape;
pub mod tensor;

pub use error::{AdError, Result};
pub use ops::{gelu, gelu_grad};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use spectral::{truncate_modes, two_sided, untruncate, ModeBlocks};
pub use tape::{BackwardFn, Gradients, ParamGrads, ParamId, ParamSet, Tape, Var};
pub use tensor::{numel, strides, DType, Storage, Tensor, C64};
