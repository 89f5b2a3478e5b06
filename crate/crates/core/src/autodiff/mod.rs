//! Reverse-mode differentiation over 4-D tensors with the layer set the
//! U-Net needs.

pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{gradient_check, GradCheck};
pub use params::{Param, ParamId, ParamKind, ParamStore};
pub use tape::{BnParams, Mode, Tape, Var};
pub use tensor::Tensor4;
