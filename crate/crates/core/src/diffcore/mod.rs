//! Minimal dense-tensor engine with reverse-mode gradients.

mod float;
pub mod gradcheck;
mod tape;
mod tensor;

pub use float::Float;
pub use gradcheck::{check_gradients, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use tape::{ConvGeom, Gradients, Tape, Var};
pub use tensor::{Bindings, Param, ParamId, ParamStore, Tensor};

/// Epsilon used by every layer norm in the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;
