//! Dense tensors with reverse-mode gradients, standard layers, and a
//! finite-difference gradient checker.

mod gradcheck;
mod layers;
mod params;
mod real;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck, DEFAULT_DELTA, FINE_DELTA};
pub use layers::{linear, run_blocks, LayerNorm, Linear, MultiHeadAttention, TransformerBlock, LN_EPS, MLP_EXPANSION};
pub use params::{Bound, Init, Param, ParamId, ParamStore};
pub use real::{gemm, Real};
pub use tape::{pool_window, ConvGeom, CustomOp, Gradients, Tape, Var};

#[cfg(test)]
mod tests;
