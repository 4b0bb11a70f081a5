//! Differentiable tensor substrate: a recording tape with reverse-mode
//! gradients, the layer primitives the models are built from, plain SGD and a
//! finite-difference verifier.

mod conv;
pub mod gradcheck;
pub mod init;
pub mod optim;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, finite_difference_check_where, GradCheckOptions, GradCheckReport};
pub use optim::OptimizerState;
pub use tape::{BatchStats, BnMode, Gradients, Tape, Var, BN_EPS};
pub use tensor::{ParameterSet, Tensor};

